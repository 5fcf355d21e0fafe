#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "galip/errors.hpp"
#include "galip/trainer.hpp"

namespace galip::serving {

inline constexpr int64_t kMaxCount = 16;
inline constexpr int64_t kMinGridSide = 2;
inline constexpr int64_t kMaxGridSide = 16;
inline constexpr int64_t kMaxSteps = 64;

// A request failure that maps onto an HTTP status.
class ServiceError : public Error {
 public:
  ServiceError(int status, const std::string& message) : Error(message), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

// Bilinear blend of the corners {e00, e10, e01, e11}; u runs along e00->e10,
// v along e00->e01. Computed in double and returned in the corners' dtype.
torch::Tensor interp_embedding(const std::array<torch::Tensor, 4>& corners, double u, double v);

// Bounded LRU of text embeddings. Ids are derived from the embedding bytes
// and a per-cache salt, so storing the same embedding twice yields the same
// id and ids from another server instance do not resolve.
class AnchorCache {
 public:
  explicit AnchorCache(size_t capacity = 1024, std::optional<uint64_t> salt = std::nullopt);

  std::string put(const torch::Tensor& embedding);
  // Refreshes recency on hit.
  std::optional<torch::Tensor> get(const std::string& id);
  std::optional<std::chrono::system_clock::time_point> created(const std::string& id) const;

  size_t size() const;
  size_t capacity() const { return capacity_; }

 private:
  struct Entry {
    std::string id;
    torch::Tensor embedding;
    std::chrono::system_clock::time_point created;
  };

  size_t capacity_;
  uint64_t salt_;
  mutable std::mutex mutex_;
  std::list<Entry> order_;  // most recent first
  std::unordered_map<std::string, std::list<Entry>::iterator> index_;
};

// Noise row `index` of a request seeded with `seed`: (1, noise_dim), drawn
// from its own generator so rows do not depend on the request's batch size.
torch::Tensor noise_row(uint64_t seed, int64_t index, int64_t noise_dim, torch::ScalarType dtype);

// Inference over one generator snapshot plus the anchor cache. Requests are
// JSON objects; responses are JSON objects with base64 PNG images.
class GenerationService {
 public:
  explicit GenerationService(std::shared_ptr<GeneratorBundle> snapshot = nullptr, size_t anchor_capacity = 1024,
                             std::optional<uint64_t> salt = std::nullopt);

  static std::shared_ptr<GenerationService> from_checkpoint(const std::filesystem::path& checkpoint,
                                                            size_t anchor_capacity = 1024);

  // Readers keep whichever snapshot they started with.
  void swap_snapshot(std::shared_ptr<GeneratorBundle> snapshot);
  std::shared_ptr<GeneratorBundle> snapshot() const;

  nlohmann::json healthz() const;
  nlohmann::json handle_generate(const nlohmann::json& request);
  nlohmann::json handle_grid(const nlohmann::json& request);
  nlohmann::json interpolate(const nlohmann::json& request);

  // (E,) embedding of one prompt.
  torch::Tensor embed_prompt(const std::string& prompt);
  // Renders (N, E) embeddings with (N, Z) noise one sample at a time, so an
  // image never depends on what else shares its request. Returns (N, 3, S, S)
  // in [-1, 1].
  torch::Tensor render(const torch::Tensor& embeddings, const torch::Tensor& noise);

  AnchorCache& anchors() { return anchors_; }

 private:
  std::shared_ptr<GeneratorBundle> require_snapshot() const;
  torch::Tensor resolve_corner(const nlohmann::json& spec, std::string& anchor_id);
  uint64_t resolve_seed(const nlohmann::json& request);
  torch::Tensor render_locked(GeneratorBundle& bundle, const torch::Tensor& embeddings,
                              const torch::Tensor& noise);

  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<GeneratorBundle> snapshot_;
  std::mutex device_mutex_;
  AnchorCache anchors_;
  std::mutex seed_mutex_;
  std::mt19937_64 seed_rng_;
};

// Routes GET /healthz, POST /generate, POST /grid and POST /interpolate to a
// service.
class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<GenerationService> service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Port 0 binds an ephemeral port. Returns the bound port.
  int bind(const std::string& host, int port);
  void listen();  // blocks until stop()
  void start();   // listen() on a background thread
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
};

}  // namespace galip::serving
