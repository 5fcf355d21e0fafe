#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "galip/backbone.hpp"
#include "galip/data.hpp"
#include "galip/discriminator.hpp"
#include "galip/generator.hpp"
#include "galip/objectives.hpp"
#include "galip/tokenizer.hpp"

namespace galip {

struct TrainConfig {
  // Backbone weights: a safetensors file, or "tiny-random"/"random" for a
  // seeded random initialisation of `backbone`.
  std::string backbone_source = "random";
  uint64_t backbone_seed = 7;
  // BPE merges file; empty selects the seeded hash tokenizer.
  std::string vocab_path;

  BackboneConfig backbone;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  ObjectiveConfig objective;

  int64_t batch_size = 64;
  double lr_generator = 1e-4;
  double lr_discriminator = 4e-4;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.9;
  int64_t max_steps = 100000;
  uint64_t seed = 0;
  int64_t checkpoint_every = 5000;
  std::string train_split = "train";
  bool double_precision = false;

  static TrainConfig full();  // ViT-B/32 shapes
  static TrainConfig tiny();  // test-scale shapes
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Flat "key = value" document with '#' comments. A `preset = tiny|full` line
// selects the base values; every other key overrides one field.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string format_config(const TrainConfig& config);

std::unique_ptr<Tokenizer> make_tokenizer(const TrainConfig& config);

// Rotates a (B, E) batch by one position: [e1, e2, e3] -> [e2, e3, e1].
torch::Tensor make_mismatch(const torch::Tensor& texts);

struct StepMetrics {
  int64_t step = 0;
  double loss_d = 0;
  double hinge = 0;
  double magp = 0;
  double loss_g = 0;
  double similarity = 0;
  double real_logit = 0;
  double fake_logit = 0;
  double mismatch_logit = 0;
  double grad_norm = 0;  // E[|g_c| + |g_e|] on real pairs
  double timestamp = 0;  // seconds since epoch
  double step_seconds = 0;

  nlohmann::json to_json() const;
};

// Owns both learnable halves, their optimizers and the noise stream; the
// backbone is shared and never updated.
class Trainer {
 public:
  Trainer(TrainConfig config, std::shared_ptr<const Backbone> backbone);

  const TrainConfig& config() const { return config_; }
  const Backbone& backbone() const { return *backbone_; }
  MateGenerator& generator() { return generator_; }
  MateDiscriminator& discriminator() { return discriminator_; }

  // One discriminator update followed by one generator update. `texts` are
  // (B, text_embed_dim) embeddings, B >= 2. On a non-finite loss the state
  // is left as it was and NonFiniteLoss names the offending term.
  StepMetrics train_step(const torch::Tensor& images, const torch::Tensor& texts);

  int64_t step() const { return step_; }
  int64_t discriminator_updates() const { return d_updates_; }
  int64_t generator_updates() const { return g_updates_; }

  torch::Tensor sample_noise(int64_t count);

  // Parameters, optimizer moments, counters and the noise stream. `extra`
  // lands in the file's metadata (e.g. the data iterator position).
  void save_checkpoint(const std::filesystem::path& path, const std::map<std::string, std::string>& extra = {}) const;
  // Returns the stored metadata.
  std::map<std::string, std::string> load_checkpoint(const std::filesystem::path& path);

 private:
  struct Snapshot;
  Snapshot snapshot_discriminator() const;
  void restore_discriminator(const Snapshot& snap);

  TrainConfig config_;
  std::shared_ptr<const Backbone> backbone_;
  MateGenerator generator_{nullptr};
  MateDiscriminator discriminator_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  at::Generator noise_gen_;
  int64_t step_ = 0;
  int64_t d_updates_ = 0;
  int64_t g_updates_ = 0;
};

// Loads the backbone named by `config` and converts it to the training dtype.
std::shared_ptr<Backbone> make_backbone(const TrainConfig& config);

// Encodes token batches with the frozen text path (no gradient).
torch::Tensor encode_captions(const Backbone& backbone, const torch::Tensor& ids, const torch::Tensor& lengths);

// A generator restored from a checkpoint, ready for inference.
struct GeneratorBundle {
  TrainConfig config;
  std::shared_ptr<Backbone> backbone;
  std::unique_ptr<Tokenizer> tokenizer;
  MateGenerator generator{nullptr};
  int64_t step = 0;
  std::string checkpoint_id;
};

GeneratorBundle load_generator_bundle(const std::filesystem::path& checkpoint);

// Run directory: config.txt, metrics.jsonl (one JSON object per step,
// appended), checkpoints/step_XXXXXXXX.safetensors.
struct RunOptions {
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  std::function<void(const StepMetrics&)> on_step;
};

void run_training(const TrainConfig& config, const RunOptions& options);

}  // namespace galip
