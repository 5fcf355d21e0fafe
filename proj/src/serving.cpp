#include "galip/serving.hpp"

#include <cstring>
#include <iomanip>
#include <sstream>

#include <httplib.h>

#include "galip/image_io.hpp"
#include "galip/objectives.hpp"

namespace galip::serving {

using nlohmann::json;

torch::Tensor interp_embedding(const std::array<torch::Tensor, 4>& corners, double u, double v) {
  if (!(u >= 0.0 && u <= 1.0) || !(v >= 0.0 && v <= 1.0)) {
    std::ostringstream os;
    os << "interp_embedding: (u, v) = (" << u << ", " << v << ") outside [0, 1]";
    throw InvalidArgument(os.str());
  }
  for (const auto& c : corners) {
    if (!c.defined() || c.sizes() != corners[0].sizes())
      throw InvalidArgument("interp_embedding: corners must be defined and share one shape");
  }
  const auto dtype = corners[0].scalar_type();
  auto blend = corners[0].to(torch::kDouble) * ((1.0 - u) * (1.0 - v)) + corners[1].to(torch::kDouble) * (u * (1.0 - v)) +
               corners[2].to(torch::kDouble) * ((1.0 - u) * v) + corners[3].to(torch::kDouble) * (u * v);
  return blend.to(dtype);
}

// ---------------------------------------------------------------------------
// AnchorCache

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex_id(uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace

AnchorCache::AnchorCache(size_t capacity, std::optional<uint64_t> salt)
    : capacity_(capacity), salt_(salt ? *salt : std::random_device{}() * 0x100000001ULL ^ std::random_device{}()) {
  if (capacity_ == 0) throw InvalidArgument("AnchorCache: capacity must be positive");
}

std::string AnchorCache::put(const torch::Tensor& embedding) {
  auto stored = embedding.detach().contiguous().clone();
  const uint64_t mixed = splitmix64(salt_);
  uint64_t h = fnv1a(0xcbf29ce484222325ULL, &mixed, sizeof(mixed));
  const int8_t dtype = static_cast<int8_t>(stored.scalar_type());
  h = fnv1a(h, &dtype, 1);
  for (auto s : stored.sizes()) h = fnv1a(h, &s, sizeof(s));
  h = fnv1a(h, stored.data_ptr(), stored.nbytes());

  std::lock_guard lock(mutex_);
  for (uint64_t probe = 0;; ++probe) {
    const auto id = hex_id(probe == 0 ? h : splitmix64(h + probe));
    auto it = index_.find(id);
    if (it == index_.end()) {
      order_.push_front({id, std::move(stored), std::chrono::system_clock::now()});
      index_[id] = order_.begin();
      if (order_.size() > capacity_) {
        index_.erase(order_.back().id);
        order_.pop_back();
      }
      return id;
    }
    const auto& existing = it->second->embedding;
    if (existing.scalar_type() == stored.scalar_type() && existing.sizes() == stored.sizes() &&
        std::memcmp(existing.data_ptr(), stored.data_ptr(), stored.nbytes()) == 0) {
      order_.splice(order_.begin(), order_, it->second);
      return id;
    }
  }
}

std::optional<torch::Tensor> AnchorCache::get(const std::string& id) {
  std::lock_guard lock(mutex_);
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  order_.splice(order_.begin(), order_, it->second);
  return it->second->embedding;
}

std::optional<std::chrono::system_clock::time_point> AnchorCache::created(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second->created;
}

size_t AnchorCache::size() const {
  std::lock_guard lock(mutex_);
  return order_.size();
}

// ---------------------------------------------------------------------------
// GenerationService

torch::Tensor noise_row(uint64_t seed, int64_t index, int64_t noise_dim, torch::ScalarType dtype) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(splitmix64(seed ^ splitmix64(static_cast<uint64_t>(index))));
  return torch::randn({1, noise_dim}, gen, torch::TensorOptions().dtype(dtype));
}

GenerationService::GenerationService(std::shared_ptr<GeneratorBundle> snapshot, size_t anchor_capacity,
                                     std::optional<uint64_t> salt)
    : snapshot_(std::move(snapshot)), anchors_(anchor_capacity, salt), seed_rng_(std::random_device{}()) {}

std::shared_ptr<GenerationService> GenerationService::from_checkpoint(const std::filesystem::path& checkpoint,
                                                                      size_t anchor_capacity) {
  auto bundle = std::make_shared<GeneratorBundle>(load_generator_bundle(checkpoint));
  return std::make_shared<GenerationService>(std::move(bundle), anchor_capacity);
}

void GenerationService::swap_snapshot(std::shared_ptr<GeneratorBundle> snapshot) {
  std::lock_guard lock(snapshot_mutex_);
  snapshot_ = std::move(snapshot);
}

std::shared_ptr<GeneratorBundle> GenerationService::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_;
}

std::shared_ptr<GeneratorBundle> GenerationService::require_snapshot() const {
  auto snap = snapshot();
  if (!snap) throw ServiceError(503, "no checkpoint loaded");
  return snap;
}

json GenerationService::healthz() const {
  auto snap = snapshot();
  if (!snap) return {{"status", "unavailable"}, {"checkpoint_id", nullptr}, {"backbone_id", nullptr}};
  return {{"status", "ok"}, {"checkpoint_id", snap->checkpoint_id}, {"backbone_id", snap->backbone->source_id()}};
}

torch::Tensor GenerationService::embed_prompt(const std::string& prompt) {
  auto snap = require_snapshot();
  torch::NoGradGuard no_grad;
  const auto tokens = snap->tokenizer->tokenize(prompt);
  auto [ids, lengths] = stack_tokens({tokens});
  return snap->backbone->encode_text(ids, lengths)[0].contiguous();
}

torch::Tensor GenerationService::render_locked(GeneratorBundle& bundle, const torch::Tensor& embeddings,
                                               const torch::Tensor& noise) {
  torch::NoGradGuard no_grad;
  const auto dtype = bundle.backbone->dtype();
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<size_t>(embeddings.size(0)));
  std::lock_guard lock(device_mutex_);
  for (int64_t i = 0; i < embeddings.size(0); ++i) {
    out.push_back(bundle.generator->generate(noise.slice(0, i, i + 1).to(dtype), embeddings.slice(0, i, i + 1).to(dtype),
                                             *bundle.backbone));
  }
  return torch::cat(out, 0);
}

torch::Tensor GenerationService::render(const torch::Tensor& embeddings, const torch::Tensor& noise) {
  auto snap = require_snapshot();
  if (embeddings.dim() != 2 || noise.dim() != 2 || embeddings.size(0) != noise.size(0))
    throw InvalidArgument("render: expected (N, E) embeddings and (N, Z) noise");
  return render_locked(*snap, embeddings, noise);
}

namespace {

std::string png_base64(const torch::Tensor& chw) { return base64_encode(encode_png(tensor_to_image(chw))); }

int64_t int_field(const json& request, const char* key, int64_t fallback, int64_t lo, int64_t hi) {
  if (!request.contains(key)) return fallback;
  const auto& v = request.at(key);
  if (!v.is_number_integer()) throw ServiceError(400, std::string("'") + key + "' must be an integer");
  const auto n = v.get<int64_t>();
  if (n < lo || n > hi)
    throw ServiceError(400, std::string("'") + key + "' must be in [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "], got " + std::to_string(n));
  return n;
}

std::string prompt_field(const json& request, const char* key) {
  if (!request.contains(key) || !request.at(key).is_string())
    throw ServiceError(400, std::string("'") + key + "' must be a string");
  auto prompt = request.at(key).get<std::string>();
  if (prompt.empty()) throw ServiceError(400, std::string("'") + key + "' must not be empty");
  return prompt;
}

void require_object(const json& request) {
  if (!request.is_object()) throw ServiceError(400, "request body must be a JSON object");
}

}  // namespace

uint64_t GenerationService::resolve_seed(const json& request) {
  if (request.contains("seed") && !request.at("seed").is_null()) {
    const auto& s = request.at("seed");
    if (!s.is_number_integer() || (s.is_number_integer() && !s.is_number_unsigned() && s.get<int64_t>() < 0))
      throw ServiceError(400, "'seed' must be a non-negative integer");
    return s.get<uint64_t>();
  }
  std::lock_guard lock(seed_mutex_);
  return seed_rng_() & ((1ULL << 53) - 1);  // exactly representable in a JS number
}

json GenerationService::handle_generate(const json& request) {
  require_object(request);
  auto snap = require_snapshot();
  const auto prompt = prompt_field(request, "prompt");
  if (request.contains("count") && request.at("count").is_number_integer() &&
      request.at("count").get<int64_t>() > kMaxCount)
    throw ServiceError(400, "'count' exceeds the limit of " + std::to_string(kMaxCount) + " images per request");
  const auto count = int_field(request, "count", 1, 1, kMaxCount);
  const auto seed = resolve_seed(request);

  const auto embedding = embed_prompt(prompt);
  const auto anchor = anchors_.put(embedding);
  const auto dtype = snap->backbone->dtype();
  std::vector<torch::Tensor> rows;
  for (int64_t i = 0; i < count; ++i) rows.push_back(noise_row(seed, i, snap->config.generator.noise_dim, dtype));
  const auto images = render_locked(*snap, embedding.unsqueeze(0).expand({count, -1}), torch::cat(rows, 0));

  json out_images = json::array();
  json scores = json::array();
  {
    torch::NoGradGuard no_grad;
    const auto features = snap->backbone->encode_image(Backbone::normalize(images));
    for (int64_t i = 0; i < count; ++i) {
      out_images.push_back(png_base64(images[i]));
      scores.push_back(mean_cosine(features.slice(0, i, i + 1).to(torch::kDouble),
                                   embedding.unsqueeze(0).to(torch::kDouble))
                           .item<double>());
    }
  }
  return {{"prompt", prompt},
          {"seed", seed},
          {"count", count},
          {"anchor_id", anchor},
          {"images", out_images},
          {"similarities", scores},
          {"checkpoint_id", snap->checkpoint_id},
          {"backbone_id", snap->backbone->source_id()}};
}

torch::Tensor GenerationService::resolve_corner(const json& spec, std::string& anchor_id) {
  if (spec.is_string()) {
    if (spec.get<std::string>().empty()) throw ServiceError(400, "corner prompt must not be empty");
    auto e = embed_prompt(spec.get<std::string>());
    anchor_id = anchors_.put(e);
    return e;
  }
  if (spec.is_object() && spec.contains("anchor")) {
    if (!spec.at("anchor").is_string()) throw ServiceError(400, "corner 'anchor' must be a string");
    anchor_id = spec.at("anchor").get<std::string>();
    auto e = anchors_.get(anchor_id);
    if (!e) throw ServiceError(404, "unknown or expired anchor id '" + anchor_id + "'");
    return *e;
  }
  if (spec.is_object() && spec.contains("prompt")) return resolve_corner(spec.at("prompt"), anchor_id);
  throw ServiceError(400, "corner must be a prompt string, {\"prompt\": ...} or {\"anchor\": ...}");
}

json GenerationService::handle_grid(const json& request) {
  require_object(request);
  auto snap = require_snapshot();
  if (!request.contains("corners") || !request.at("corners").is_array() || request.at("corners").size() != 4)
    throw ServiceError(400, "'corners' must list exactly four corner specs");
  if (!request.contains("rows") || !request.contains("cols")) throw ServiceError(400, "'rows' and 'cols' are required");
  const auto rows = int_field(request, "rows", 0, kMinGridSide, kMaxGridSide);
  const auto cols = int_field(request, "cols", 0, kMinGridSide, kMaxGridSide);
  bool share_noise = true;
  if (request.contains("share_noise")) {
    if (!request.at("share_noise").is_boolean()) throw ServiceError(400, "'share_noise' must be a boolean");
    share_noise = request.at("share_noise").get<bool>();
  }
  const auto seed = resolve_seed(request);

  std::array<torch::Tensor, 4> corners;
  json corner_ids = json::array();
  for (size_t i = 0; i < 4; ++i) {
    std::string id;
    corners[i] = resolve_corner(request.at("corners")[i], id);
    corner_ids.push_back(id);
  }
  if (corners[0].sizes() != corners[1].sizes() || corners[0].sizes() != corners[2].sizes() ||
      corners[0].sizes() != corners[3].sizes())
    throw ServiceError(400, "corner embeddings have different shapes");

  const auto dtype = snap->backbone->dtype();
  const auto z = snap->config.generator.noise_dim;
  std::vector<torch::Tensor> embeddings;
  std::vector<torch::Tensor> noises;
  json cells = json::array();
  const auto shared = noise_row(seed, 0, z, dtype);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      const double u = static_cast<double>(c) / static_cast<double>(cols - 1);
      const double v = static_cast<double>(r) / static_cast<double>(rows - 1);
      auto e = interp_embedding(corners, u, v).to(dtype);
      embeddings.push_back(e.unsqueeze(0));
      noises.push_back(share_noise ? shared : noise_row(seed, r * cols + c, z, dtype));
      cells.push_back({{"row", r}, {"col", c}, {"u", u}, {"v", v}, {"anchor_id", anchors_.put(e)}});
    }
  }
  const auto images = render_locked(*snap, torch::cat(embeddings, 0), torch::cat(noises, 0));
  for (int64_t i = 0; i < images.size(0); ++i) cells[static_cast<size_t>(i)]["image"] = png_base64(images[i]);
  return {{"rows", rows},
          {"cols", cols},
          {"seed", seed},
          {"share_noise", share_noise},
          {"corner_anchor_ids", corner_ids},
          {"cells", cells},
          {"checkpoint_id", snap->checkpoint_id},
          {"backbone_id", snap->backbone->source_id()}};
}

json GenerationService::interpolate(const json& request) {
  require_object(request);
  auto snap = require_snapshot();
  const auto prompt_a = prompt_field(request, "prompt_a");
  const auto prompt_b = prompt_field(request, "prompt_b");
  if (!request.contains("steps")) throw ServiceError(400, "'steps' is required");
  const auto steps = int_field(request, "steps", 0, 2, kMaxSteps);
  const auto seed = resolve_seed(request);

  const auto a = embed_prompt(prompt_a);
  const auto b = embed_prompt(prompt_b);
  const auto dtype = snap->backbone->dtype();
  const auto shared = noise_row(seed, 0, snap->config.generator.noise_dim, dtype);
  std::vector<torch::Tensor> embeddings;
  json frames = json::array();
  for (int64_t i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(steps - 1);
    auto e = interp_embedding({a, b, a, b}, t, 0.0);
    embeddings.push_back(e.unsqueeze(0));
    frames.push_back({{"index", i}, {"t", t}, {"anchor_id", anchors_.put(e)}});
  }
  const auto images = render_locked(*snap, torch::cat(embeddings, 0), shared.expand({steps, -1}));
  for (int64_t i = 0; i < steps; ++i) frames[static_cast<size_t>(i)]["image"] = png_base64(images[i]);
  return {{"prompt_a", prompt_a},
          {"prompt_b", prompt_b},
          {"steps", steps},
          {"seed", seed},
          {"frames", frames},
          {"checkpoint_id", snap->checkpoint_id},
          {"backbone_id", snap->backbone->source_id()}};
}

// ---------------------------------------------------------------------------
// HTTP

struct HttpServer::Impl {
  std::shared_ptr<GenerationService> service;
  httplib::Server server;
};

namespace {

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void route(httplib::Response& res, const std::function<json()>& handler) {
  try {
    reply(res, 200, handler());
  } catch (const ServiceError& e) {
    reply(res, e.status(), {{"error", e.what()}});
  } catch (const json::exception& e) {
    reply(res, 400, {{"error", std::string("malformed request: ") + e.what()}});
  } catch (const InvalidArgument& e) {
    reply(res, 400, {{"error", e.what()}});
  } catch (const std::exception& e) {
    reply(res, 500, {{"error", e.what()}});
  }
}

}  // namespace

HttpServer::HttpServer(std::shared_ptr<GenerationService> service) : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  auto* svc = impl_->service.get();
  auto& server = impl_->server;
  server.Get("/healthz", [svc](const httplib::Request&, httplib::Response& res) {
    const auto body = svc->healthz();
    reply(res, body.at("status") == "ok" ? 200 : 503, body);
  });
  server.Post("/generate", [svc](const httplib::Request& req, httplib::Response& res) {
    route(res, [&] { return svc->handle_generate(json::parse(req.body)); });
  });
  server.Post("/grid", [svc](const httplib::Request& req, httplib::Response& res) {
    route(res, [&] { return svc->handle_grid(json::parse(req.body)); });
  });
  server.Post("/interpolate", [svc](const httplib::Request& req, httplib::Response& res) {
    route(res, [&] { return svc->interpolate(json::parse(req.body)); });
  });
  // The explorer is served from another origin during development.
  server.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::start() {
  thread_ = std::thread([this] { listen(); });
  impl_->server.wait_until_ready();
}

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace galip::serving
