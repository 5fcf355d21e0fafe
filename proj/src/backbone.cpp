#include "galip/backbone.hpp"

#include <cmath>
#include <sstream>

#include "galip/errors.hpp"
#include "galip/safetensors.hpp"

namespace galip {

namespace {

std::string shape_str(c10::IntArrayRef s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

torch::Tensor quick_gelu(const torch::Tensor& x) { return x * torch::sigmoid(1.702 * x); }

}  // namespace

// ---------------------------------------------------------------------------
// BackboneConfig

BackboneConfig BackboneConfig::tiny() {
  BackboneConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.depth = 4;
  c.width = 32;
  c.heads = 4;
  c.text_embed_dim = 32;
  c.text_width = 32;
  c.text_depth = 2;
  c.text_heads = 4;
  c.vocab_size = 512;
  c.context_length = 16;
  return c;
}

void BackboneConfig::validate() const {
  if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0)
    throw InvalidArgument("image_size must be a positive multiple of patch_size");
  if (depth < 1) throw InvalidArgument("depth must be >= 1");
  if (width <= 0 || heads <= 0 || width % heads != 0) throw InvalidArgument("width must be divisible by heads");
  if (text_width <= 0 || text_heads <= 0 || text_width % text_heads != 0)
    throw InvalidArgument("text_width must be divisible by text_heads");
  if (text_depth < 1 || text_embed_dim < 1) throw InvalidArgument("text tower must be non-empty");
  if (vocab_size < 4 || context_length < 2) throw InvalidArgument("vocab_size/context_length too small");
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"image_size", c.image_size},         {"patch_size", c.patch_size},
       {"depth", c.depth},                   {"width", c.width},
       {"heads", c.heads},                   {"text_embed_dim", c.text_embed_dim},
       {"text_width", c.text_width},         {"text_depth", c.text_depth},
       {"text_heads", c.text_heads},         {"vocab_size", c.vocab_size},
       {"context_length", c.context_length}, {"norm_visual_concepts", c.norm_visual_concepts}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c = BackboneConfig{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("image_size", c.image_size);
  get("patch_size", c.patch_size);
  get("depth", c.depth);
  get("width", c.width);
  get("heads", c.heads);
  get("text_embed_dim", c.text_embed_dim);
  get("text_width", c.text_width);
  get("text_depth", c.text_depth);
  get("text_heads", c.text_heads);
  get("vocab_size", c.vocab_size);
  get("context_length", c.context_length);
  get("norm_visual_concepts", c.norm_visual_concepts);
}

FeaturePyramid FeaturePyramid::detached() const {
  FeaturePyramid out{layers, {}, source_resolution};
  for (const auto& l : levels) out.levels.push_back(l.detach());
  return out;
}

// ---------------------------------------------------------------------------
// Modules

namespace detail {

AttentionImpl::AttentionImpl(int64_t width, int64_t heads_) : heads(heads_) {
  in_proj_weight = register_parameter("in_proj_weight", torch::empty({3 * width, width}));
  in_proj_bias = register_parameter("in_proj_bias", torch::zeros({3 * width}));
  out_proj = register_module("out_proj", torch::nn::Linear(width, width));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& mask) {
  const auto B = x.size(0);
  const auto L = x.size(1);
  const auto W = x.size(2);
  const auto head_dim = W / heads;
  auto qkv = torch::linear(x, in_proj_weight, in_proj_bias).view({B, L, 3, heads, head_dim});
  qkv = qkv.permute({2, 0, 3, 1, 4});  // (3, B, H, L, hd)
  auto q = qkv[0];
  auto k = qkv[1];
  auto v = qkv[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  if (mask.defined()) scores = scores + mask;
  auto out = torch::matmul(torch::softmax(scores, -1), v);  // (B, H, L, hd)
  out = out.transpose(1, 2).reshape({B, L, W});
  return out_proj(out);
}

MlpImpl::MlpImpl(int64_t width) {
  c_fc = register_module("c_fc", torch::nn::Linear(width, 4 * width));
  c_proj = register_module("c_proj", torch::nn::Linear(4 * width, width));
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) { return c_proj(quick_gelu(c_fc(x))); }

ResidualBlockImpl::ResidualBlockImpl(int64_t width, int64_t heads) {
  ln_1 = register_module("ln_1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  attn = register_module("attn", Attention(width, heads));
  ln_2 = register_module("ln_2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  mlp = register_module("mlp", Mlp(width));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& mask) {
  auto h = x + attn(ln_1(x), mask);
  return h + mlp(ln_2(h));
}

TransformerImpl::TransformerImpl(int64_t width, int64_t depth, int64_t heads) {
  resblocks = register_module("resblocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < depth; ++i) {
    blocks.emplace_back(width, heads);
    resblocks->push_back(blocks.back());
  }
}

VisionTowerImpl::VisionTowerImpl(const BackboneConfig& c) {
  conv1 = register_module(
      "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, c.width, c.patch_size).stride(c.patch_size).bias(false)));
  class_embedding = register_parameter("class_embedding", torch::zeros({c.width}));
  positional_embedding = register_parameter("positional_embedding", torch::zeros({c.tokens() + 1, c.width}));
  ln_pre = register_module("ln_pre", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c.width})));
  transformer = register_module("transformer", Transformer(c.width, c.depth, c.heads));
  ln_post = register_module("ln_post", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c.width})));
  proj = register_parameter("proj", torch::zeros({c.width, c.text_embed_dim}));
}

ClipModelImpl::ClipModelImpl(const BackboneConfig& c) {
  visual = register_module("visual", VisionTower(c));
  token_embedding = register_module("token_embedding", torch::nn::Embedding(c.vocab_size, c.text_width));
  positional_embedding = register_parameter("positional_embedding", torch::zeros({c.context_length, c.text_width}));
  transformer = register_module("transformer", Transformer(c.text_width, c.text_depth, c.text_heads));
  ln_final = register_module("ln_final", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c.text_width})));
  text_projection = register_parameter("text_projection", torch::zeros({c.text_width, c.text_embed_dim}));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backbone

Backbone::Backbone(BackboneConfig config, detail::ClipModel model, std::string source_id)
    : config_(config), model_(std::move(model)), source_id_(std::move(source_id)) {
  config_.validate();
  for (auto& p : model_->parameters()) p.set_requires_grad(false);
  model_->eval();
}

torch::Tensor Backbone::normalize(const torch::Tensor& images) {
  static const double kMean[3] = {0.48145466, 0.4578275, 0.40821073};
  static const double kStd[3] = {0.26862954, 0.26130258, 0.27577711};
  auto opts = torch::TensorOptions().dtype(images.scalar_type());
  auto mean = torch::tensor({kMean[0], kMean[1], kMean[2]}, torch::kDouble).to(opts).view({1, 3, 1, 1});
  auto std = torch::tensor({kStd[0], kStd[1], kStd[2]}, torch::kDouble).to(opts).view({1, 3, 1, 1});
  return ((images + 1.0) * 0.5 - mean) / std;
}

torch::Tensor Backbone::encode_text(const torch::Tensor& ids, const torch::Tensor& valid_lengths) const {
  auto& m = *model_.ptr();
  if (ids.dim() != 2 || ids.size(1) != config_.context_length)
    throw InvalidArgument("encode_text: ids must be (B, context_length)");
  const auto L = config_.context_length;
  auto x = m.token_embedding(ids) + m.positional_embedding;
  auto mask = torch::full({L, L}, -std::numeric_limits<double>::infinity(), x.options()).triu(1);
  for (auto& block : m.transformer->blocks) x = block(x, mask);
  x = m.ln_final(x);
  auto eot = (valid_lengths.to(torch::kLong) - 1).clamp(0, L - 1);
  auto rows = torch::arange(ids.size(0), torch::kLong);
  return torch::matmul(x.index({rows, eot}), m.text_projection);
}

torch::Tensor Backbone::encode_text(const TokenIds& tokens) const {
  auto [ids, lengths] = stack_tokens({tokens});
  return encode_text(ids, lengths);
}

torch::Tensor Backbone::embed_patches(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config_.image_size ||
      images.size(3) != config_.image_size) {
    throw InvalidArgument("backbone expects (B, 3, " + std::to_string(config_.image_size) + ", " +
                          std::to_string(config_.image_size) + ") images, got " + shape_str(images.sizes()));
  }
  auto& m = *model_.ptr();
  auto x = m.visual->conv1(images);               // (B, W, g, g)
  return x.flatten(2).transpose(1, 2);            // (B, g*g, W), row-major
}

torch::Tensor Backbone::add_class_and_position(const torch::Tensor& patch_tokens) const {
  auto& m = *model_.ptr();
  const auto B = patch_tokens.size(0);
  auto cls = m.visual->class_embedding.view({1, 1, -1}).expand({B, 1, config_.width});
  auto x = torch::cat({cls, patch_tokens}, 1) + m.visual->positional_embedding;
  return m.visual->ln_pre(x);
}

torch::Tensor Backbone::encode_image(const torch::Tensor& images) const {
  auto& m = *model_.ptr();
  auto x = add_class_and_position(embed_patches(images));
  for (auto& block : m.visual->transformer->blocks) x = block(x);
  auto cls = m.visual->ln_post(x.select(1, 0));
  return torch::matmul(cls, m.visual->proj);
}

FeaturePyramid Backbone::forward_collect(const torch::Tensor& images, const std::vector<int64_t>& layer_ids) const {
  if (layer_ids.empty()) throw InvalidArgument("forward_collect: no layers requested");
  for (size_t i = 0; i < layer_ids.size(); ++i) {
    if (layer_ids[i] < 1 || layer_ids[i] > config_.depth)
      throw InvalidArgument("forward_collect: layer " + std::to_string(layer_ids[i]) + " outside [1, " +
                            std::to_string(config_.depth) + "]");
    if (i > 0 && layer_ids[i] <= layer_ids[i - 1])
      throw InvalidArgument("forward_collect: layer indices must be strictly increasing");
  }
  auto& m = *model_.ptr();
  const auto B = images.size(0);
  const auto g = config_.grid();
  FeaturePyramid out{layer_ids, {}, config_.image_size};
  auto x = add_class_and_position(embed_patches(images));
  size_t next = 0;
  for (int64_t layer = 1; next < layer_ids.size(); ++layer) {
    x = m.visual->transformer->blocks[static_cast<size_t>(layer - 1)](x);
    if (layer == layer_ids[next]) {
      auto patches = x.slice(1, 1);  // drop class token
      out.levels.push_back(patches.transpose(1, 2).reshape({B, config_.width, g, g}));
      ++next;
    }
  }
  return out;
}

torch::Tensor Backbone::forward_prompted(const torch::Tensor& tokens, const PromptStack& prompts) const {
  const auto g = config_.grid();
  if (tokens.dim() != 3 || tokens.size(1) != g * g || tokens.size(2) != config_.width)
    throw InvalidArgument("forward_prompted: tokens must be (B, " + std::to_string(g * g) + ", " +
                          std::to_string(config_.width) + "), got " + shape_str(tokens.sizes()));
  if (!prompts.empty()) {
    const auto& p = prompts.tokens;
    if (p.dim() != 4 || p.size(0) != tokens.size(0))
      throw InvalidArgument("forward_prompted: prompts must be (B, layers, count, width)");
    if (p.size(3) != config_.width)
      throw InvalidArgument("forward_prompted: prompt width " + std::to_string(p.size(3)) +
                            " != backbone width " + std::to_string(config_.width));
    if (prompts.first_layer < 1 || prompts.last_layer() > config_.depth)
      throw InvalidArgument("forward_prompted: prompted layers outside backbone depth");
  }
  auto& m = *model_.ptr();
  const auto B = tokens.size(0);
  const auto seq = g * g + 1;
  auto x = add_class_and_position(tokens);
  for (int64_t layer = 1; layer <= config_.depth; ++layer) {
    auto& block = m.visual->transformer->blocks[static_cast<size_t>(layer - 1)];
    const bool prompted = !prompts.empty() && layer >= prompts.first_layer && layer <= prompts.last_layer();
    if (prompted) {
      // Fresh prompt slots each layer; their outputs are discarded.
      auto slots = prompts.tokens.select(1, layer - prompts.first_layer);
      x = block(torch::cat({x, slots}, 1)).slice(1, 0, seq);
    } else {
      x = block(x);
    }
  }
  auto patches = x.slice(1, 1);
  if (config_.norm_visual_concepts) patches = m.visual->ln_post(patches);
  return patches.transpose(1, 2).reshape({B, config_.width, g, g});
}

std::vector<std::pair<std::string, torch::Tensor>> Backbone::named_parameters() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : model_->named_parameters()) out.emplace_back(item.key(), item.value());
  return out;
}

int64_t Backbone::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : model_->parameters()) n += p.numel();
  return n;
}

void Backbone::to(torch::ScalarType dtype) {
  model_->to(dtype);
  for (auto& p : model_->parameters()) p.set_requires_grad(false);
}

torch::ScalarType Backbone::dtype() const { return model_->parameters().front().scalar_type(); }

// ---------------------------------------------------------------------------
// Loading

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Initialisation scheme of the public CLIP code, driven by one seeded stream
// in parameter registration order.
void random_init(detail::ClipModel& model, const BackboneConfig& c, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto& item : model->named_parameters()) {
    const std::string& name = item.key();
    auto& p = item.value();
    const bool text = name.rfind("visual.", 0) != 0;
    const double width = static_cast<double>(text ? c.text_width : c.width);
    const double layers = static_cast<double>(text ? c.text_depth : c.depth);
    const double attn_std = std::pow(width, -0.5);
    const double proj_std = attn_std * std::pow(2.0 * layers, -0.5);
    const double fc_std = std::pow(2.0 * width, -0.5);

    if (name.find("ln_") != std::string::npos) {
      ends_with(name, "weight") ? p.fill_(1.0) : p.zero_();
    } else if (ends_with(name, "bias")) {
      p.zero_();
    } else if (ends_with(name, "in_proj_weight")) {
      p.normal_(0.0, attn_std, gen);
    } else if (ends_with(name, "out_proj.weight") || ends_with(name, "c_proj.weight")) {
      p.normal_(0.0, proj_std, gen);
    } else if (ends_with(name, "c_fc.weight")) {
      p.normal_(0.0, fc_std, gen);
    } else if (name == "token_embedding.weight") {
      p.normal_(0.0, 0.02, gen);
    } else if (name == "positional_embedding") {
      p.normal_(0.0, 0.01, gen);
    } else if (name == "visual.conv1.weight") {
      p.normal_(0.0, std::pow(3.0 * c.patch_size * c.patch_size, -0.5), gen);
    } else {
      // class/positional embeddings of the image tower and both projections
      p.normal_(0.0, attn_std, gen);
    }
  }
}

}  // namespace

Backbone load_backbone(const std::string& source, const BackboneConfig& config, uint64_t seed) {
  config.validate();
  detail::ClipModel model(config);
  if (source == "random" || source == "tiny-random") {
    random_init(model, config, seed);
    return Backbone(config, std::move(model), "random:" + std::to_string(seed));
  }

  const auto file = safetensors::load(source);
  torch::NoGradGuard no_grad;
  for (auto& item : model->named_parameters()) {
    const auto& name = item.key();
    auto& param = item.value();
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw MissingKey(name, "not present in " + source);
    if (it->second.sizes() != param.sizes())
      throw ShapeMismatch(name, "file has " + shape_str(it->second.sizes()) + ", config expects " +
                                    shape_str(param.sizes()));
    param.copy_(it->second.to(param.scalar_type()));
  }
  return Backbone(config, std::move(model), std::filesystem::path(source).filename().string());
}

void save_backbone(const Backbone& backbone, const std::filesystem::path& path) {
  safetensors::TensorFile file;
  for (const auto& [name, t] : backbone.named_parameters()) file.tensors.emplace(name, t);
  nlohmann::json cfg = backbone.config();
  file.metadata["backbone_config"] = cfg.dump();
  safetensors::save(path, file);
}

}  // namespace galip
