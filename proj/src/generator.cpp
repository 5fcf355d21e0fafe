#include "galip/generator.hpp"

#include <algorithm>

#include "galip/errors.hpp"

namespace galip {

namespace F = torch::nn::functional;

namespace {

constexpr double kLeakySlope = 0.2;

torch::Tensor leaky(const torch::Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(kLeakySlope)); }

torch::nn::Conv2d conv3x3(int64_t in, int64_t out) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
}

torch::nn::Conv2d conv1x1(int64_t in, int64_t out) { return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)); }

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

double leaky_slope() { return kLeakySlope; }

// ---------------------------------------------------------------------------
// GeneratorConfig

GeneratorConfig GeneratorConfig::tiny() {
  GeneratorConfig c;
  c.noise_dim = 16;
  c.bridge_channels = 16;
  c.fusion_blocks = 2;
  c.generation_blocks = 4;
  c.prompt_first_layer = 1;
  c.prompt_last_layer = 3;
  c.prompts_per_layer = 8;
  c.base_channels = 64;
  c.min_channels = 16;
  return c;
}

int64_t GeneratorConfig::block_channels(int64_t index) const {
  return std::max(min_channels, base_channels >> index);
}

void GeneratorConfig::validate(const BackboneConfig& backbone) const {
  if (noise_dim < 1 || bridge_channels < 1 || base_channels < 1 || min_channels < 1)
    throw InvalidArgument("generator channel counts must be positive");
  if (fusion_blocks < 1) throw InvalidArgument("generator needs at least one fusion block");
  const auto ratio = backbone.image_size / backbone.grid();
  if (!is_power_of_two(ratio)) throw InvalidArgument("image_size / grid must be a power of two");
  int64_t doublings = 0;
  while ((int64_t{1} << doublings) < ratio) ++doublings;
  if (generation_blocks < 1 + doublings)
    throw InvalidArgument("generation_blocks must be >= " + std::to_string(1 + doublings) + " for this resolution");
  if (enable_prompt_predictor && enable_clip_generator) {
    if (prompts_per_layer < 1) throw InvalidArgument("prompts_per_layer must be >= 1");
    if (prompt_first_layer < 1 || prompt_last_layer < prompt_first_layer || prompt_last_layer > backbone.depth)
      throw InvalidArgument("prompt layer range must lie within [1, depth]");
  }
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"noise_dim", c.noise_dim},
       {"bridge_channels", c.bridge_channels},
       {"fusion_blocks", c.fusion_blocks},
       {"generation_blocks", c.generation_blocks},
       {"prompt_first_layer", c.prompt_first_layer},
       {"prompt_last_layer", c.prompt_last_layer},
       {"prompts_per_layer", c.prompts_per_layer},
       {"base_channels", c.base_channels},
       {"min_channels", c.min_channels},
       {"enable_prompt_predictor", c.enable_prompt_predictor},
       {"enable_bridge_path", c.enable_bridge_path},
       {"enable_clip_generator", c.enable_clip_generator}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c = GeneratorConfig{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("noise_dim", c.noise_dim);
  get("bridge_channels", c.bridge_channels);
  get("fusion_blocks", c.fusion_blocks);
  get("generation_blocks", c.generation_blocks);
  get("prompt_first_layer", c.prompt_first_layer);
  get("prompt_last_layer", c.prompt_last_layer);
  get("prompts_per_layer", c.prompts_per_layer);
  get("base_channels", c.base_channels);
  get("min_channels", c.min_channels);
  get("enable_prompt_predictor", c.enable_prompt_predictor);
  get("enable_bridge_path", c.enable_bridge_path);
  get("enable_clip_generator", c.enable_clip_generator);
}

torch::Tensor make_condition(const torch::Tensor& text, const torch::Tensor& noise) {
  if (text.dim() != 2 || noise.dim() != 2 || text.size(0) != noise.size(0))
    throw InvalidArgument("condition: text and noise must be (B, *) with equal B");
  return torch::cat({text, noise}, 1);
}

void orthogonal_init(torch::Tensor& weight, at::Generator& gen) {
  torch::NoGradGuard no_grad;
  const auto rows = weight.size(0);
  const auto cols = weight.numel() / rows;
  auto flat = torch::randn({rows, cols}, gen, torch::TensorOptions().dtype(torch::kDouble));
  const bool wide = rows < cols;
  if (wide) flat = flat.t();
  auto [q, r] = torch::linalg_qr(flat);
  q = q * torch::sign(torch::diagonal(r)).unsqueeze(0);
  if (wide) q = q.t();
  weight.copy_(q.reshape(weight.sizes()).to(weight.scalar_type()));
}

// ---------------------------------------------------------------------------
// Blocks

AffineImpl::AffineImpl(int64_t channels_, int64_t cond_dim) : channels(channels_) {
  gamma_fc1 = register_module("gamma_fc1", torch::nn::Linear(cond_dim, channels));
  gamma_fc2 = register_module("gamma_fc2", torch::nn::Linear(channels, channels));
  beta_fc1 = register_module("beta_fc1", torch::nn::Linear(cond_dim, channels));
  beta_fc2 = register_module("beta_fc2", torch::nn::Linear(channels, channels));
}

torch::Tensor AffineImpl::gamma(const torch::Tensor& cond) { return gamma_fc2(torch::relu(gamma_fc1(cond))); }
torch::Tensor AffineImpl::beta(const torch::Tensor& cond) { return beta_fc2(torch::relu(beta_fc1(cond))); }

torch::Tensor AffineImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
  if (x.dim() != 4 || x.size(1) != channels)
    throw InvalidArgument("affine modulation expects " + std::to_string(channels) + " channels, got " +
                          (x.dim() == 4 ? std::to_string(x.size(1)) : "a non-4D tensor"));
  auto g = gamma(cond).view({cond.size(0), channels, 1, 1});
  auto b = beta(cond).view({cond.size(0), channels, 1, 1});
  return x * (1.0 + g) + b;
}

DFBlockImpl::DFBlockImpl(int64_t in_channels, int64_t out_channels, int64_t cond_dim) {
  affine0 = register_module("affine0", Affine(in_channels, cond_dim));
  affine1 = register_module("affine1", Affine(in_channels, cond_dim));
  conv = register_module("conv", conv3x3(in_channels, out_channels));
}

torch::Tensor DFBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
  auto h = leaky(affine0(x, cond));
  h = leaky(affine1(h, cond));
  return conv(h);
}

FusionBlockImpl::FusionBlockImpl(int64_t channels, int64_t cond_dim) {
  conv1 = register_module("conv1", conv3x3(channels, channels));
  fuse1 = register_module("fuse1", DFBlock(channels, channels, cond_dim));
  conv2 = register_module("conv2", conv3x3(channels, channels));
  fuse2 = register_module("fuse2", DFBlock(channels, channels, cond_dim));
}

torch::Tensor FusionBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
  auto h = fuse1(conv1(x), cond);
  h = fuse2(conv2(h), cond);
  return x + h;
}

GenBlockImpl::GenBlockImpl(int64_t in_channels, int64_t out_channels, int64_t cond_dim, bool upsample_)
    : upsample(upsample_) {
  conv = register_module("conv", conv3x3(in_channels, out_channels));
  fuse1 = register_module("fuse1", DFBlock(out_channels, out_channels, cond_dim));
  fuse2 = register_module("fuse2", DFBlock(out_channels, out_channels, cond_dim));
  if (in_channels != out_channels) shortcut = register_module("shortcut", conv1x1(in_channels, out_channels));
}

torch::Tensor GenBlockImpl::forward(const torch::Tensor& input, const torch::Tensor& cond) {
  auto x = input;
  if (upsample)
    x = F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  auto h = fuse2(fuse1(conv(x), cond), cond);
  return (shortcut ? shortcut(x) : x) + h;
}

// ---------------------------------------------------------------------------
// MateGenerator

MateGeneratorImpl::MateGeneratorImpl(const GeneratorConfig& config, const BackboneConfig& backbone, uint64_t seed)
    : config_(config), backbone_(backbone) {
  config_.validate(backbone_);
  const auto g = backbone_.grid();
  const auto cond = cond_dim();

  if (config_.enable_bridge_path) {
    bridge_fc = register_module("bridge_fc", torch::nn::Linear(config_.noise_dim, config_.bridge_channels * g * g));
    fusion = register_module("fusion", torch::nn::ModuleList());
    for (int64_t i = 0; i < config_.fusion_blocks; ++i) {
      fusion_blocks_.emplace_back(config_.bridge_channels, cond);
      fusion->push_back(fusion_blocks_.back());
    }
  } else {
    bridge_const = register_parameter("bridge_const", torch::zeros({1, config_.bridge_channels, g, g}));
  }

  if (config_.enable_clip_generator) {
    if (config_.enable_prompt_predictor) {
      const auto out = config_.prompt_layers() * config_.prompts_per_layer * backbone_.width;
      prompt_fc = register_module("prompt_fc", torch::nn::Linear(cond, out));
    }
    token_proj = register_module("token_proj", conv1x1(config_.bridge_channels, backbone_.width));
    concept_proj = register_module("concept_proj", conv1x1(backbone_.width, config_.bridge_channels));
  }

  blocks = register_module("blocks", torch::nn::ModuleList());
  int64_t in_ch = config_.bridge_channels;
  int64_t res = g;
  for (int64_t i = 0; i < config_.generation_blocks; ++i) {
    const bool up = i > 0 && res < backbone_.image_size;
    if (up) res *= 2;
    const auto out_ch = config_.block_channels(i);
    gen_blocks_.emplace_back(in_ch, out_ch, cond, up);
    blocks->push_back(gen_blocks_.back());
    in_ch = out_ch;
  }
  to_rgb = register_module("to_rgb", conv3x3(in_ch, 3));

  initialize(seed);
}

void MateGeneratorImpl::initialize(uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto& item : named_parameters()) {
    const auto& name = item.key();
    auto& p = item.value();
    const bool modulation_out = name.find("_fc2.") != std::string::npos;
    if (p.dim() < 2 || modulation_out || name == "bridge_const") {
      p.zero_();
    } else {
      orthogonal_init(p, gen);
    }
  }
}

torch::Tensor MateGeneratorImpl::predict_bridge(const torch::Tensor& noise, const torch::Tensor& text) {
  ++counts_[0];
  const auto B = noise.size(0);
  const auto g = backbone_.grid();
  if (!config_.enable_bridge_path) return bridge_const.expand({B, config_.bridge_channels, g, g});
  if (noise.dim() != 2 || noise.size(1) != config_.noise_dim)
    throw InvalidArgument("noise must be (B, " + std::to_string(config_.noise_dim) + ")");
  auto cond = make_condition(text, noise);
  auto x = bridge_fc(noise).view({B, config_.bridge_channels, g, g});
  for (auto& block : fusion_blocks_) x = block(x, cond);
  return x;
}

PromptStack MateGeneratorImpl::predict_prompts(const torch::Tensor& noise, const torch::Tensor& text) {
  ++counts_[1];
  PromptStack stack;
  stack.first_layer = config_.prompt_first_layer;
  if (!prompt_fc) return stack;
  auto cond = make_condition(text, noise);
  stack.tokens = prompt_fc(cond).view(
      {noise.size(0), config_.prompt_layers(), config_.prompts_per_layer, backbone_.width});
  return stack;
}

torch::Tensor MateGeneratorImpl::project_to_tokens(const torch::Tensor& bridge) {
  ++counts_[2];
  if (!token_proj) throw InvalidArgument("project_to_tokens: CLIP path disabled in this generator");
  auto t = token_proj(bridge);                // (B, width, g, g)
  return t.flatten(2).transpose(1, 2);        // (B, g*g, width)
}

torch::Tensor MateGeneratorImpl::synthesize_image(const torch::Tensor& concepts, const torch::Tensor& bridge,
                                                  const torch::Tensor& cond) {
  ++counts_[4];
  const auto g = backbone_.grid();
  if (bridge.dim() != 4 || bridge.size(1) != config_.bridge_channels || bridge.size(2) != g || bridge.size(3) != g)
    throw InvalidArgument("synthesize_image: bridge must be (B, " + std::to_string(config_.bridge_channels) + ", " +
                          std::to_string(g) + ", " + std::to_string(g) + ")");
  auto x = bridge;
  if (concepts.defined()) {
    if (!concept_proj) throw InvalidArgument("synthesize_image: CLIP path disabled in this generator");
    if (concepts.dim() != 4 || concepts.size(1) != backbone_.width || concepts.size(2) != g ||
        concepts.size(0) != bridge.size(0))
      throw InvalidArgument("synthesize_image: visual concepts shape mismatch");
    x = concept_proj(concepts) + bridge;
  }
  for (auto& block : gen_blocks_) x = block(x, cond);
  return torch::tanh(to_rgb(leaky(x)));
}

torch::Tensor MateGeneratorImpl::generate(const torch::Tensor& noise, const torch::Tensor& text,
                                          const Backbone& backbone) {
  auto cond = make_condition(text, noise);
  auto bridge = predict_bridge(noise, text);
  auto prompts = predict_prompts(noise, text);
  torch::Tensor concepts;
  if (config_.enable_clip_generator) {
    auto tokens = project_to_tokens(bridge);
    ++counts_[3];
    concepts = backbone.forward_prompted(tokens, prompts);
  }
  return synthesize_image(concepts, bridge, cond);
}

StageCounts MateGeneratorImpl::stage_counts() const {
  return {counts_[0].load(), counts_[1].load(), counts_[2].load(), counts_[3].load(), counts_[4].load()};
}

void MateGeneratorImpl::reset_stage_counts() {
  for (auto& c : counts_) c.store(0);
}

}  // namespace galip
