#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "galip/backbone.hpp"

namespace galip {

struct GeneratorConfig {
  int64_t noise_dim = 100;
  int64_t bridge_channels = 64;
  int64_t fusion_blocks = 4;      // F-BLKs in the bridge predictor
  int64_t generation_blocks = 6;  // G-BLKs in the image generator
  int64_t prompt_first_layer = 1;
  int64_t prompt_last_layer = 9;
  int64_t prompts_per_layer = 8;
  int64_t base_channels = 512;
  int64_t min_channels = 32;
  bool enable_prompt_predictor = true;
  bool enable_bridge_path = true;
  // Off: images are synthesized from the bridge alone, without the backbone.
  bool enable_clip_generator = true;

  static GeneratorConfig tiny();

  int64_t prompt_layers() const { return prompt_last_layer - prompt_first_layer + 1; }
  // Output channels of G-BLK `index` (0-based): halves from base to min.
  int64_t block_channels(int64_t index) const;
  void validate(const BackboneConfig& backbone) const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

// Text embedding first, then noise.
torch::Tensor make_condition(const torch::Tensor& text, const torch::Tensor& noise);

double leaky_slope();

// Orthogonal initialisation from an explicit stream.
void orthogonal_init(torch::Tensor& weight, at::Generator& gen);

// Channel-wise x * (1 + gamma(c)) + beta(c); gamma and beta are two-layer
// perceptrons over the condition vector.
struct AffineImpl : torch::nn::Module {
  AffineImpl(int64_t channels, int64_t cond_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);
  torch::Tensor gamma(const torch::Tensor& cond);
  torch::Tensor beta(const torch::Tensor& cond);

  int64_t channels;
  torch::nn::Linear gamma_fc1{nullptr}, gamma_fc2{nullptr};
  torch::nn::Linear beta_fc1{nullptr}, beta_fc2{nullptr};
};
TORCH_MODULE(Affine);

// modulate -> leaky -> modulate -> leaky -> 3x3 conv
struct DFBlockImpl : torch::nn::Module {
  DFBlockImpl(int64_t in_channels, int64_t out_channels, int64_t cond_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);

  Affine affine0{nullptr}, affine1{nullptr};
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(DFBlock);

// conv -> DFBlock -> conv -> DFBlock, plus the block input.
struct FusionBlockImpl : torch::nn::Module {
  FusionBlockImpl(int64_t channels, int64_t cond_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  DFBlock fuse1{nullptr}, fuse2{nullptr};
};
TORCH_MODULE(FusionBlock);

// [2x nearest upsample] -> conv -> DFBlock -> DFBlock, plus a (projected)
// shortcut of the block input.
struct GenBlockImpl : torch::nn::Module {
  GenBlockImpl(int64_t in_channels, int64_t out_channels, int64_t cond_dim, bool upsample);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);

  bool upsample;
  torch::nn::Conv2d conv{nullptr};
  DFBlock fuse1{nullptr}, fuse2{nullptr};
  torch::nn::Conv2d shortcut{nullptr};  // null when channels match
};
TORCH_MODULE(GenBlock);

// Invocation counts of the five generation stages, for the single-pass check.
struct StageCounts {
  int64_t predict_bridge = 0;
  int64_t predict_prompts = 0;
  int64_t project_to_tokens = 0;
  int64_t forward_prompted = 0;
  int64_t synthesize_image = 0;
};

// The learnable generator half mated to the frozen backbone.
class MateGeneratorImpl : public torch::nn::Module {
 public:
  MateGeneratorImpl(const GeneratorConfig& config, const BackboneConfig& backbone, uint64_t seed = 0);

  const GeneratorConfig& config() const { return config_; }
  const BackboneConfig& backbone_config() const { return backbone_; }
  int64_t cond_dim() const { return backbone_.text_embed_dim + config_.noise_dim; }

  // (B, noise_dim), (B, text_embed_dim) -> (B, bridge_channels, g, g)
  torch::Tensor predict_bridge(const torch::Tensor& noise, const torch::Tensor& text);
  // -> (B, prompt_layers, prompts_per_layer, width); empty when disabled.
  PromptStack predict_prompts(const torch::Tensor& noise, const torch::Tensor& text);
  // (B, bridge, g, g) -> (B, g*g, width), row-major positions.
  torch::Tensor project_to_tokens(const torch::Tensor& bridge);
  // concepts (B, width, g, g) or undefined when the CLIP path is disabled.
  torch::Tensor synthesize_image(const torch::Tensor& concepts, const torch::Tensor& bridge,
                                 const torch::Tensor& cond);
  // Single pass: one call to each stage.
  torch::Tensor generate(const torch::Tensor& noise, const torch::Tensor& text, const Backbone& backbone);

  StageCounts stage_counts() const;
  void reset_stage_counts();

  // Submodule handles, exposed for inspection and tests.
  torch::nn::Linear bridge_fc{nullptr};
  torch::nn::ModuleList fusion{nullptr};
  torch::Tensor bridge_const;  // learned bridge when the bridge path is off
  torch::nn::Linear prompt_fc{nullptr};
  torch::nn::Conv2d token_proj{nullptr};
  torch::nn::Conv2d concept_proj{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::Conv2d to_rgb{nullptr};

 private:
  void initialize(uint64_t seed);

  GeneratorConfig config_;
  BackboneConfig backbone_;
  std::vector<FusionBlock> fusion_blocks_;
  std::vector<GenBlock> gen_blocks_;
  std::array<std::atomic<int64_t>, 5> counts_{};
};
TORCH_MODULE(MateGenerator);

}  // namespace galip
