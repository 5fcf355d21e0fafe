#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "galip/tokenizer.hpp"

namespace galip {

// Shape constants of the frozen image/text encoder pair.
struct BackboneConfig {
  int64_t image_size = 224;
  int64_t patch_size = 32;
  int64_t depth = 12;
  int64_t width = 768;
  int64_t heads = 12;
  int64_t text_embed_dim = 512;
  int64_t text_width = 512;
  int64_t text_depth = 12;
  int64_t text_heads = 8;
  int64_t vocab_size = 49408;
  int64_t context_length = 77;
  // Whether the image path's final layer norm is applied to the patch tokens
  // returned by forward_prompted.
  bool norm_visual_concepts = true;

  int64_t grid() const { return image_size / patch_size; }
  int64_t tokens() const { return grid() * grid(); }
  void validate() const;

  static BackboneConfig vit_b32() { return {}; }
  static BackboneConfig tiny();
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

// Intermediate backbone features, class token removed, one (B, width, g, g)
// tensor per collected layer. Layer indices are 1-based block outputs.
struct FeaturePyramid {
  std::vector<int64_t> layers;
  std::vector<torch::Tensor> levels;
  int64_t source_resolution = 0;

  size_t size() const { return levels.size(); }
  FeaturePyramid detached() const;
};

// Per-layer prompt tokens: (B, layer_count, prompts_per_layer, width) applied
// to layers [first_layer, first_layer + layer_count). An undefined or
// zero-layer tensor means no prompting.
struct PromptStack {
  torch::Tensor tokens;
  int64_t first_layer = 1;

  int64_t layer_count() const { return tokens.defined() ? tokens.size(1) : 0; }
  bool empty() const { return layer_count() == 0; }
  int64_t last_layer() const { return first_layer + layer_count() - 1; }
};

namespace detail {

struct AttentionImpl : torch::nn::Module {
  AttentionImpl(int64_t width, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask = {});

  int64_t heads;
  torch::Tensor in_proj_weight;
  torch::Tensor in_proj_bias;
  torch::nn::Linear out_proj{nullptr};
};
TORCH_MODULE(Attention);

struct MlpImpl : torch::nn::Module {
  explicit MlpImpl(int64_t width);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear c_fc{nullptr};
  torch::nn::Linear c_proj{nullptr};
};
TORCH_MODULE(Mlp);

struct ResidualBlockImpl : torch::nn::Module {
  ResidualBlockImpl(int64_t width, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask = {});

  torch::nn::LayerNorm ln_1{nullptr};
  Attention attn{nullptr};
  torch::nn::LayerNorm ln_2{nullptr};
  Mlp mlp{nullptr};
};
TORCH_MODULE(ResidualBlock);

struct TransformerImpl : torch::nn::Module {
  TransformerImpl(int64_t width, int64_t depth, int64_t heads);

  std::vector<ResidualBlock> blocks;  // same modules as `resblocks`, typed
  torch::nn::ModuleList resblocks;
};
TORCH_MODULE(Transformer);

struct VisionTowerImpl : torch::nn::Module {
  explicit VisionTowerImpl(const BackboneConfig& c);

  torch::nn::Conv2d conv1{nullptr};
  torch::Tensor class_embedding;
  torch::Tensor positional_embedding;
  torch::nn::LayerNorm ln_pre{nullptr};
  Transformer transformer{nullptr};
  torch::nn::LayerNorm ln_post{nullptr};
  torch::Tensor proj;
};
TORCH_MODULE(VisionTower);

// Parameter names follow the public CLIP state-dict layout.
struct ClipModelImpl : torch::nn::Module {
  explicit ClipModelImpl(const BackboneConfig& c);

  VisionTower visual{nullptr};
  torch::nn::Embedding token_embedding{nullptr};
  torch::Tensor positional_embedding;
  Transformer transformer{nullptr};
  torch::nn::LayerNorm ln_final{nullptr};
  torch::Tensor text_projection;
};
TORCH_MODULE(ClipModel);

}  // namespace detail

// Frozen image/text encoder pair. Every parameter has requires_grad == false;
// gradients still flow through to inputs. Forward passes are const and may
// run concurrently on one instance.
class Backbone {
 public:
  Backbone(BackboneConfig config, detail::ClipModel model, std::string source_id);

  const BackboneConfig& config() const { return config_; }
  const std::string& source_id() const { return source_id_; }

  // (B, context_length) ids + (B,) valid lengths -> (B, text_embed_dim).
  torch::Tensor encode_text(const torch::Tensor& ids, const torch::Tensor& valid_lengths) const;
  torch::Tensor encode_text(const TokenIds& tokens) const;

  // (B, 3, S, S) in the backbone colour space -> (B, text_embed_dim).
  torch::Tensor encode_image(const torch::Tensor& images) const;

  // Post-block token grids at the requested 1-based layers.
  FeaturePyramid forward_collect(const torch::Tensor& images, const std::vector<int64_t>& layer_ids) const;

  // Runs (B, grid^2, width) tokens through the transformer with deep
  // prompting; returns (B, width, grid, grid) patch outputs.
  torch::Tensor forward_prompted(const torch::Tensor& tokens, const PromptStack& prompts) const;

  // Maps generator-range images in [-1, 1] to the backbone colour space.
  static torch::Tensor normalize(const torch::Tensor& images);

  std::vector<std::pair<std::string, torch::Tensor>> named_parameters() const;
  int64_t parameter_count() const;
  void to(torch::ScalarType dtype);
  torch::ScalarType dtype() const;

 private:
  torch::Tensor embed_patches(const torch::Tensor& images) const;
  torch::Tensor add_class_and_position(const torch::Tensor& patch_tokens) const;

  BackboneConfig config_;
  detail::ClipModel model_;
  std::string source_id_;
};

// `source` is either a safetensors file or "random" / "tiny-random" for a
// seeded random initialisation of `config`.
Backbone load_backbone(const std::string& source, const BackboneConfig& config, uint64_t seed = 7);

// Writes the backbone's parameters as a safetensors file (used to produce
// fixtures and by the weight converter round-trip).
void save_backbone(const Backbone& backbone, const std::filesystem::path& path);

}  // namespace galip
