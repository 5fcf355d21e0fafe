#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "galip/backbone.hpp"

namespace galip {

struct DiscriminatorConfig {
  std::vector<int64_t> collected_layers{2, 5, 9};
  int64_t extraction_channels = 512;
  int64_t assessor_channels = 128;
  // Off: a pixel-space convolutional encoder replaces the backbone features
  // (the pyramid then holds the image itself as its single level).
  bool enable_clip_discriminator = true;

  static DiscriminatorConfig tiny();
  int64_t extraction_blocks() const { return static_cast<int64_t>(collected_layers.size()) - 1; }
  void validate(const BackboneConfig& backbone) const;
};

void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);

// conv -> leaky -> conv -> leaky
struct ExtractionBlockImpl : torch::nn::Module {
  explicit ExtractionBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ExtractionBlock);

// The learnable discriminator half: CLIP-FE followed by the quality assessor.
// One conditional logit per sample; real/fake/mismatch roles live in the loss.
class MateDiscriminatorImpl : public torch::nn::Module {
 public:
  MateDiscriminatorImpl(const DiscriminatorConfig& config, const BackboneConfig& backbone, uint64_t seed = 0);

  const DiscriminatorConfig& config() const { return config_; }

  // Collected pyramid of generator-range images ([-1, 1]).
  FeaturePyramid collect(const torch::Tensor& images, const Backbone& backbone) const;

  // Pyramid -> (B, extraction_channels, g, g)
  torch::Tensor extract_features(const FeaturePyramid& pyramid);
  // Feature + text -> (B,) logits
  torch::Tensor assess_quality(const torch::Tensor& feature, const torch::Tensor& text);
  torch::Tensor logits(const FeaturePyramid& pyramid, const torch::Tensor& text);
  // collect -> extract_features -> assess_quality
  torch::Tensor discriminate(const torch::Tensor& images, const torch::Tensor& text, const Backbone& backbone);

  torch::nn::ModuleList level_proj{nullptr};
  torch::nn::ModuleList extraction{nullptr};
  ExtractionBlock tail{nullptr};
  torch::nn::Sequential pixel_encoder{nullptr};
  torch::nn::Conv2d joint_conv{nullptr};
  torch::nn::Conv2d logit_conv{nullptr};

 private:
  DiscriminatorConfig config_;
  BackboneConfig backbone_;
  std::vector<torch::nn::Conv2d> projections_;
  std::vector<ExtractionBlock> blocks_;
};
TORCH_MODULE(MateDiscriminator);

}  // namespace galip
