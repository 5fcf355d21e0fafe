#include "galip/discriminator.hpp"

#include <algorithm>

#include "galip/errors.hpp"
#include "galip/generator.hpp"

namespace galip {

namespace F = torch::nn::functional;

namespace {

torch::Tensor leaky(const torch::Tensor& x) {
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(leaky_slope()));
}

}  // namespace

DiscriminatorConfig DiscriminatorConfig::tiny() {
  DiscriminatorConfig c;
  c.collected_layers = {1, 2, 3};
  c.extraction_channels = 32;
  c.assessor_channels = 32;
  return c;
}

void DiscriminatorConfig::validate(const BackboneConfig& backbone) const {
  if (extraction_channels < 1 || assessor_channels < 1) throw InvalidArgument("discriminator channels must be positive");
  if (!enable_clip_discriminator) return;
  if (collected_layers.empty()) throw InvalidArgument("discriminator needs at least one collected layer");
  for (size_t i = 0; i < collected_layers.size(); ++i) {
    if (collected_layers[i] < 1 || collected_layers[i] > backbone.depth)
      throw InvalidArgument("collected layer " + std::to_string(collected_layers[i]) + " outside backbone depth");
    if (i > 0 && collected_layers[i] <= collected_layers[i - 1])
      throw InvalidArgument("collected layers must be strictly increasing");
  }
}

void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
  j = {{"collected_layers", c.collected_layers},
       {"extraction_channels", c.extraction_channels},
       {"assessor_channels", c.assessor_channels},
       {"enable_clip_discriminator", c.enable_clip_discriminator}};
}

void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  c = DiscriminatorConfig{};
  if (j.contains("collected_layers")) j.at("collected_layers").get_to(c.collected_layers);
  if (j.contains("extraction_channels")) j.at("extraction_channels").get_to(c.extraction_channels);
  if (j.contains("assessor_channels")) j.at("assessor_channels").get_to(c.assessor_channels);
  if (j.contains("enable_clip_discriminator")) j.at("enable_clip_discriminator").get_to(c.enable_clip_discriminator);
}

ExtractionBlockImpl::ExtractionBlockImpl(int64_t channels) {
  conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
  conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
}

torch::Tensor ExtractionBlockImpl::forward(const torch::Tensor& x) { return leaky(conv2(leaky(conv1(x)))); }

MateDiscriminatorImpl::MateDiscriminatorImpl(const DiscriminatorConfig& config, const BackboneConfig& backbone,
                                             uint64_t seed)
    : config_(config), backbone_(backbone) {
  config_.validate(backbone_);
  const auto C = config_.extraction_channels;
  const auto g = backbone_.grid();

  if (config_.enable_clip_discriminator) {
    level_proj = register_module("level_proj", torch::nn::ModuleList());
    for (size_t i = 0; i < config_.collected_layers.size(); ++i) {
      projections_.emplace_back(torch::nn::Conv2dOptions(backbone_.width, C, 1));
      level_proj->push_back(projections_.back());
    }
    extraction = register_module("extraction", torch::nn::ModuleList());
    for (int64_t b = 0; b < config_.extraction_blocks(); ++b) {
      blocks_.emplace_back(C);
      extraction->push_back(blocks_.back());
    }
    tail = register_module("tail", ExtractionBlock(C));
  } else {
    pixel_encoder = register_module("pixel_encoder", torch::nn::Sequential());
    int64_t res = backbone_.image_size;
    int64_t ch = 3;
    int64_t next = std::min<int64_t>(C, 32);
    while (res > g) {
      pixel_encoder->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, next, 4).stride(2).padding(1)));
      pixel_encoder->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(leaky_slope())));
      ch = next;
      next = std::min<int64_t>(C, next * 2);
      res /= 2;
    }
    pixel_encoder->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, C, 3).padding(1)));
  }

  joint_conv = register_module(
      "joint_conv",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(C + backbone_.text_embed_dim, config_.assessor_channels, 3).padding(1)));
  logit_conv = register_module("logit_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(config_.assessor_channels, 1, g)));

  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto& p : parameters()) {
    if (p.dim() < 2) {
      p.zero_();
    } else {
      orthogonal_init(p, gen);
    }
  }
}

FeaturePyramid MateDiscriminatorImpl::collect(const torch::Tensor& images, const Backbone& backbone) const {
  if (!config_.enable_clip_discriminator) return FeaturePyramid{{0}, {images}, backbone_.image_size};
  return backbone.forward_collect(Backbone::normalize(images), config_.collected_layers);
}

torch::Tensor MateDiscriminatorImpl::extract_features(const FeaturePyramid& pyramid) {
  if (!config_.enable_clip_discriminator) {
    if (pyramid.size() != 1) throw InvalidArgument("pixel discriminator expects a single image level");
    return pixel_encoder->forward(pyramid.levels[0]);
  }
  if (pyramid.size() != projections_.size())
    throw InvalidArgument("extract_features: pyramid has " + std::to_string(pyramid.size()) + " levels, expected " +
                          std::to_string(projections_.size()));
  auto h = projections_[0](pyramid.levels[0]);
  for (size_t b = 0; b < blocks_.size(); ++b) h = h + blocks_[b](h) + projections_[b + 1](pyramid.levels[b + 1]);
  return h + tail(h);
}

torch::Tensor MateDiscriminatorImpl::assess_quality(const torch::Tensor& feature, const torch::Tensor& text) {
  if (text.dim() != 2 || text.size(0) != feature.size(0) || text.size(1) != backbone_.text_embed_dim)
    throw InvalidArgument("assess_quality: text must be (B, text_embed_dim)");
  const auto g = feature.size(2);
  auto tiled = text.view({text.size(0), text.size(1), 1, 1}).expand({text.size(0), text.size(1), g, feature.size(3)});
  auto h = leaky(joint_conv(torch::cat({feature, tiled}, 1)));
  return logit_conv(h).view({feature.size(0)});
}

torch::Tensor MateDiscriminatorImpl::logits(const FeaturePyramid& pyramid, const torch::Tensor& text) {
  return assess_quality(extract_features(pyramid), text);
}

torch::Tensor MateDiscriminatorImpl::discriminate(const torch::Tensor& images, const torch::Tensor& text,
                                                  const Backbone& backbone) {
  return logits(collect(images, backbone), text);
}

}  // namespace galip
