#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "galip/backbone.hpp"

namespace galip::eval {

// Gaussian summary of a feature distribution.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased (n - 1) normalisation
  int64_t count = 0;
};

// Maps a (B, 3, S, S) image batch to (B, D) features.
using Extractor = std::function<torch::Tensor(const torch::Tensor&)>;

FeatureStats feature_stats(const torch::Tensor& features);
FeatureStats feature_stats(const torch::Tensor& images, const Extractor& extractor, int64_t batch_size = 64);

// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^1/2) without clamping. The
// trace term uses the symmetric form S_a^1/2 S_b S_a^1/2 and clamps negative
// eigenvalues at zero.
double frechet_distance_unclamped(const FeatureStats& a, const FeatureStats& b);
// max(unclamped, 0)
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

// Backbone image-encoding head on generator-range images; the default
// extractor of the Fréchet distance (a CLIP-feature distance).
Extractor clip_feature_extractor(const Backbone& backbone);

// Mean cosine between encode_image(images) and `texts` (B, text_embed_dim),
// computed without gradient tracking.
double clipsim_score(const torch::Tensor& images, const torch::Tensor& texts, const Backbone& backbone);

struct MetricReport {
  std::map<std::string, double> values;
  int64_t checkpoint_step = 0;
  std::string split;
  std::string extractor_id;
  std::string checkpoint_id;

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace galip::eval
