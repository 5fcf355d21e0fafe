#include "galip/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "galip/errors.hpp"
#include "galip/objectives.hpp"

namespace galip::eval {

FeatureStats feature_stats(const torch::Tensor& features) {
  if (features.dim() != 2) throw InvalidArgument("feature_stats: features must be (N, D)");
  const auto n = features.size(0);
  if (n < 2) throw InvalidArgument("feature_stats: need at least 2 samples, got " + std::to_string(n));
  auto f = features.detach().to(torch::kDouble).contiguous();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(f.data_ptr<double>(), n,
                                                                                              f.size(1));
  FeatureStats stats;
  stats.count = n;
  stats.mean = m.colwise().mean().transpose();
  const Eigen::MatrixXd centered = m.rowwise() - stats.mean.transpose();
  stats.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  stats.cov = (0.5 * (stats.cov + stats.cov.transpose())).eval();
  return stats;
}

FeatureStats feature_stats(const torch::Tensor& images, const Extractor& extractor, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> chunks;
  for (int64_t i = 0; i < images.size(0); i += batch_size)
    chunks.push_back(extractor(images.slice(0, i, std::min(i + batch_size, images.size(0)))).flatten(1));
  return feature_stats(torch::cat(chunks, 0));
}

double frechet_distance_unclamped(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows())
    throw InvalidArgument("frechet_distance: dimension mismatch (" + std::to_string(a.mean.size()) + " vs " +
                          std::to_string(b.mean.size()) + ")");
  const Eigen::MatrixXd sa = 0.5 * (a.cov + a.cov.transpose());
  const Eigen::MatrixXd sb = 0.5 * (b.cov + b.cov.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig_a(sa);
  const Eigen::VectorXd root_vals = eig_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = eig_a.eigenvectors() * root_vals.asDiagonal() * eig_a.eigenvectors().transpose();

  Eigen::MatrixXd inner = sqrt_a * sb * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig_inner(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = eig_inner.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  return (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  return std::max(0.0, frechet_distance_unclamped(a, b));
}

Extractor clip_feature_extractor(const Backbone& backbone) {
  return [&backbone](const torch::Tensor& images) {
    return backbone.encode_image(Backbone::normalize(images.to(backbone.dtype())));
  };
}

double clipsim_score(const torch::Tensor& images, const torch::Tensor& texts, const Backbone& backbone) {
  if (images.size(0) != texts.size(0))
    throw InvalidArgument("clipsim_score: " + std::to_string(images.size(0)) + " images vs " +
                          std::to_string(texts.size(0)) + " texts");
  torch::NoGradGuard no_grad;
  auto emb = backbone.encode_image(Backbone::normalize(images.to(backbone.dtype())));
  return mean_cosine(emb.to(torch::kDouble), texts.to(torch::kDouble)).item<double>();
}

nlohmann::json MetricReport::to_json() const {
  return {{"metrics", values},
          {"metadata",
           {{"checkpoint_step", checkpoint_step},
            {"split", split},
            {"extractor", extractor_id},
            {"checkpoint", checkpoint_id}}}};
}

void MetricReport::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out << to_json().dump(2) << "\n";
}

}  // namespace galip::eval
