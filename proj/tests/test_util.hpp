#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <torch/torch.h>
#include <unistd.h>

#include "galip/backbone.hpp"

namespace testutil {

inline const galip::Backbone& tiny_backbone() {
  static const galip::Backbone b = galip::load_backbone("tiny-random", galip::BackboneConfig::tiny(), 7);
  return b;
}

inline const galip::Backbone& tiny_backbone_double() {
  static const galip::Backbone b = [] {
    auto x = galip::load_backbone("tiny-random", galip::BackboneConfig::tiny(), 7);
    x.to(torch::kDouble);
    return x;
  }();
  return b;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("galip_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline torch::Generator gen(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

inline torch::Tensor randn(at::IntArrayRef shape, uint64_t seed, torch::ScalarType dtype = torch::kFloat) {
  auto g = gen(seed);
  return torch::randn(shape, g, torch::TensorOptions().dtype(dtype));
}

// Central differences of a scalar function at `samples` random coordinates of
// `x` (all coordinates when samples <= 0), compared with the autograd
// gradient on the same coordinates. Returns |fd - ad| / max(|fd|, |ad|) over
// the sampled vector.
inline double gradient_check(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x0,
                             int samples = 24, double eps = 1e-6, uint64_t seed = 1) {
  auto x = x0.detach().to(torch::kDouble).clone().requires_grad_(true);
  auto y = f(x);
  auto ad = torch::autograd::grad({y}, {x})[0].flatten();

  std::vector<int64_t> coords;
  const int64_t n = x.numel();
  if (samples <= 0 || samples >= n) {
    for (int64_t i = 0; i < n; ++i) coords.push_back(i);
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int64_t> pick(0, n - 1);
    for (int i = 0; i < samples; ++i) coords.push_back(pick(rng));
  }
  std::vector<double> fd_vals, ad_vals;
  // f may itself differentiate (second-order checks), so no NoGradGuard here.
  auto flat = x.detach().clone().flatten();
  for (auto i : coords) {
    auto plus = flat.clone();
    auto minus = flat.clone();
    plus[i] += eps;
    minus[i] -= eps;
    const double fp = f(plus.view(x.sizes())).item<double>();
    const double fm = f(minus.view(x.sizes())).item<double>();
    fd_vals.push_back((fp - fm) / (2 * eps));
    ad_vals.push_back(ad[i].item<double>());
  }
  double diff = 0, nf = 0, na = 0;
  for (size_t i = 0; i < fd_vals.size(); ++i) {
    diff += (fd_vals[i] - ad_vals[i]) * (fd_vals[i] - ad_vals[i]);
    nf += fd_vals[i] * fd_vals[i];
    na += ad_vals[i] * ad_vals[i];
  }
  const double scale = std::max(std::sqrt(nf), std::sqrt(na));
  return scale == 0 ? 0.0 : std::sqrt(diff) / scale;
}

}  // namespace testutil
