#pragma once

#include <functional>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "galip/backbone.hpp"

namespace galip {

struct ObjectiveConfig {
  double k = 2.0;       // penalty coefficient
  double p = 6.0;       // penalty exponent
  double lambda = 4.0;  // similarity weight in the generator loss
  // false: one norm over all pyramid levels concatenated; true: sum of
  // per-level norms.
  bool per_level_norm = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const ObjectiveConfig& c);
void from_json(const nlohmann::json& j, ObjectiveConfig& c);

// Discriminator logits for real pairs, generated pairs and real images with
// rotated captions; all (B,).
struct BatchTriple {
  torch::Tensor real;
  torch::Tensor fake;
  torch::Tensor mismatched;
};

// -E[min(0, -1 + D_real)] - 1/2 E[min(0, -1 - D_fake)] - 1/2 E[min(0, -1 - D_mis)]
torch::Tensor hinge_d_loss(const BatchTriple& triple);

struct MagpResult {
  torch::Tensor penalty;    // k * E[(|g_c| + |g_e|)^p], differentiable w.r.t. D
  torch::Tensor grad_norm;  // E[|g_c| + |g_e|], detached
};

// Penalty from logits already computed on `pyramid` and `text`; both must be
// graph inputs with requires_grad set.
MagpResult magp_from_logits(const torch::Tensor& logits, const FeaturePyramid& pyramid, const torch::Tensor& text,
                            const ObjectiveConfig& cfg);

using LogitFn = std::function<torch::Tensor(const FeaturePyramid&, const torch::Tensor&)>;

// Matching-aware gradient penalty evaluated on real matched pairs. The
// pyramid and text are treated as leaves; the result keeps the second-order
// path to whatever parameters `logit_fn` uses.
class Magp {
 public:
  Magp(LogitFn logit_fn, ObjectiveConfig cfg);
  MagpResult operator()(const FeaturePyramid& pyramid, const torch::Tensor& text) const;

 private:
  LogitFn logit_fn_;
  ObjectiveConfig cfg_;
};

// Mean over the batch of cosine(a_i, b_i); a and b are (B, D).
torch::Tensor mean_cosine(const torch::Tensor& a, const torch::Tensor& b);

// Mean cosine between encode_image of generator-range images and the text
// embeddings; differentiable with respect to the images.
torch::Tensor clip_similarity(const torch::Tensor& images, const torch::Tensor& text, const Backbone& backbone);

// -E[fake_logits] - lambda * similarity
torch::Tensor generator_loss(const torch::Tensor& fake_logits, const torch::Tensor& similarity,
                             const ObjectiveConfig& cfg);

}  // namespace galip
