#include "galip/objectives.hpp"

#include "galip/errors.hpp"

namespace galip {

void ObjectiveConfig::validate() const {
  if (k < 0.0) throw InvalidArgument("penalty coefficient k must be >= 0");
  if (p < 1.0) throw InvalidArgument("penalty exponent p must be >= 1");
  if (lambda < 0.0) throw InvalidArgument("similarity weight lambda must be >= 0");
}

void to_json(nlohmann::json& j, const ObjectiveConfig& c) {
  j = {{"k", c.k}, {"p", c.p}, {"lambda", c.lambda}, {"per_level_norm", c.per_level_norm}};
}

void from_json(const nlohmann::json& j, ObjectiveConfig& c) {
  c = ObjectiveConfig{};
  if (j.contains("k")) j.at("k").get_to(c.k);
  if (j.contains("p")) j.at("p").get_to(c.p);
  if (j.contains("lambda")) j.at("lambda").get_to(c.lambda);
  if (j.contains("per_level_norm")) j.at("per_level_norm").get_to(c.per_level_norm);
}

torch::Tensor hinge_d_loss(const BatchTriple& t) {
  if (!t.real.defined() || t.real.numel() == 0) throw InvalidArgument("hinge_d_loss: empty batch");
  if (t.fake.numel() != t.real.numel() || t.mismatched.numel() != t.real.numel())
    throw InvalidArgument("hinge_d_loss: real/fake/mismatched batches differ in length");
  auto real = -torch::clamp_max(t.real - 1.0, 0.0).mean();
  auto fake = -torch::clamp_max(-t.fake - 1.0, 0.0).mean();
  auto mis = -torch::clamp_max(-t.mismatched - 1.0, 0.0).mean();
  return real + 0.5 * fake + 0.5 * mis;
}

MagpResult magp_from_logits(const torch::Tensor& logits, const FeaturePyramid& pyramid, const torch::Tensor& text,
                            const ObjectiveConfig& cfg) {
  cfg.validate();
  const auto B = text.size(0);
  if (logits.dim() != 1 || logits.size(0) != B) throw InvalidArgument("magp: logits must be (B,)");
  if (!logits.requires_grad()) {
    // Constant in both inputs: zero gradient, zero penalty.
    auto zero = torch::zeros({}, logits.options());
    return {zero, zero};
  }

  std::vector<torch::Tensor> inputs(pyramid.levels.begin(), pyramid.levels.end());
  inputs.push_back(text);
  for (const auto& t : inputs)
    if (!t.requires_grad()) throw InvalidArgument("magp: pyramid levels and text must require grad");

  auto grads = torch::autograd::grad({logits.sum()}, inputs, /*grad_outputs=*/{}, /*retain_graph=*/true,
                                     /*create_graph=*/true, /*allow_unused=*/true);
  auto norm_of = [&](const torch::Tensor& g, const torch::Tensor& like) {
    if (!g.defined()) return torch::zeros({B}, like.options().requires_grad(false));
    return g.reshape({B, -1}).norm(2, 1);
  };

  torch::Tensor grad_c;
  if (cfg.per_level_norm) {
    grad_c = torch::zeros({B}, text.options().requires_grad(false));
    for (size_t i = 0; i < pyramid.levels.size(); ++i) grad_c = grad_c + norm_of(grads[i], pyramid.levels[i]);
  } else {
    std::vector<torch::Tensor> flat;
    for (size_t i = 0; i < pyramid.levels.size(); ++i) {
      flat.push_back(grads[i].defined() ? grads[i].reshape({B, -1})
                                        : torch::zeros({B, pyramid.levels[i][0].numel()}, text.options()));
    }
    grad_c = torch::cat(flat, 1).norm(2, 1);
  }
  auto grad_e = norm_of(grads.back(), text);
  auto total = grad_c + grad_e;
  return {cfg.k * total.pow(cfg.p).mean(), total.mean().detach()};
}

Magp::Magp(LogitFn logit_fn, ObjectiveConfig cfg) : logit_fn_(std::move(logit_fn)), cfg_(cfg) {
  if (!logit_fn_) throw InvalidArgument("magp: logit function is empty");
  cfg_.validate();
}

MagpResult Magp::operator()(const FeaturePyramid& pyramid, const torch::Tensor& text) const {
  FeaturePyramid leaves{pyramid.layers, {}, pyramid.source_resolution};
  for (const auto& l : pyramid.levels) leaves.levels.push_back(l.detach().requires_grad_(true));
  auto e = text.detach().requires_grad_(true);
  return magp_from_logits(logit_fn_(leaves, e), leaves, e, cfg_);
}

torch::Tensor mean_cosine(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes() || a.dim() != 2) throw InvalidArgument("mean_cosine: expects equal (B, D) inputs");
  namespace F = torch::nn::functional;
  return F::cosine_similarity(a, b, F::CosineSimilarityFuncOptions().dim(1).eps(1e-8)).mean();
}

torch::Tensor clip_similarity(const torch::Tensor& images, const torch::Tensor& text, const Backbone& backbone) {
  return mean_cosine(backbone.encode_image(Backbone::normalize(images)), text);
}

torch::Tensor generator_loss(const torch::Tensor& fake_logits, const torch::Tensor& similarity,
                             const ObjectiveConfig& cfg) {
  return -fake_logits.mean() - cfg.lambda * similarity;
}

}  // namespace galip
