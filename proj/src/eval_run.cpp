#include "galip/eval_run.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "galip/errors.hpp"

namespace galip::eval {

MetricReport evaluate_checkpoint(GeneratorBundle& bundle, const data::DatasetManifest& manifest,
                                 const EvalOptions& options) {
  if (options.metric != "fid" && options.metric != "clipsim")
    throw InvalidArgument("unknown metric '" + options.metric + "' (expected fid or clipsim)");
  std::string split = options.split;
  if (split.empty()) {
    const auto splits = manifest.splits();
    split = std::find(splits.begin(), splits.end(), "test") != splits.end() ? "test" : "train";
  }
  auto pool = manifest.split_indices(split);
  if (pool.size() < 2) throw InvalidArgument("split '" + split + "' has fewer than two records");
  std::mt19937_64 rng(options.seed);
  for (size_t i = pool.size() - 1; i > 0; --i) std::swap(pool[i], pool[data::uniform_index(rng, i + 1)]);
  pool.resize(std::min<size_t>(pool.size(), static_cast<size_t>(std::max<int64_t>(options.samples, 2))));

  const auto& backbone = *bundle.backbone;
  const auto dtype = backbone.dtype();
  const auto size = bundle.config.backbone.image_size;
  auto noise_gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
  torch::NoGradGuard no_grad;

  std::vector<torch::Tensor> fakes;
  std::vector<torch::Tensor> reals;
  std::vector<torch::Tensor> texts;
  for (size_t start = 0; start < pool.size(); start += static_cast<size_t>(options.batch_size)) {
    const auto end = std::min(pool.size(), start + static_cast<size_t>(options.batch_size));
    std::vector<TokenIds> tokens;
    for (size_t i = start; i < end; ++i) {
      const auto& rec = manifest.records[pool[i]];
      tokens.push_back(bundle.tokenizer->tokenize(rec.captions.front()));
      if (options.metric == "fid") reals.push_back(data::preprocess_file(rec.image, size).unsqueeze(0));
    }
    auto [ids, lengths] = stack_tokens(tokens);
    auto text = backbone.encode_text(ids, lengths);
    auto noise = torch::randn({static_cast<int64_t>(end - start), bundle.config.generator.noise_dim}, noise_gen,
                              torch::TensorOptions().dtype(dtype));
    fakes.push_back(bundle.generator->generate(noise, text, backbone));
    texts.push_back(text);
  }
  const auto fake = torch::cat(fakes, 0);

  MetricReport report;
  report.checkpoint_step = bundle.step;
  report.split = split;
  report.checkpoint_id = bundle.checkpoint_id;
  report.extractor_id = "clip-image:" + backbone.source_id();
  if (options.metric == "fid") {
    const auto extractor = clip_feature_extractor(backbone);
    const auto real_stats = feature_stats(torch::cat(reals, 0).to(dtype), extractor, options.batch_size);
    const auto fake_stats = feature_stats(fake, extractor, options.batch_size);
    report.values["fid"] = frechet_distance(real_stats, fake_stats);
  } else {
    report.values["clipsim"] = clipsim_score(fake, torch::cat(texts, 0), backbone);
  }
  report.values["samples"] = static_cast<double>(pool.size());
  return report;
}

}  // namespace galip::eval
