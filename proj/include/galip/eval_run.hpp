#pragma once

#include <cstdint>
#include <string>

#include "galip/data.hpp"
#include "galip/evaluation.hpp"
#include "galip/trainer.hpp"

namespace galip::eval {

struct EvalOptions {
  std::string metric = "fid";  // fid | clipsim
  std::string split;           // empty: "test" when present, else "train"
  int64_t samples = 1000;      // capped by the split size
  uint64_t seed = 0;
  int64_t batch_size = 32;
};

// One generated image per sampled record, captioned with its first caption.
// fid compares backbone image features of generated and real images;
// clipsim scores generated images against their captions.
MetricReport evaluate_checkpoint(GeneratorBundle& bundle, const data::DatasetManifest& manifest,
                                 const EvalOptions& options);

}  // namespace galip::eval
