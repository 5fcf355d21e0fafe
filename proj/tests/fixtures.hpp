#pragma once

#include <filesystem>

#include "galip/trainer.hpp"
#include "test_util.hpp"

namespace testutil {

// A tiny-config checkpoint after `steps` updates on random images with
// hashed captions.
inline void write_tiny_checkpoint(const std::filesystem::path& path, int steps = 2, uint64_t seed = 0) {
  auto cfg = galip::TrainConfig::tiny();
  cfg.batch_size = 4;
  cfg.seed = seed;
  auto backbone = galip::make_backbone(cfg);
  auto tok = galip::make_tokenizer(cfg);
  std::vector<galip::TokenIds> tokens;
  for (int i = 0; i < 4; ++i) tokens.push_back(tok->tokenize("a shape of kind " + std::to_string(i)));
  auto [ids, lengths] = galip::stack_tokens(tokens);
  const auto texts = galip::encode_captions(*backbone, ids, lengths);
  const auto images = randn({4, 3, 32, 32}, seed + 50).clamp(-1, 1);
  galip::Trainer trainer(cfg, backbone);
  for (int i = 0; i < steps; ++i) trainer.train_step(images, texts);
  trainer.save_checkpoint(path);
}

}  // namespace testutil
