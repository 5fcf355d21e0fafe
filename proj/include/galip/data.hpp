#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "galip/image_io.hpp"
#include "galip/tokenizer.hpp"

namespace galip::data {

struct ManifestRecord {
  std::filesystem::path image;  // absolute after loading
  std::vector<std::string> captions;
  std::string split;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;

  std::vector<size_t> split_indices(const std::string& split) const;
  std::vector<std::string> splits() const;
};

// One JSON object per line with keys "image", "captions", "split". Relative
// image paths resolve against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
// Image paths are written relative to the manifest's directory when possible.
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

enum class ColorSpace {
  kGenerator,  // [-1, 1]
  kBackbone,   // CLIP mean/std normalised
};

// Center square crop (or a seeded random one when `crop_rng` is given),
// bilinear resize to image_size, then the requested colour mapping.
// Returns (3, image_size, image_size) float.
torch::Tensor preprocess(const Image8& image, int64_t image_size, ColorSpace space = ColorSpace::kGenerator,
                         std::mt19937_64* crop_rng = nullptr);
torch::Tensor preprocess_file(const std::filesystem::path& path, int64_t image_size,
                              ColorSpace space = ColorSpace::kGenerator);

// Unbiased integer in [0, n) from a 64-bit Mersenne stream.
uint64_t uniform_index(std::mt19937_64& rng, uint64_t n);

struct Batch {
  torch::Tensor images;       // (B, 3, S, S) in [-1, 1]
  torch::Tensor token_ids;    // (B, context_length)
  torch::Tensor token_lengths;  // (B,)
  std::vector<std::string> captions;
  std::vector<size_t> records;  // indices into the manifest
};

// Seeded epoch shuffles with one caption drawn per image from the same
// stream. Within a batch all records are distinct; the tail of each epoch
// that does not fill a batch is dropped.
class BatchIterator {
 public:
  BatchIterator(const DatasetManifest& manifest, const std::string& split, int64_t batch_size, uint64_t seed,
                const Tokenizer& tokenizer, int64_t image_size);

  Batch next();
  // Record/caption choice of the next batch without loading images.
  std::vector<std::pair<size_t, size_t>> next_indices();

  int64_t epoch() const { return epoch_; }
  int64_t batches_per_epoch() const { return static_cast<int64_t>(pool_.size()) / batch_size_; }

  // Position + stream state, enough to resume the exact batch sequence.
  std::string state() const;
  void restore(const std::string& state);

 private:
  void start_epoch();

  const DatasetManifest* manifest_;
  std::vector<size_t> pool_;
  const Tokenizer* tokenizer_;
  int64_t batch_size_;
  int64_t image_size_;
  std::mt19937_64 rng_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
  int64_t epoch_ = -1;
};

// Manifest from a COCO-style caption annotation file; images resolve
// against `image_dir`.
DatasetManifest convert_coco(const std::filesystem::path& annotations, const std::filesystem::path& image_dir,
                             const std::string& split);
// Manifest from a folder in which every image has a sibling .txt file with
// one caption per line. Top-level subfolders named after splits become tags;
// otherwise everything is tagged "train".
DatasetManifest convert_folder(const std::filesystem::path& root);

// Synthetic set of solid shapes in four colours with templated captions
// ("a red circle ..."), written as PNGs plus manifest.jsonl under `dir`.
DatasetManifest make_toy_dataset(const std::filesystem::path& dir, int64_t count, int64_t image_size, uint64_t seed);

}  // namespace galip::data
