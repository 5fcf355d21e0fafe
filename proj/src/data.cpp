#include "galip/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "galip/backbone.hpp"
#include "galip/errors.hpp"

namespace galip::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<size_t> DatasetManifest::split_indices(const std::string& split) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

std::vector<std::string> DatasetManifest::splits() const {
  std::vector<std::string> out;
  for (const auto& r : records)
    if (std::find(out.begin(), out.end(), r.split) == out.end()) out.push_back(r.split);
  return out;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFound(path.string());
  DatasetManifest manifest;
  manifest.root = fs::absolute(path).parent_path();
  std::map<fs::path, std::string> split_of;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw InvalidArgument(where + "malformed record (" + e.what() + ")");
    }
    if (!obj.is_object() || !obj.contains("image") || !obj.contains("captions") || !obj.contains("split"))
      throw InvalidArgument(where + "record needs keys image, captions, split");
    ManifestRecord rec;
    fs::path image = obj.at("image").get<std::string>();
    rec.image = image.is_absolute() ? image : manifest.root / image;
    rec.captions = obj.at("captions").get<std::vector<std::string>>();
    rec.split = obj.at("split").get<std::string>();
    if (rec.captions.empty()) throw InvalidArgument(where + "empty caption list");
    if (!fs::exists(rec.image)) throw InvalidArgument(where + "image does not resolve: " + rec.image.string());
    auto canonical = fs::weakly_canonical(rec.image);
    auto [it, inserted] = split_of.emplace(canonical, rec.split);
    if (!inserted && it->second != rec.split)
      throw InvalidArgument(where + "image appears in splits '" + it->second + "' and '" + rec.split + "'");
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  const auto base = fs::absolute(path).parent_path();
  for (const auto& r : manifest.records) {
    auto rel = fs::absolute(r.image).lexically_relative(base);
    const auto image = (rel.empty() || *rel.begin() == "..") ? fs::absolute(r.image) : rel;
    out << json{{"image", image.generic_string()}, {"captions", r.captions}, {"split", r.split}}.dump() << "\n";
  }
}

uint64_t uniform_index(std::mt19937_64& rng, uint64_t n) {
  if (n == 0) throw InvalidArgument("uniform_index: empty range");
  const uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  uint64_t v = rng();
  while (v >= limit) v = rng();
  return v % n;
}

torch::Tensor preprocess(const Image8& image, int64_t image_size, ColorSpace space, std::mt19937_64* crop_rng) {
  if (image.width <= 0 || image.height <= 0) throw DecodeError("empty image");
  const auto side = std::min(image.width, image.height);
  int64_t x0 = (image.width - side) / 2;
  int64_t y0 = (image.height - side) / 2;
  if (crop_rng != nullptr) {
    x0 = static_cast<int64_t>(uniform_index(*crop_rng, static_cast<uint64_t>(image.width - side + 1)));
    y0 = static_cast<int64_t>(uniform_index(*crop_rng, static_cast<uint64_t>(image.height - side + 1)));
  }
  auto t = image_to_tensor(image).slice(1, y0, y0 + side).slice(2, x0, x0 + side).unsqueeze(0);
  if (side != image_size) {
    namespace F = torch::nn::functional;
    t = F::interpolate(t, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{image_size, image_size})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  }
  auto x = t.squeeze(0) / 127.5 - 1.0;
  if (space == ColorSpace::kBackbone) x = Backbone::normalize(x.unsqueeze(0)).squeeze(0);
  return x.contiguous();
}

torch::Tensor preprocess_file(const fs::path& path, int64_t image_size, ColorSpace space) {
  return preprocess(read_image(path), image_size, space);
}

// ---------------------------------------------------------------------------
// BatchIterator

BatchIterator::BatchIterator(const DatasetManifest& manifest, const std::string& split, int64_t batch_size,
                             uint64_t seed, const Tokenizer& tokenizer, int64_t image_size)
    : manifest_(&manifest),
      pool_(manifest.split_indices(split)),
      tokenizer_(&tokenizer),
      batch_size_(batch_size),
      image_size_(image_size),
      rng_(seed) {
  if (pool_.empty()) throw InvalidArgument("split '" + split + "' is empty");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (batch_size > static_cast<int64_t>(pool_.size()))
    throw InvalidArgument("batch_size " + std::to_string(batch_size) + " exceeds split size " +
                          std::to_string(pool_.size()));
}

void BatchIterator::start_epoch() {
  order_ = pool_;
  for (size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[uniform_index(rng_, i)]);
  cursor_ = 0;
  ++epoch_;
}

std::vector<std::pair<size_t, size_t>> BatchIterator::next_indices() {
  if (epoch_ < 0 || cursor_ + static_cast<size_t>(batch_size_) > order_.size()) start_epoch();
  std::vector<std::pair<size_t, size_t>> out;
  for (int64_t i = 0; i < batch_size_; ++i) {
    const auto rec = order_[cursor_++];
    const auto& caps = manifest_->records[rec].captions;
    out.emplace_back(rec, static_cast<size_t>(uniform_index(rng_, caps.size())));
  }
  return out;
}

Batch BatchIterator::next() {
  const auto picks = next_indices();
  Batch batch;
  std::vector<torch::Tensor> images;
  std::vector<TokenIds> tokens;
  for (const auto& [rec, cap] : picks) {
    const auto& r = manifest_->records[rec];
    images.push_back(preprocess_file(r.image, image_size_));
    batch.captions.push_back(r.captions[cap]);
    tokens.push_back(tokenizer_->tokenize(r.captions[cap]));
    batch.records.push_back(rec);
  }
  batch.images = torch::stack(images);
  std::tie(batch.token_ids, batch.token_lengths) = stack_tokens(tokens);
  return batch;
}

std::string BatchIterator::state() const {
  std::ostringstream os;
  os << epoch_ << ' ' << cursor_ << ' ' << order_.size();
  for (auto i : order_) os << ' ' << i;
  os << ' ' << rng_;
  return os.str();
}

void BatchIterator::restore(const std::string& state) {
  std::istringstream is(state);
  size_t n = 0;
  is >> epoch_ >> cursor_ >> n;
  order_.resize(n);
  for (auto& i : order_) is >> i;
  is >> rng_;
  if (!is) throw InvalidArgument("corrupt batch iterator state");
}

// ---------------------------------------------------------------------------
// Converters

DatasetManifest convert_coco(const fs::path& annotations, const fs::path& image_dir, const std::string& split) {
  std::ifstream in(annotations);
  if (!in) throw FileNotFound(annotations.string());
  json doc = json::parse(in);
  std::map<int64_t, std::string> files;
  std::vector<int64_t> order;
  for (const auto& img : doc.at("images")) {
    const auto id = img.at("id").get<int64_t>();
    files[id] = img.at("file_name").get<std::string>();
    order.push_back(id);
  }
  std::map<int64_t, std::vector<std::string>> captions;
  for (const auto& ann : doc.at("annotations")) {
    auto cap = ann.at("caption").get<std::string>();
    const auto first = cap.find_first_not_of(" \t\r\n");
    const auto last = cap.find_last_not_of(" \t\r\n");
    if (first == std::string::npos) continue;
    captions[ann.at("image_id").get<int64_t>()].push_back(cap.substr(first, last - first + 1));
  }
  DatasetManifest manifest;
  manifest.root = fs::absolute(image_dir);
  for (auto id : order) {
    auto it = captions.find(id);
    if (it == captions.end()) continue;
    manifest.records.push_back({fs::absolute(image_dir / files[id]), it->second, split});
  }
  return manifest;
}

DatasetManifest convert_folder(const fs::path& root) {
  if (!fs::is_directory(root)) throw FileNotFound(root.string());
  static const std::set<std::string> kImageExt = {".png", ".jpg", ".jpeg", ".PNG", ".JPG", ".JPEG"};
  static const std::set<std::string> kSplits = {"train", "test", "val", "validation"};
  DatasetManifest manifest;
  manifest.root = fs::absolute(root);

  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file() && kImageExt.count(entry.path().extension().string())) files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  for (const auto& file : files) {
    auto text = file;
    text.replace_extension(".txt");
    std::ifstream in(text);
    if (!in) continue;
    ManifestRecord rec;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") != std::string::npos) rec.captions.push_back(line);
    }
    if (rec.captions.empty()) continue;
    const auto rel = fs::relative(file, root);
    const auto top = rel.begin()->string();
    rec.split = (std::distance(rel.begin(), rel.end()) > 1 && kSplits.count(top)) ? top : "train";
    rec.image = fs::absolute(file);
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

DatasetManifest make_toy_dataset(const fs::path& dir, int64_t count, int64_t image_size, uint64_t seed) {
  struct Color {
    const char* name;
    uint8_t r, g, b;
  };
  static const Color kColors[] = {{"red", 220, 40, 40}, {"green", 40, 200, 60}, {"blue", 40, 70, 230},
                                  {"yellow", 235, 215, 40}};
  static const char* kShapes[] = {"circle", "square", "triangle"};

  fs::create_directories(dir / "images");
  std::mt19937_64 rng(seed);
  DatasetManifest manifest;
  manifest.root = fs::absolute(dir);
  const double s = static_cast<double>(image_size);
  for (int64_t i = 0; i < count; ++i) {
    const auto& color = kColors[i % 4];
    const auto shape = static_cast<int>(uniform_index(rng, 3));
    const double radius = s * (0.2 + 0.15 * static_cast<double>(uniform_index(rng, 1000)) / 1000.0);
    const double cx = s / 2 + (static_cast<double>(uniform_index(rng, 1000)) / 1000.0 - 0.5) * (s - 2 * radius);
    const double cy = s / 2 + (static_cast<double>(uniform_index(rng, 1000)) / 1000.0 - 0.5) * (s - 2 * radius);

    Image8 img{image_size, image_size, std::vector<uint8_t>(static_cast<size_t>(image_size * image_size * 3), 16)};
    for (int64_t y = 0; y < image_size; ++y) {
      for (int64_t x = 0; x < image_size; ++x) {
        const double dx = x + 0.5 - cx;
        const double dy = y + 0.5 - cy;
        bool inside = false;
        if (shape == 0) inside = dx * dx + dy * dy <= radius * radius;
        if (shape == 1) inside = std::abs(dx) <= radius * 0.85 && std::abs(dy) <= radius * 0.85;
        if (shape == 2) inside = dy <= radius * 0.8 && dy >= -radius && std::abs(dx) <= (dy + radius) * 0.6;
        if (inside) {
          img.at(x, y, 0) = color.r;
          img.at(x, y, 1) = color.g;
          img.at(x, y, 2) = color.b;
        }
      }
    }
    const std::string size_word = radius > s * 0.275 ? "large" : "small";
    char name[32];
    std::snprintf(name, sizeof(name), "%05lld.png", static_cast<long long>(i));
    write_png(dir / "images" / name, img);
    const std::string col = color.name;
    const std::string shp = kShapes[shape];
    manifest.records.push_back({fs::absolute(dir / "images" / name),
                                {"a " + col + " " + shp, "a " + size_word + " " + col + " " + shp,
                                 "a " + col + " " + shp + " on a dark background"},
                                "train"});
  }
  save_manifest(dir / "manifest.jsonl", manifest);
  return manifest;
}

}  // namespace galip::data
