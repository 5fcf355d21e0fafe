#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace galip {

struct TokenIds {
  std::vector<int64_t> ids;  // always context_length long
  int64_t valid_length = 0;  // includes start and end markers
  bool truncated = false;
};

// Stacks token sequences into a (B, context_length) int64 tensor and a (B,)
// tensor of valid lengths.
std::pair<torch::Tensor, torch::Tensor> stack_tokens(const std::vector<TokenIds>& batch);

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual TokenIds tokenize(const std::string& text) const = 0;
  virtual int64_t vocab_size() const = 0;
  virtual int64_t context_length() const = 0;
  virtual std::string id() const = 0;
};

// Lowercases, collapses whitespace and splits into the word pieces the CLIP
// pre-tokenizer produces for ASCII text: contractions, letter runs, single
// digits and runs of other non-space characters. Non-ASCII bytes are
// treated as letters.
std::vector<std::string> pre_tokenize(const std::string& text);

// Byte-pair encoder over the published CLIP merges list (the gzip-compressed
// "bpe_simple_vocab_16e6.txt.gz" or an uncompressed equivalent).
class BpeTokenizer final : public Tokenizer {
 public:
  // `merge_limit` caps the number of merges read; the published file is used
  // with 49152 - 256 - 2 merges to yield the 49,408-entry vocabulary.
  static std::unique_ptr<BpeTokenizer> from_file(const std::filesystem::path& path,
                                                 int64_t context_length = 77,
                                                 int64_t merge_limit = 49152 - 256 - 2);
  // Merges given directly as (left, right) symbol pairs in priority order.
  BpeTokenizer(std::vector<std::pair<std::string, std::string>> merges, int64_t context_length);

  TokenIds tokenize(const std::string& text) const override;
  int64_t vocab_size() const override { return static_cast<int64_t>(encoder_.size()); }
  int64_t context_length() const override { return context_length_; }
  std::string id() const override { return "bpe"; }

  int64_t start_id() const { return start_id_; }
  int64_t end_id() const { return end_id_; }
  static constexpr int64_t kPadId = 0;

  // Ids for one pre-tokenized word (without markers).
  std::vector<int64_t> encode_word(const std::string& word) const;

 private:
  std::vector<std::string> bpe(const std::string& token) const;

  std::unordered_map<std::string, int64_t> encoder_;
  std::map<std::pair<std::string, std::string>, int64_t> ranks_;
  std::vector<std::string> byte_encoder_;  // byte -> printable unicode (UTF-8)
  int64_t context_length_;
  int64_t start_id_ = 0;
  int64_t end_id_ = 0;
};

// Deterministic stand-in for the tiny test configuration: each pre-tokenized
// word is hashed (FNV-1a, seeded) into [1, vocab_size - 3].
class HashTokenizer final : public Tokenizer {
 public:
  HashTokenizer(int64_t vocab_size, int64_t context_length, std::uint64_t seed);

  TokenIds tokenize(const std::string& text) const override;
  int64_t vocab_size() const override { return vocab_size_; }
  int64_t context_length() const override { return context_length_; }
  std::string id() const override { return "hash:" + std::to_string(seed_); }

  int64_t start_id() const { return vocab_size_ - 2; }
  int64_t end_id() const { return vocab_size_ - 1; }
  static constexpr int64_t kPadId = 0;

  int64_t word_id(const std::string& word) const;

 private:
  int64_t vocab_size_;
  int64_t context_length_;
  std::uint64_t seed_;
};

}  // namespace galip
