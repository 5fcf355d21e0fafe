#include "galip/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <climits>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "galip/errors.hpp"

namespace galip {

namespace {

std::string utf8(int codepoint) {
  std::string out;
  if (codepoint < 0x80) {
    out.push_back(static_cast<char>(codepoint));
  } else {
    out.push_back(static_cast<char>(0xC0 | (codepoint >> 6)));
    out.push_back(static_cast<char>(0x80 | (codepoint & 0x3F)));
  }
  return out;
}

// The reversible byte -> printable-character table of the CLIP encoder, in
// the table's own insertion order (printable bytes first).
std::vector<std::pair<int, int>> bytes_to_unicode() {
  std::vector<int> bs;
  for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
  for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
  for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
  std::vector<int> cs = bs;
  int n = 0;
  for (int b = 0; b < 256; ++b) {
    if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
      bs.push_back(b);
      cs.push_back(256 + n);
      ++n;
    }
  }
  std::vector<std::pair<int, int>> table;
  for (size_t i = 0; i < bs.size(); ++i) table.emplace_back(bs[i], cs[i]);
  return table;
}

std::string read_text_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
  if (path.extension() == ".gz") {
    gzFile gz = gzopen(path.c_str(), "rb");
    if (gz == nullptr) throw FileNotFound(path.string());
    std::string out;
    char buf[1 << 16];
    int n = 0;
    while ((n = gzread(gz, buf, sizeof(buf))) > 0) out.append(buf, static_cast<size_t>(n));
    gzclose(gz);
    if (n < 0) throw DecodeError("corrupt gzip stream: " + path.string());
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_letter(unsigned char c) { return std::isalpha(c) != 0 || c >= 0x80; }
bool is_digit(unsigned char c) { return std::isdigit(c) != 0; }
bool is_space(unsigned char c) { return std::isspace(c) != 0; }

TokenIds pack(const std::vector<int64_t>& body, int64_t start, int64_t end, int64_t pad, int64_t context_length) {
  TokenIds out;
  out.ids.assign(static_cast<size_t>(context_length), pad);
  const int64_t room = context_length - 2;
  const int64_t kept = std::min<int64_t>(room, static_cast<int64_t>(body.size()));
  out.truncated = static_cast<int64_t>(body.size()) > room;
  out.ids[0] = start;
  for (int64_t i = 0; i < kept; ++i) out.ids[static_cast<size_t>(i + 1)] = body[static_cast<size_t>(i)];
  out.ids[static_cast<size_t>(kept + 1)] = end;
  out.valid_length = kept + 2;
  return out;
}

}  // namespace

std::pair<torch::Tensor, torch::Tensor> stack_tokens(const std::vector<TokenIds>& batch) {
  if (batch.empty()) throw InvalidArgument("stack_tokens: empty batch");
  const auto length = static_cast<int64_t>(batch.front().ids.size());
  auto ids = torch::empty({static_cast<int64_t>(batch.size()), length}, torch::kLong);
  auto lengths = torch::empty({static_cast<int64_t>(batch.size())}, torch::kLong);
  auto ids_a = ids.accessor<int64_t, 2>();
  auto len_a = lengths.accessor<int64_t, 1>();
  for (size_t b = 0; b < batch.size(); ++b) {
    if (static_cast<int64_t>(batch[b].ids.size()) != length) throw InvalidArgument("stack_tokens: ragged batch");
    for (int64_t i = 0; i < length; ++i) ids_a[static_cast<int64_t>(b)][i] = batch[b].ids[static_cast<size_t>(i)];
    len_a[static_cast<int64_t>(b)] = batch[b].valid_length;
  }
  return {ids, lengths};
}

std::vector<std::string> pre_tokenize(const std::string& text) {
  // whitespace_clean + lower
  std::string clean;
  bool pending_space = false;
  for (unsigned char c : text) {
    if (is_space(c)) {
      pending_space = !clean.empty();
      continue;
    }
    if (pending_space) clean.push_back(' ');
    pending_space = false;
    clean.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
  }

  static const char* kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  std::vector<std::string> words;
  size_t i = 0;
  while (i < clean.size()) {
    const auto c = static_cast<unsigned char>(clean[i]);
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (c == '\'') {
      bool matched = false;
      for (const char* k : kContractions) {
        const std::string_view kv(k);
        if (clean.compare(i, kv.size(), kv) == 0) {
          words.emplace_back(kv);
          i += kv.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    size_t j = i + 1;
    if (is_letter(c)) {
      while (j < clean.size() && is_letter(static_cast<unsigned char>(clean[j]))) ++j;
    } else if (!is_digit(c)) {
      while (j < clean.size()) {
        const auto d = static_cast<unsigned char>(clean[j]);
        if (is_space(d) || is_letter(d) || is_digit(d)) break;
        ++j;
      }
    }
    words.push_back(clean.substr(i, j - i));
    i = j;
  }
  return words;
}

// ---------------------------------------------------------------------------
// BpeTokenizer

std::unique_ptr<BpeTokenizer> BpeTokenizer::from_file(const std::filesystem::path& path,
                                                      int64_t context_length, int64_t merge_limit) {
  const std::string text = read_text_file(path);
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);  // version header
  std::vector<std::pair<std::string, std::string>> merges;
  while (static_cast<int64_t>(merges.size()) < merge_limit && std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto space = line.find(' ');
    if (space == std::string::npos) continue;
    merges.emplace_back(line.substr(0, space), line.substr(space + 1));
  }
  return std::make_unique<BpeTokenizer>(std::move(merges), context_length);
}

BpeTokenizer::BpeTokenizer(std::vector<std::pair<std::string, std::string>> merges, int64_t context_length)
    : context_length_(context_length) {
  if (context_length < 2) throw InvalidArgument("context_length must be at least 2");
  const auto table = bytes_to_unicode();
  byte_encoder_.resize(256);
  std::vector<std::string> vocab;
  for (const auto& [byte, cp] : table) {
    byte_encoder_[static_cast<size_t>(byte)] = utf8(cp);
    vocab.push_back(utf8(cp));
  }
  const size_t base = vocab.size();
  for (size_t i = 0; i < base; ++i) vocab.push_back(vocab[i] + "</w>");
  for (size_t r = 0; r < merges.size(); ++r) {
    vocab.push_back(merges[r].first + merges[r].second);
    ranks_.emplace(merges[r], static_cast<int64_t>(r));
  }
  vocab.emplace_back("<|startoftext|>");
  vocab.emplace_back("<|endoftext|>");
  for (size_t i = 0; i < vocab.size(); ++i) encoder_.emplace(vocab[i], static_cast<int64_t>(i));
  start_id_ = encoder_.at("<|startoftext|>");
  end_id_ = encoder_.at("<|endoftext|>");
}

std::vector<std::string> BpeTokenizer::bpe(const std::string& token) const {
  std::vector<std::string> word;
  for (unsigned char c : token) word.push_back(byte_encoder_[c]);
  if (word.empty()) return word;
  word.back() += "</w>";

  while (word.size() > 1) {
    int64_t best_rank = LLONG_MAX;
    std::pair<std::string, std::string> best;
    for (size_t i = 0; i + 1 < word.size(); ++i) {
      auto it = ranks_.find({word[i], word[i + 1]});
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = it->first;
      }
    }
    if (best_rank == LLONG_MAX) break;
    std::vector<std::string> merged;
    for (size_t i = 0; i < word.size();) {
      if (i + 1 < word.size() && word[i] == best.first && word[i + 1] == best.second) {
        merged.push_back(best.first + best.second);
        i += 2;
      } else {
        merged.push_back(word[i]);
        ++i;
      }
    }
    word = std::move(merged);
  }
  return word;
}

std::vector<int64_t> BpeTokenizer::encode_word(const std::string& word) const {
  std::vector<int64_t> ids;
  for (const auto& piece : bpe(word)) {
    auto it = encoder_.find(piece);
    if (it == encoder_.end()) throw Error("bpe produced a piece outside the vocabulary: " + piece);
    ids.push_back(it->second);
  }
  return ids;
}

TokenIds BpeTokenizer::tokenize(const std::string& text) const {
  std::vector<int64_t> body;
  for (const auto& word : pre_tokenize(text)) {
    const auto ids = encode_word(word);
    body.insert(body.end(), ids.begin(), ids.end());
  }
  return pack(body, start_id_, end_id_, kPadId, context_length_);
}

// ---------------------------------------------------------------------------
// HashTokenizer

HashTokenizer::HashTokenizer(int64_t vocab_size, int64_t context_length, std::uint64_t seed)
    : vocab_size_(vocab_size), context_length_(context_length), seed_(seed) {
  if (vocab_size < 4) throw InvalidArgument("hash tokenizer needs vocab_size >= 4");
  if (context_length < 2) throw InvalidArgument("context_length must be at least 2");
}

int64_t HashTokenizer::word_id(const std::string& word) const {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ (seed_ * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : word) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return 1 + static_cast<int64_t>(h % static_cast<std::uint64_t>(vocab_size_ - 3));
}

TokenIds HashTokenizer::tokenize(const std::string& text) const {
  std::vector<int64_t> body;
  for (const auto& word : pre_tokenize(text)) body.push_back(word_id(word));
  return pack(body, start_id(), end_id(), kPadId, context_length_);
}

}  // namespace galip
