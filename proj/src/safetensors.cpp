#include "galip/safetensors.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "galip/errors.hpp"

namespace galip::safetensors {

namespace {

using nlohmann::json;

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kDouble: return "F64";
    case torch::kFloat: return "F32";
    case torch::kHalf: return "F16";
    case torch::kBFloat16: return "BF16";
    case torch::kLong: return "I64";
    case torch::kInt: return "I32";
    case torch::kByte: return "U8";
    default: throw InvalidArgument(std::string("unsupported dtype for safetensors: ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_name(const std::string& key, const std::string& name) {
  if (name == "F64") return torch::kDouble;
  if (name == "F32") return torch::kFloat;
  if (name == "F16") return torch::kHalf;
  if (name == "BF16") return torch::kBFloat16;
  if (name == "I64") return torch::kLong;
  if (name == "I32") return torch::kInt;
  if (name == "U8") return torch::kByte;
  throw MissingKey(key, "unsupported dtype " + name);
}

}  // namespace

void save(const std::filesystem::path& path, const TensorFile& file) {
  json header = json::object();
  std::vector<torch::Tensor> blobs;
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : file.tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const std::uint64_t bytes = t.numel() * t.element_size();
    header[name] = {{"dtype", dtype_name(t.scalar_type())},
                    {"shape", t.sizes().vec()},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
    blobs.push_back(std::move(t));
  }
  if (!file.metadata.empty()) header["__metadata__"] = file.metadata;

  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  const std::uint64_t header_size = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  unsigned char size_le[8];
  for (int i = 0; i < 8; ++i) size_le[i] = static_cast<unsigned char>((header_size >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(size_le), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : blobs) {
    out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) throw Error("write failed: " + path.string());
}

TensorFile load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFound(path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 8) throw MissingKey("__header__", "file too short: " + path.string());
  std::uint64_t header_size = 0;
  for (int i = 0; i < 8; ++i) header_size |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  if (8 + header_size > bytes.size()) throw MissingKey("__header__", "header truncated in " + path.string());

  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_size));
  } catch (const json::exception& e) {
    throw MissingKey("__header__", std::string("unparsable header: ") + e.what());
  }

  const char* data = bytes.data() + 8 + header_size;
  const std::uint64_t data_size = bytes.size() - 8 - header_size;

  TensorFile file;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) file.metadata[k] = v.get<std::string>();
      continue;
    }
    const auto dtype = dtype_from_name(name, entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto range = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
    if (range.size() != 2 || range[1] < range[0]) throw MissingKey(name, "malformed data_offsets");
    if (range[1] > data_size) throw MissingKey(name, "tensor bytes truncated in " + path.string());

    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    const std::uint64_t expected = t.numel() * t.element_size();
    if (expected != range[1] - range[0]) throw MissingKey(name, "byte length disagrees with shape");
    std::memcpy(t.data_ptr(), data + range[0], expected);
    file.tensors.emplace(name, std::move(t));
  }
  return file;
}

}  // namespace galip::safetensors
