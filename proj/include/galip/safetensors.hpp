#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <torch/torch.h>

namespace galip::safetensors {

// Name -> tensor map plus free-form string metadata, stored in the
// safetensors layout: u64 little-endian header size, JSON header, raw bytes.
struct TensorFile {
  std::map<std::string, torch::Tensor> tensors;
  std::map<std::string, std::string> metadata;
};

// Tensors are written contiguous on CPU in their own dtype
// (F64, F32, F16, BF16, I64, I32, U8 are supported).
void save(const std::filesystem::path& path, const TensorFile& file);

// Throws FileNotFound when the file is absent, MissingKey when the header
// is unreadable or a tensor's byte range runs past the end of the file.
TensorFile load(const std::filesystem::path& path);

}  // namespace galip::safetensors
