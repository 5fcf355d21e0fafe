#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace galip {

// 8-bit interleaved RGB raster.
struct Image8 {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> rgb;

  uint8_t& at(int64_t x, int64_t y, int c) { return rgb[static_cast<size_t>((y * width + x) * 3 + c)]; }
  uint8_t at(int64_t x, int64_t y, int c) const { return rgb[static_cast<size_t>((y * width + x) * 3 + c)]; }
};

// PNG or JPEG, detected from the leading bytes. Throws DecodeError.
Image8 decode_image(std::string_view bytes);
Image8 read_image(const std::filesystem::path& path);

// Lossless, deterministic PNG encoding.
std::string encode_png(const Image8& image);
void write_png(const std::filesystem::path& path, const Image8& image);

// (3, H, W) float tensor with values in [0, 255].
torch::Tensor image_to_tensor(const Image8& image);
// (3, H, W) tensor in [-1, 1] -> 8-bit raster (round to nearest, clamped).
Image8 tensor_to_image(const torch::Tensor& chw);

// Tiles (N, 3, H, W) images in [-1, 1] into a rows x cols sheet.
Image8 tile_images(const torch::Tensor& images, int64_t rows, int64_t cols, int64_t padding = 2);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

}  // namespace galip
