#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ghfeat {

// Images are float tensors [C, H, W] with values in [-1, 1]; C is 1 or 3.

torch::Tensor decode_png(std::span<const uint8_t> bytes, int64_t channels);
std::vector<uint8_t> encode_png(const torch::Tensor& image);

torch::Tensor read_png(const std::filesystem::path& path, int64_t channels);
void write_png(const torch::Tensor& image, const std::filesystem::path& path);

// Tiles [C,H,W] images row-major into one image with a 1px border of -1.
torch::Tensor make_grid(const std::vector<torch::Tensor>& images, int64_t columns);

// Quantizes to the 8-bit grid PNG export uses.
torch::Tensor to_uint8(const torch::Tensor& image);
torch::Tensor from_uint8(const torch::Tensor& pixels);

std::string base64_encode(std::span<const uint8_t> bytes);
// Throws std::invalid_argument on malformed input.
std::vector<uint8_t> base64_decode(const std::string& text);

}  // namespace ghfeat
