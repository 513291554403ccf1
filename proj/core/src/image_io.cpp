#include "ghfeat/image_io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <fstream>
#include <stdexcept>

#include "ghfeat/errors.hpp"

namespace ghfeat {

torch::Tensor to_uint8(const torch::Tensor& image) {
  return ((image.detach().to(torch::kFloat32).clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch::kUInt8);
}

torch::Tensor from_uint8(const torch::Tensor& pixels) { return pixels.to(torch::kFloat32) / 127.5 - 1.0; }

torch::Tensor decode_png(std::span<const uint8_t> bytes, int64_t channels) {
  GHFEAT_EXPECT(channels == 1 || channels == 3, "PNG decode supports 1 or 3 channels");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw std::invalid_argument(std::string("undecodable PNG: ") + img.message);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  auto pixels = torch::empty({img.height, img.width, channels}, torch::kUInt8);
  if (!png_image_finish_read(&img, nullptr, pixels.data_ptr<uint8_t>(), 0, nullptr)) {
    png_image_free(&img);
    throw std::invalid_argument(std::string("undecodable PNG: ") + img.message);
  }
  return from_uint8(pixels.permute({2, 0, 1}).contiguous());
}

std::vector<uint8_t> encode_png(const torch::Tensor& image) {
  GHFEAT_EXPECT(image.dim() == 3 && (image.size(0) == 1 || image.size(0) == 3), "PNG encode expects [1|3, H, W]");
  auto pixels = to_uint8(image).permute({1, 2, 0}).contiguous();
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.size(2));
  img.height = static_cast<png_uint_32>(image.size(1));
  img.format = image.size(0) == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data_ptr<uint8_t>(), 0, nullptr)) {
    throw std::runtime_error(std::string("PNG encode failed: ") + img.message);
  }
  std::vector<uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, pixels.data_ptr<uint8_t>(), 0, nullptr)) {
    throw std::runtime_error(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

torch::Tensor read_png(const std::filesystem::path& path, int64_t channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image", path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes, channels);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what(), path.string());
  }
}

void write_png(const torch::Tensor& image, const std::filesystem::path& path) {
  const auto bytes = encode_png(image);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

torch::Tensor make_grid(const std::vector<torch::Tensor>& images, int64_t columns) {
  GHFEAT_EXPECT(!images.empty() && columns > 0, "grid needs images and a positive column count");
  const auto c = images[0].size(0), h = images[0].size(1), w = images[0].size(2);
  const int64_t n = static_cast<int64_t>(images.size());
  const int64_t rows = (n + columns - 1) / columns;
  auto grid = torch::full({c, rows * (h + 1) + 1, columns * (w + 1) + 1}, -1.0f);
  for (int64_t i = 0; i < n; ++i) {
    const auto& img = images[static_cast<size_t>(i)];
    GHFEAT_EXPECT(img.sizes() == images[0].sizes(), "grid images must share one shape");
    const int64_t r = i / columns, col = i % columns;
    grid.narrow(1, 1 + r * (h + 1), h).narrow(2, 1 + col * (w + 1), w).copy_(img.detach().clamp(-1.0, 1.0));
  }
  return grid;
}

std::string base64_encode(std::span<const uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64 length must be a multiple of 4");
  std::vector<uint8_t> out(3 * text.size() / 4 + 1);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw std::invalid_argument("malformed base64");
  size_t size = static_cast<size_t>(n);
  // EVP_DecodeBlock keeps the zero bytes that padding stands for
  if (!text.empty() && text.back() == '=') --size;
  if (text.size() > 1 && text[text.size() - 2] == '=') --size;
  out.resize(size);
  return out;
}

}  // namespace ghfeat
