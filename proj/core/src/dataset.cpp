#include "ghfeat/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "ghfeat/errors.hpp"
#include "ghfeat/image_io.hpp"

namespace ghfeat {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace {

uint32_t read_be32(std::istream& in, const fs::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated IDX header", path.string());
  return (uint32_t{b[0]} << 24) | (uint32_t{b[1]} << 16) | (uint32_t{b[2]} << 8) | uint32_t{b[3]};
}

void write_be32(std::ostream& out, uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

std::string idx_prefix(const std::string& split) {
  if (split == "train") return "train";
  if (split == "test" || split == "t10k") return "t10k";
  throw DataError("IDX splits are 'train' or 'test', got '" + split + "'");
}

Dataset slice_range(Dataset d, int64_t begin, int64_t end) {
  const int64_t n = d.size();
  const int64_t stop = end < 0 ? n : std::min(end, n);
  if (begin < 0 || begin > stop) throw DataError("index range outside the split");
  d.images = d.images.slice(0, begin, stop).contiguous();
  if (!d.labels.empty()) d.labels = std::vector<int64_t>(d.labels.begin() + begin, d.labels.begin() + stop);
  return d;
}

Dataset load_idx_digits(const DatasetSpec& spec) {
  const auto prefix = idx_prefix(spec.split);
  const auto image_path = spec.root / (prefix + "-images-idx3-ubyte");
  const auto label_path = spec.root / (prefix + "-labels-idx1-ubyte");
  const auto images = read_idx(image_path);
  if (images.dims.size() != 3) throw DataError("IDX image file must be 3-dimensional", image_path.string());
  const int64_t n = images.dims[0], h = images.dims[1], w = images.dims[2];

  Dataset d;
  auto pixels = torch::from_blob(const_cast<uint8_t*>(images.data.data()), {n, 1, h, w}, torch::kUInt8).clone();
  d.images = conform_images(from_uint8(pixels), spec.resolution, spec.channels);
  if (fs::exists(label_path)) {
    const auto labels = read_idx(label_path);
    if (labels.dims.size() != 1 || labels.dims[0] != n) {
      throw DataError("IDX label count does not match image count", label_path.string());
    }
    d.labels.assign(labels.data.begin(), labels.data.end());
  }
  return d;
}

Dataset load_image_folder(const DatasetSpec& spec) {
  const auto dir = spec.root / spec.split;
  if (!fs::is_directory(dir)) throw DataError("image folder does not exist", dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no PNG images in split", dir.string());

  Dataset d;
  std::vector<torch::Tensor> images;
  bool labelled = true;
  std::vector<int64_t> labels;
  for (const auto& f : files) {
    auto img = read_png(f, spec.channels);
    images.push_back(conform_images(img.unsqueeze(0), spec.resolution, spec.channels));
    const auto parent = f.parent_path() == dir ? std::string{} : f.parent_path().filename().string();
    try {
      size_t used = 0;
      const auto label = parent.empty() ? -1 : std::stoll(parent, &used);
      if (parent.empty() || used != parent.size()) labelled = false;
      labels.push_back(label);
    } catch (const std::exception&) {
      labelled = false;
    }
  }
  d.images = torch::cat(images, 0);
  if (labelled) d.labels = std::move(labels);
  return d;
}

}  // namespace

void DatasetSpec::validate() const {
  if (resolution < 32 || !std::has_single_bit(static_cast<uint64_t>(resolution))) {
    throw ConfigurationError("dataset resolution must be a power of two >= 32");
  }
  if (channels != 1 && channels != 3) throw ConfigurationError("dataset channels must be 1 or 3");
  if (begin < 0 || (end >= 0 && end < begin)) throw ConfigurationError("invalid dataset index range");
}

torch::Tensor Dataset::label_tensor() const {
  return torch::tensor(labels, torch::kLong);
}

std::vector<int64_t> Dataset::order(uint64_t seed, int64_t epoch) const {
  std::vector<int64_t> idx(static_cast<size_t>(size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(epoch));
  // Fisher-Yates with explicit modulo draws so the order is stable across standard libraries
  for (size_t i = idx.size(); i > 1; --i) {
    const auto j = static_cast<size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

torch::Tensor Dataset::gather(std::span<const int64_t> indices) const {
  auto index = torch::from_blob(const_cast<int64_t*>(indices.data()), {static_cast<int64_t>(indices.size())},
                                torch::kLong);
  return images.index_select(0, index);
}

Dataset Dataset::head(int64_t count) const { return slice_range(*this, 0, std::min(count, size())); }

Dataset load_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset d = spec.kind == SourceKind::kIdxDigits ? load_idx_digits(spec) : load_image_folder(spec);
  d = slice_range(std::move(d), spec.begin, spec.end);
  if (d.size() == 0) throw DataError("dataset split is empty", spec.root.string());
  return d;
}

void check_disjoint(const DatasetSpec& a, const DatasetSpec& b) {
  if (a.kind != b.kind || a.root != b.root || a.split != b.split) return;
  const auto a_end = a.end < 0 ? INT64_MAX : a.end;
  const auto b_end = b.end < 0 ? INT64_MAX : b.end;
  if (a.begin < b_end && b.begin < a_end) throw DataError("dataset splits overlap", a.root.string());
}

IdxArray read_idx(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open IDX file", path.string());
  const uint32_t magic = read_be32(in, path);
  if ((magic >> 8) != 0x08) throw DataError("IDX file is not unsigned-byte typed", path.string());
  const uint32_t rank = magic & 0xFF;
  if (rank == 0 || rank > 4) throw DataError("IDX rank out of range", path.string());
  IdxArray out;
  size_t count = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const auto d = read_be32(in, path);
    out.dims.push_back(static_cast<int32_t>(d));
    count *= d;
  }
  out.data.resize(count);
  if (!in.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(count))) {
    throw DataError("truncated IDX payload", path.string());
  }
  return out;
}

void write_idx(const IdxArray& array, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write IDX file", path.string());
  write_be32(out, 0x0800u | static_cast<uint32_t>(array.dims.size()));
  for (auto d : array.dims) write_be32(out, static_cast<uint32_t>(d));
  out.write(reinterpret_cast<const char*>(array.data.data()), static_cast<std::streamsize>(array.data.size()));
}

torch::Tensor conform_images(const torch::Tensor& images, int64_t resolution, int64_t channels) {
  GHFEAT_EXPECT(images.dim() == 4, "conform_images expects [N, C, H, W]");
  auto x = images;
  if (x.size(1) != channels) {
    if (x.size(1) == 1) {
      x = x.expand({-1, channels, -1, -1}).contiguous();
    } else if (channels == 1) {
      x = (0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2)).unsqueeze(1);
    } else {
      throw ContractViolation("cannot map image channels");
    }
  }
  const int64_t h = x.size(2), w = x.size(3);
  if (h == resolution && w == resolution) return x.contiguous();
  if (h <= resolution && w <= resolution && (resolution - h) % 2 == 0 && (resolution - w) % 2 == 0) {
    const int64_t ph = (resolution - h) / 2, pw = (resolution - w) / 2;
    return F::pad(x, F::PadFuncOptions({pw, pw, ph, ph}).value(-1.0)).contiguous();
  }
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{resolution, resolution})
                               .mode(torch::kBilinear)
                               .align_corners(false))
      .clamp(-1.0, 1.0)
      .contiguous();
}

ImportSummary import_digit_json(const fs::path& json_dir, const fs::path& out_dir, int64_t test_every) {
  GHFEAT_EXPECT(test_every >= 2, "test_every must be at least 2");
  constexpr int64_t side = 28, pixels = side * side;
  std::vector<uint8_t> train_x, test_x, train_y, test_y;
  for (int digit = 0; digit < 10; ++digit) {
    const auto path = json_dir / (std::to_string(digit) + ".json");
    std::ifstream in(path);
    if (!in) throw DataError("missing digit file", path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception&) {
      throw DataError("digit file is not valid JSON", path.string());
    }
    const auto& data = j.at("data");
    if (data.size() % pixels != 0) throw DataError("digit file size is not a multiple of 784", path.string());
    const int64_t n = static_cast<int64_t>(data.size()) / pixels;
    for (int64_t i = 0; i < n; ++i) {
      const bool test = (i % test_every) == test_every - 1;
      auto& xs = test ? test_x : train_x;
      auto& ys = test ? test_y : train_y;
      for (int64_t p = 0; p < pixels; ++p) {
        const double v = data[static_cast<size_t>(i * pixels + p)].get<double>();
        xs.push_back(static_cast<uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)));
      }
      ys.push_back(static_cast<uint8_t>(digit));
    }
  }

  // interleave classes with a fixed permutation so prefixes are class-balanced
  auto shuffle_pairs = [](std::vector<uint8_t>& xs, std::vector<uint8_t>& ys, uint64_t seed) {
    const auto n = ys.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::mt19937_64 rng(seed);
    for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[static_cast<size_t>(rng() % i)]);
    std::vector<uint8_t> x2(xs.size()), y2(n);
    for (size_t k = 0; k < n; ++k) {
      y2[k] = ys[idx[k]];
      std::copy_n(xs.begin() + static_cast<std::ptrdiff_t>(idx[k] * pixels), pixels,
                  x2.begin() + static_cast<std::ptrdiff_t>(k * pixels));
    }
    xs.swap(x2);
    ys.swap(y2);
  };
  shuffle_pairs(train_x, train_y, 1);
  shuffle_pairs(test_x, test_y, 2);

  auto n_train = static_cast<int32_t>(train_y.size()), n_test = static_cast<int32_t>(test_y.size());
  write_idx({{n_train, side, side}, train_x}, out_dir / "train-images-idx3-ubyte");
  write_idx({{n_train}, train_y}, out_dir / "train-labels-idx1-ubyte");
  write_idx({{n_test, side, side}, test_x}, out_dir / "t10k-images-idx3-ubyte");
  write_idx({{n_test}, test_y}, out_dir / "t10k-labels-idx1-ubyte");
  return {n_train, n_test};
}

}  // namespace ghfeat
