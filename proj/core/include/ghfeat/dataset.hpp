#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ghfeat {

enum class SourceKind { kIdxDigits, kImageFolder };

/// Where images come from and how they are shaped.
///
/// IDX_DIGITS reads `<root>/<prefix>-images-idx3-ubyte` and the matching
/// labels file, with prefix "train" or "t10k" for the train and test splits.
/// IMAGE_FOLDER reads `<root>/<split>/**/*.png`; an integer-named parent
/// directory becomes the label.
struct DatasetSpec {
  SourceKind kind = SourceKind::kIdxDigits;
  std::filesystem::path root;
  std::string split = "train";
  int64_t resolution = 32;
  int64_t channels = 1;
  // Half-open index range inside the split; end < 0 means "to the end".
  int64_t begin = 0;
  int64_t end = -1;

  void validate() const;
};

struct Dataset {
  torch::Tensor images;         // [N, C, R, R] in [-1, 1]
  std::vector<int64_t> labels;  // empty when the source has none

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  bool has_labels() const { return !labels.empty(); }
  torch::Tensor label_tensor() const;

  // Deterministic shuffled order for (seed, epoch).
  std::vector<int64_t> order(uint64_t seed, int64_t epoch) const;
  torch::Tensor gather(std::span<const int64_t> indices) const;
  Dataset head(int64_t count) const;
};

Dataset load_dataset(const DatasetSpec& spec);

// Throws DataError unless the two index ranges of one split are disjoint.
void check_disjoint(const DatasetSpec& a, const DatasetSpec& b);

struct IdxArray {
  std::vector<int32_t> dims;
  std::vector<uint8_t> data;
};

IdxArray read_idx(const std::filesystem::path& path);
void write_idx(const IdxArray& array, const std::filesystem::path& path);

// Pads (centered, background -1) or resizes [N,C,H,W] images to a square
// resolution, replicating or averaging channels to reach `channels`.
torch::Tensor conform_images(const torch::Tensor& images, int64_t resolution, int64_t channels);

struct ImportSummary {
  int64_t train = 0;
  int64_t test = 0;
};

/// Converts per-digit JSON files (`0.json` .. `9.json`, each {"data": [...]}
/// of 28x28 grayscale values in [0, 1]) into IDX train/t10k files.
/// Every `test_every`-th sample of each digit goes to the test split.
ImportSummary import_digit_json(const std::filesystem::path& json_dir, const std::filesystem::path& out_dir,
                                int64_t test_every = 5);

}  // namespace ghfeat
