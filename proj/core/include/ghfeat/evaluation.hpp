#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ghfeat/generator.hpp"

namespace ghfeat {

// ---------------------------------------------------------------------------
// Reconstruction metrics

struct MetricTriple {
  double mse = 0.0;
  double ssim = 1.0;
  double fid = 0.0;
  // Set when the sample count was too small for a full-rank covariance.
  bool fid_regularized = false;
};

// Maps [N, C, H, W] images to [N, D] features.
using Embedder = std::function<torch::Tensor(const torch::Tensor&)>;

double mean_squared_error(const torch::Tensor& a, const torch::Tensor& b);

// SSIM with a 7x7 uniform window, K1 = 0.01, K2 = 0.03, sample covariance and
// data range 2 (images in [-1, 1]). RGB inputs are compared on luminance.
// Returns one value per image for [N, C, H, W] input.
torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b);
double ssim(const torch::Tensor& a, const torch::Tensor& b);

struct GaussianFit {
  torch::Tensor mean;  // [D], float64
  torch::Tensor cov;   // [D, D], float64
  bool regularized = false;
};

GaussianFit fit_gaussian(const torch::Tensor& features);
double frechet_distance(const GaussianFit& a, const GaussianFit& b);

struct FidResult {
  double value = 0.0;
  bool regularized = false;
};

FidResult frechet_inception_distance(const torch::Tensor& a, const torch::Tensor& b, const Embedder& embed);

MetricTriple reconstruction_metrics(const torch::Tensor& real, const torch::Tensor& reconstructed,
                                    const Embedder& embed);

/// Small convolutional feature network with frozen seeded weights, used as
/// the FID embedder at desk scale.
class FixedEmbedderImpl : public torch::nn::Module {
 public:
  FixedEmbedderImpl(int64_t image_channels, uint64_t seed);
  torch::Tensor forward(const torch::Tensor& images);

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(FixedEmbedder);

Embedder make_fixed_embedder(int64_t image_channels, uint64_t seed = 2024);

// Mean of BT.601 luma mapped from [-1, 1] to [0, 1]. Single-channel images
// are treated as luma already.
double luminance(const torch::Tensor& image);
torch::Tensor luminance_batch(const torch::Tensor& images);

// ---------------------------------------------------------------------------
// Linear probes

enum class TaskKind { kClassification, kRegressionL1, kRegressionL2 };
enum class MetricKind { kAccuracy, kL1Error, kMse };

MetricKind metric_for(TaskKind kind);
bool higher_is_better(MetricKind kind);
std::string to_string(MetricKind kind);

struct LinearProbe {
  TaskKind kind = TaskKind::kClassification;
  torch::Tensor feature_mean;  // standardization applied before the affine map
  torch::Tensor feature_scale;
  torch::Tensor weight;        // [outputs, D]
  torch::Tensor bias;          // [outputs]

  // Class indices for classification, values for regression.
  torch::Tensor predict(const torch::Tensor& features) const;
};

struct ProbeOptions {
  uint64_t seed = 0;
  double l2 = 1e-4;
  int64_t iterations = 300;
  double ridge = 1e-3;
};

struct ProbeResult {
  LinearProbe probe;
  MetricKind metric = MetricKind::kAccuracy;
  double score = 0.0;  // accuracy in percent or error on the held-out split
};

// Features are frozen; targets are class indices (long) or values (float).
ProbeResult train_linear_probe(const torch::Tensor& train_features, const torch::Tensor& train_targets,
                               const torch::Tensor& test_features, const torch::Tensor& test_targets,
                               TaskKind kind, const ProbeOptions& options = {});

double score_predictions(const torch::Tensor& predictions, const torch::Tensor& targets, MetricKind metric);

struct ProbeReport {
  std::string task_id;
  MetricKind metric = MetricKind::kAccuracy;
  std::vector<double> per_level;  // index 0 is level 1
  std::vector<double> grouping;   // prefix k uses levels L .. L-k+1
  std::optional<double> voting;

  // One JSON record per level, then strategy records.
  std::vector<nlohmann::json> records() const;
  bool better(double a, double b) const;
  // Throws ContractViolation when the per-level list is not L finite values.
  void check(int64_t layer_count) const;
};

/// One probe per level on that level's scale || bias vector.
ProbeReport level_sweep(const std::string& task_id, const StyleCodeHierarchy& train_codes,
                        const torch::Tensor& train_targets, const StyleCodeHierarchy& test_codes,
                        const torch::Tensor& test_targets, TaskKind kind, const ProbeOptions& options = {});

// ---------------------------------------------------------------------------
// Pair verification

enum class VerifyStrategy { kSingle, kGrouping, kVoting };

struct VerifySpec {
  VerifyStrategy strategy = VerifyStrategy::kVoting;
  // Level for kSingle, prefix length for kGrouping; unused for kVoting.
  int64_t parameter = 0;
};

struct PairSet {
  StyleCodeHierarchy first;
  StyleCodeHierarchy second;
  std::vector<bool> same;
};

struct Similarities {
  torch::Tensor values;  // [P], float64
  int64_t zero_norm = 0;
};

Similarities pair_similarities(const PairSet& pairs, const VerifySpec& spec);

struct VerificationResult {
  double accuracy = 0.0;  // percent on the evaluation split
  double threshold = 0.0;
  int64_t zero_norm = 0;
};

// Accuracy-maximizing threshold on `calibration`; pairs with similarity
// strictly above it are classified "same".
double fit_threshold(const torch::Tensor& similarities, const std::vector<bool>& same);
double threshold_accuracy(const torch::Tensor& similarities, const std::vector<bool>& same, double threshold);

VerificationResult verify_pairs(const PairSet& calibration, const PairSet& evaluation, const VerifySpec& spec);

}  // namespace ghfeat
