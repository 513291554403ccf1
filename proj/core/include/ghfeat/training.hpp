#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ghfeat/archive.hpp"
#include "ghfeat/config.hpp"
#include "ghfeat/dataset.hpp"
#include "ghfeat/encoder.hpp"
#include "ghfeat/generator.hpp"

namespace ghfeat {

/// Residual-free conv critic: 1x1 input projection, then one conv + 2x
/// average-pool block per channel step down to 4x4, then a linear score.
/// `channels` needs log2(resolution / 4) + 1 entries.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  DiscriminatorImpl(int64_t image_channels, int64_t resolution, std::vector<int64_t> channels);
  torch::Tensor forward(const torch::Tensor& images);  // [N]

  int64_t resolution() const { return resolution_; }

 private:
  int64_t resolution_;
  torch::nn::Conv2d from_image_{nullptr};
  std::vector<torch::nn::Conv2d> blocks_;
  torch::nn::Linear score_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Fixed convolutional feature function F for the perceptual term.
class PerceptualExtractorImpl : public torch::nn::Module {
 public:
  static constexpr const char* kTapPoint = "conv3";

  PerceptualExtractorImpl(int64_t image_channels, uint64_t seed);
  torch::Tensor forward(const torch::Tensor& images);
};
TORCH_MODULE(PerceptualExtractor);

using Critic = std::function<torch::Tensor(const torch::Tensor&)>;
using FeatureFn = std::function<torch::Tensor(const torch::Tensor&)>;

// Weighted terms; total == reconstruction + adversarial + perceptual.
struct EncoderLossTerms {
  torch::Tensor total;
  torch::Tensor reconstruction;
  torch::Tensor adversarial;
  torch::Tensor perceptual;
};

// reconstruction = mean (x - rec)^2
// adversarial    = -lambda1 * mean D(rec)            (critic form)
//                = lambda1 * mean softplus(-D(rec))   (logistic form)
// perceptual     = lambda2 * mean (F(x) - F(rec))^2
// `features` may be empty only when lambda2 == 0.
EncoderLossTerms encoder_loss(const torch::Tensor& x, const torch::Tensor& rec, const Critic& critic,
                              const FeatureFn& features, const LossWeights& weights,
                              AdversarialForm form = AdversarialForm::kCritic);

struct DiscriminatorLossTerms {
  torch::Tensor total;
  torch::Tensor fake;     // mean D(rec), or mean softplus(D(rec))
  torch::Tensor real;     // -mean D(x), or mean softplus(-D(x))
  torch::Tensor penalty;  // lambda3 * mean ||grad_x D(x)||^2
};

DiscriminatorLossTerms discriminator_loss(const torch::Tensor& x, const torch::Tensor& rec, const Critic& critic,
                                          const LossWeights& weights,
                                          AdversarialForm form = AdversarialForm::kCritic);

// Batch mean of the squared L2 norm of dD/dx at `x`; keeps the graph so the
// result can be differentiated w.r.t. the critic's parameters.
torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& x);

double lr_schedule(double base_lr, double decay_factor, int64_t epoch);
inline double lr_schedule(int64_t epoch) { return lr_schedule(1e-4, 0.8, epoch); }

/// Endless stream of index batches: shuffled passes over the dataset, each
/// pass ordered by Dataset::order(seed, pass). Incomplete tails are dropped.
class BatchSampler {
 public:
  BatchSampler(const Dataset& data, int64_t batch_size, uint64_t seed);
  std::vector<int64_t> next();

 private:
  const Dataset* data_;
  int64_t batch_size_;
  uint64_t seed_;
  int64_t pass_ = 0;
  size_t cursor_ = 0;
  std::vector<int64_t> order_;
};

struct EpochRecord {
  int64_t epoch = 0;
  int64_t step = 0;  // global step at the end of the epoch
  double lr = 0.0;
  double reconstruction = 0.0;
  double adversarial = 0.0;
  double perceptual = 0.0;
  double encoder_total = 0.0;
  double discriminator_total = 0.0;
  double penalty = 0.0;
  std::optional<double> eval_mse;
  std::optional<double> eval_ssim;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct StepRecord {
  double reconstruction = 0.0;
  double adversarial = 0.0;
  double perceptual = 0.0;
  double encoder_total = 0.0;
  double discriminator_total = 0.0;
  double penalty = 0.0;
};

struct RunOptions {
  // Checkpoints, metrics.jsonl and snapshots go here; empty disables files.
  std::filesystem::path out_dir;
  // Stops after this many steps in total when > 0, regardless of epochs.
  int64_t max_steps = 0;
  std::function<void(const EpochRecord&)> on_epoch;
  bool verbose = false;
};

/// Owns encoder, discriminator and generator for one encoder training run and
/// performs one encoder step followed by one discriminator step per batch.
class EncoderTrainer {
 public:
  // `generator_archive` supplies the generator (and its spec). In FROZEN mode
  // its weights are used as-is; in JOINT_FROM_SCRATCH mode only its spec is.
  EncoderTrainer(TrainConfig config, const ParameterArchive& generator_archive);

  // Throws TrainingDiverged after writing a snapshot when a loss is not finite.
  StepRecord step(const torch::Tensor& real);
  void set_epoch(int64_t epoch);
  // Where divergence snapshots go; defaults to the system temp directory.
  void set_output_dir(std::filesystem::path dir) { out_dir_ = std::move(dir); }

  torch::Tensor reconstruct(const torch::Tensor& images);

  Encoder& encoder() { return encoder_; }
  Generator& generator() { return generator_; }
  Discriminator& discriminator() { return discriminator_; }
  const TrainConfig& config() const { return config_; }
  int64_t global_step() const { return step_; }
  double current_lr() const { return lr_; }

  // Encoder, generator and discriminator weights plus run metadata.
  ParameterArchive snapshot() const;

  // Generator digest recorded at construction.
  const std::string& initial_generator_digest() const { return generator_digest_; }

 private:
  TrainConfig config_;
  Generator generator_{nullptr};
  Encoder encoder_{nullptr};
  Discriminator discriminator_{nullptr};
  PerceptualExtractor extractor_{nullptr};
  std::unique_ptr<torch::optim::Adam> encoder_opt_;
  std::unique_ptr<torch::optim::Adam> discriminator_opt_;
  std::string generator_digest_;
  std::string extractor_digest_;
  std::filesystem::path out_dir_;
  int64_t step_ = 0;
  int64_t epoch_ = 0;
  double lr_ = 0.0;
};

struct TrainResult {
  ParameterArchive archive;
  std::vector<EpochRecord> history;
  std::string generator_digest_before;
  std::string generator_digest_after;
};

TrainResult train_encoder(const TrainConfig& config, const Dataset& train, const Dataset& eval,
                          const ParameterArchive& generator_archive, const RunOptions& options = {});

/// Fixed-resolution GAN pretraining: non-saturating logistic loss with the
/// real-sample gradient penalty; writes a sample grid per epoch.
class GanTrainer {
 public:
  explicit GanTrainer(PretrainConfig config);

  // Returns (generator loss, discriminator loss, penalty).
  std::array<double, 3> step(const torch::Tensor& real);
  void set_epoch(int64_t epoch);
  void set_output_dir(std::filesystem::path dir) { out_dir_ = std::move(dir); }
  torch::Tensor samples(int64_t count, uint64_t seed);

  Generator& generator() { return generator_; }
  Discriminator& discriminator() { return discriminator_; }
  int64_t global_step() const { return step_; }
  ParameterArchive snapshot() const;

 private:
  PretrainConfig config_;
  Generator generator_{nullptr};
  Discriminator discriminator_{nullptr};
  std::unique_ptr<torch::optim::Adam> g_opt_;
  std::unique_ptr<torch::optim::Adam> d_opt_;
  std::filesystem::path out_dir_;
  int64_t step_ = 0;
  int64_t epoch_ = 0;
  double lr_ = 0.0;
};

struct PretrainResult {
  ParameterArchive archive;
  std::vector<nlohmann::json> history;
};

PretrainResult pretrain_generator(const PretrainConfig& config, const Dataset& train, const RunOptions& options = {});

}  // namespace ghfeat
