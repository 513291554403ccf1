#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ghfeat/encoder.hpp"
#include "ghfeat/generator.hpp"

namespace ghfeat {

/// Flat key/value document (one `key: value` per line, `#` comments).
using KeyValues = std::map<std::string, std::string>;

KeyValues read_key_values(const std::filesystem::path& path);
KeyValues parse_key_values(const std::string& text);
std::string format_key_values(const KeyValues& kv);

struct LossWeights {
  double lambda1 = 0.1;   // adversarial
  double lambda2 = 5e-5;  // perceptual
  double lambda3 = 5.0;   // gradient penalty on real samples

  void validate() const;
};

struct OptimizerConfig {
  double beta1 = 0.0;
  double beta2 = 0.99;
};

enum class GeneratorMode { kFrozen, kJointFromScratch };
enum class PerceptualMode { kPretrainedExtractor, kFixedRandomExtractor, kDisabled };
// kCritic is the literal critic objective; kLogistic swaps in softplus terms.
enum class AdversarialForm { kCritic, kLogistic };

std::string to_string(GeneratorMode m);
std::string to_string(PerceptualMode m);
std::string to_string(AdversarialForm f);

struct TrainConfig {
  LossWeights loss_weights;
  OptimizerConfig optimizer;
  double base_lr = 1e-4;
  double lr_decay_factor = 0.8;
  int64_t batch_size = 64;
  int64_t epochs = 10;
  // 0 means one pass over the training set per epoch.
  int64_t steps_per_epoch = 0;
  GeneratorMode generator_mode = GeneratorMode::kFrozen;
  PerceptualMode perceptual_mode = PerceptualMode::kFixedRandomExtractor;
  std::string perceptual_archive;
  AdversarialForm adversarial_form = AdversarialForm::kCritic;
  std::vector<int64_t> discriminator_channels{16, 32, 64, 64};
  EncoderSpec encoder = EncoderSpec::desk();
  uint64_t seed = 1;
  int64_t eval_samples = 256;
  int64_t checkpoint_every = 1;

  void validate() const;
  KeyValues to_key_values() const;
  static TrainConfig from_key_values(const KeyValues& kv);
  static TrainConfig load(const std::filesystem::path& path);
};

struct PretrainConfig {
  GeneratorSpec generator = GeneratorSpec::desk();
  std::vector<int64_t> discriminator_channels{16, 32, 64, 64};
  OptimizerConfig optimizer;
  double base_lr = 1e-3;
  double lr_decay_factor = 1.0;
  double r1_weight = 5.0;
  // Mapping-network learning rate relative to base_lr.
  double mapping_lr_multiplier = 0.01;
  int64_t batch_size = 64;
  int64_t epochs = 20;
  int64_t steps_per_epoch = 0;
  uint64_t seed = 1;
  int64_t checkpoint_every = 1;

  void validate() const;
  KeyValues to_key_values() const;
  static PretrainConfig from_key_values(const KeyValues& kv);
  static PretrainConfig load(const std::filesystem::path& path);
};

}  // namespace ghfeat
