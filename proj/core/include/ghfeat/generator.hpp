#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace ghfeat {

/// Shape contract shared by the generator, the encoder heads and every
/// consumer of style codes. Layers are numbered 1..L from the 4x4 input end.
struct GeneratorSpec {
  int64_t base_resolution = 4;
  int64_t output_resolution = 32;
  std::vector<int64_t> per_layer_channels;
  int64_t latent_dim = 64;
  int64_t mapping_depth = 4;
  int64_t image_channels = 1;

  int64_t layer_count() const { return static_cast<int64_t>(per_layer_channels.size()); }
  int64_t channels(int64_t layer) const;
  int64_t resolution(int64_t layer) const;
  // Sum over layers of 2 * channels: the length of a flattened hierarchy.
  int64_t style_dim() const;

  // Throws ConfigurationError when the two-conv-per-block layer formula or
  // channel list does not hold.
  void validate() const;

  // 32x32 single-channel model used for the digit experiments.
  static GeneratorSpec desk();
  // 14-layer 256x256 layout whose style dimensions match the reference
  // encoder table (512 channels up to 32x32, then 256, 128, 64).
  static GeneratorSpec reference256();

  nlohmann::json to_json() const;
  static GeneratorSpec from_json(const nlohmann::json& j);

  bool operator==(const GeneratorSpec&) const = default;
};

int64_t expected_layer_count(int64_t base_resolution, int64_t output_resolution);

/// level 1 is the most concrete code (the last generator layer).
int64_t level_to_layer(int64_t level, int64_t layer_count);
inline int64_t layer_to_level(int64_t layer, int64_t layer_count) {
  return level_to_layer(layer, layer_count);
}

enum class LatentKind { Z, W };

struct LatentCode {
  LatentKind kind = LatentKind::Z;
  torch::Tensor values;  // [N, latent_dim]

  static LatentCode sample(int64_t count, int64_t latent_dim, uint64_t seed);
};

struct StylePair {
  torch::Tensor scale;  // [N, C]
  torch::Tensor bias;   // [N, C]
};

/// Per-layer AdaIN codes for a batch of N images.
class StyleCodeHierarchy {
 public:
  StyleCodeHierarchy() = default;
  explicit StyleCodeHierarchy(std::vector<StylePair> layers);

  int64_t layer_count() const { return static_cast<int64_t>(layers_.size()); }
  int64_t batch_size() const;

  const StylePair& layer(int64_t layer) const;
  StylePair& layer(int64_t layer);
  const StylePair& level(int64_t level) const;
  StylePair& level(int64_t level);

  // scale || bias for one level: [N, 2C].
  torch::Tensor level_features(int64_t level) const;
  // Concatenation of level_features over levels 1..L: [N, style_dim].
  torch::Tensor flatten() const;
  static StyleCodeHierarchy unflatten(const torch::Tensor& flat, const GeneratorSpec& spec);

  StyleCodeHierarchy detach() const;
  StyleCodeHierarchy clone() const;
  StyleCodeHierarchy rows(int64_t begin, int64_t end) const;
  static StyleCodeHierarchy concat(std::span<const StyleCodeHierarchy> parts);

  // Throws ContractViolation if entries do not match the spec widths.
  void check(const GeneratorSpec& spec) const;

 private:
  std::vector<StylePair> layers_;
};

/// Replaces part of one layer's post-AdaIN feature map during synthesis.
struct SpatialFeatureOverride {
  int64_t layer = 1;
  torch::Tensor mask;  // [H, W] or [N, 1, H, W], values in {0, 1}
  std::variant<torch::Tensor, StyleCodeHierarchy> replacement;
};

/// AdaIN with population statistics over H x W and an epsilon on sigma.
/// Accepts x as [N, C, H, W] with [N, C] codes or [C, H, W] with [C] codes.
torch::Tensor adain(const torch::Tensor& x, const torch::Tensor& scale, const torch::Tensor& bias);

inline constexpr double kAdainEpsilon = 1e-8;

struct SynthesisTrace {
  torch::Tensor image;
  std::vector<torch::Tensor> post_adain;  // one per layer, after any override
};

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorSpec spec);

  const GeneratorSpec& spec() const { return spec_; }

  LatentCode map_latent(const LatentCode& z);
  StyleCodeHierarchy style_codes_from_w(const LatentCode& w);

  torch::Tensor synthesize(const StyleCodeHierarchy& styles,
                           std::span<const SpatialFeatureOverride> overrides = {});
  SynthesisTrace synthesize_traced(const StyleCodeHierarchy& styles,
                                   std::span<const SpatialFeatureOverride> overrides = {},
                                   int64_t stop_after_layer = 0);

  // Native z -> image path: styles are produced inline, layer by layer.
  torch::Tensor generate(const LatentCode& z);

  torch::nn::Linear& scale_head(int64_t layer) { return scale_heads_.at(layer - 1); }
  torch::nn::Linear& bias_head(int64_t layer) { return bias_heads_.at(layer - 1); }
  std::vector<torch::nn::Linear>& mapping_layers() { return mapping_; }

 private:
  torch::Tensor layer_input(int64_t layer, const torch::Tensor& previous, int64_t batch) const;
  torch::Tensor apply_layer(int64_t layer, const torch::Tensor& input, const StylePair& style);

  GeneratorSpec spec_;
  torch::Tensor const_input_;
  std::vector<torch::nn::Linear> mapping_;
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::Linear> scale_heads_;
  std::vector<torch::nn::Linear> bias_heads_;
  torch::nn::Conv2d to_image_{nullptr};
};
TORCH_MODULE(Generator);

inline constexpr double kLeakySlope = 0.2;

}  // namespace ghfeat
