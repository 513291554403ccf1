#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ghfeat/generator.hpp"

namespace ghfeat {

struct StagePlan {
  int64_t channels = 0;  // output channels of the stage
  int64_t blocks = 1;
  int64_t stride = 1;

  bool operator==(const StagePlan&) const = default;
};

/// Contiguous, inclusive range of hierarchy levels fed by one terminal stage.
struct HeadPlan {
  int64_t first_level = 1;
  int64_t last_level = 1;

  bool operator==(const HeadPlan&) const = default;
};

enum class Representation {
  kStyle,   // per-layer (scale, bias) codes
  kLatent,  // single w code pushed through the generator's affine heads
};

struct EncoderSpec {
  int64_t input_resolution = 32;
  int64_t input_channels = 1;

  int64_t stem_channels = 16;
  int64_t stem_kernel = 3;
  int64_t stem_stride = 1;
  bool stem_pool = false;

  // Bottleneck blocks use channels / 4 as the inner width.
  bool bottleneck = false;
  // res2 .. res6; the last three are R4, R5, R6.
  std::vector<StagePlan> stages;

  int64_t sam_channels = 32;
  std::array<HeadPlan, 3> heads{};
  Representation representation = Representation::kStyle;

  // Checks head coverage and channel plan against a generator.
  void validate(const GeneratorSpec& generator) const;
  // FC output width of head h (0 = R4, 1 = R5, 2 = R6).
  int64_t head_output_dim(size_t head, const GeneratorSpec& generator) const;
  // Width of the flattened pooled map a head consumes.
  int64_t head_input_dim() const;
  // Spatial side of R4, R5, R6 for the configured input.
  std::array<int64_t, 3> terminal_resolutions() const;

  static EncoderSpec desk();
  // ResNet-50 pathway plus the extra res6 stage at 256x256 input.
  static EncoderSpec reference256();

  nlohmann::json to_json() const;
  static EncoderSpec from_json(const nlohmann::json& j);

  bool operator==(const EncoderSpec&) const = default;
};

std::string to_string(Representation r);
Representation representation_from_string(const std::string& s);

struct FeaturePyramid {
  torch::Tensor r4, r5, r6;
  // Filled by sam_fuse; all at R6's resolution with sam_channels channels.
  torch::Tensor fused4, fused5, projected6;

  bool fused() const { return fused4.defined(); }
};

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride, bool bottleneck);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(ResidualBlock);

class SpatialAlignmentImpl : public torch::nn::Module {
 public:
  SpatialAlignmentImpl(int64_t c4, int64_t c5, int64_t c6, int64_t out_channels);

  // fused_i = proj_i(avgpool(R_i -> R6 size)) + proj_6(R6), i in {4, 5}
  FeaturePyramid forward(FeaturePyramid pyramid);

  torch::nn::Conv2d proj4{nullptr}, proj5{nullptr}, proj6{nullptr};
};
TORCH_MODULE(SpatialAlignment);

class EncoderImpl : public torch::nn::Module {
 public:
  EncoderImpl(EncoderSpec spec, GeneratorSpec generator);

  const EncoderSpec& spec() const { return spec_; }
  const GeneratorSpec& generator_spec() const { return generator_; }

  FeaturePyramid backbone_forward(const torch::Tensor& image);
  FeaturePyramid sam_fuse(FeaturePyramid pyramid);
  StyleCodeHierarchy heads_forward(const FeaturePyramid& pyramid);

  StyleCodeHierarchy encode(const torch::Tensor& image);
  LatentCode encode_w(const torch::Tensor& image);

  // Styles for either representation; LATENT encoders go through the
  // generator's affine heads.
  StyleCodeHierarchy encode_styles(const torch::Tensor& image, GeneratorImpl& generator);

  torch::nn::Linear& head(size_t i) { return heads_.at(i); }
  torch::nn::Linear& latent_head() { return latent_head_; }
  SpatialAlignment& sam() { return sam_; }

 private:
  void check_input(const torch::Tensor& image) const;
  torch::Tensor pooled(const torch::Tensor& map) const;

  EncoderSpec spec_;
  GeneratorSpec generator_;
  torch::nn::Sequential stem_{nullptr};
  std::vector<torch::nn::Sequential> stages_;
  SpatialAlignment sam_{nullptr};
  std::vector<torch::nn::Linear> heads_;
  torch::nn::Linear latent_head_{nullptr};
};
TORCH_MODULE(Encoder);

}  // namespace ghfeat
