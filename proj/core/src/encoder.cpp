#include "ghfeat/encoder.hpp"

#include <algorithm>
#include <numeric>

#include "ghfeat/errors.hpp"

namespace ghfeat {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

constexpr int64_t kHeadPool = 4;

// Appends conv-BN(-ReLU) to a flat sequence; libtorch cannot nest Sequentials.
void add_conv_bn(nn::Sequential& seq, int64_t in, int64_t out, int64_t kernel, int64_t stride, bool relu) {
  seq->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).bias(false)));
  seq->push_back(nn::BatchNorm2d(out));
  if (relu) seq->push_back(nn::ReLU());
}

nn::Sequential conv_bn(int64_t in, int64_t out, int64_t kernel, int64_t stride, bool relu) {
  nn::Sequential seq;
  add_conv_bn(seq, in, out, kernel, stride, relu);
  return seq;
}

}  // namespace

std::string to_string(Representation r) { return r == Representation::kStyle ? "STYLE" : "LATENT"; }

Representation representation_from_string(const std::string& s) {
  if (s == "STYLE" || s == "Y") return Representation::kStyle;
  if (s == "LATENT" || s == "W") return Representation::kLatent;
  throw ConfigurationError("unknown representation: " + s);
}

// ---------------------------------------------------------------------------
// EncoderSpec

std::array<int64_t, 3> EncoderSpec::terminal_resolutions() const {
  if (stages.size() < 3) throw ConfigurationError("encoder needs at least three residual stages");
  int64_t r = input_resolution;
  r = (r + stem_stride - 1) / stem_stride;
  if (stem_pool) r = (r + 1) / 2;
  std::vector<int64_t> sizes;
  for (const auto& s : stages) {
    r = (r + s.stride - 1) / s.stride;
    sizes.push_back(r);
  }
  const auto n = sizes.size();
  return {sizes[n - 3], sizes[n - 2], sizes[n - 1]};
}

int64_t EncoderSpec::head_input_dim() const {
  const auto r6 = std::min(terminal_resolutions()[2], kHeadPool);
  return sam_channels * r6 * r6;
}

int64_t EncoderSpec::head_output_dim(size_t head, const GeneratorSpec& generator) const {
  const auto& plan = heads.at(head);
  int64_t dim = 0;
  for (int64_t level = plan.first_level; level <= plan.last_level; ++level) {
    dim += 2 * generator.channels(level_to_layer(level, generator.layer_count()));
  }
  return dim;
}

void EncoderSpec::validate(const GeneratorSpec& generator) const {
  generator.validate();
  if (input_resolution != generator.output_resolution) {
    throw ConfigurationError("encoder input resolution " + std::to_string(input_resolution) +
                             " differs from generator output " + std::to_string(generator.output_resolution));
  }
  if (input_channels != generator.image_channels) {
    throw ConfigurationError("encoder input channels differ from generator image channels");
  }
  if (stages.size() != 5) throw ConfigurationError("encoder expects five residual stages (res2..res6)");
  for (const auto& s : stages) {
    if (s.channels <= 0 || s.blocks <= 0 || s.stride <= 0) throw ConfigurationError("invalid stage plan");
    if (bottleneck && s.channels % 4 != 0) throw ConfigurationError("bottleneck stages need channels % 4 == 0");
  }
  if (sam_channels <= 0) throw ConfigurationError("sam_channels must be positive");
  if (terminal_resolutions()[2] < 1) throw ConfigurationError("input too small for the stage plan");

  const int64_t l = generator.layer_count();
  std::vector<int> covered(static_cast<size_t>(l + 1), 0);
  for (const auto& h : heads) {
    if (h.first_level < 1 || h.last_level > l || h.first_level > h.last_level) {
      throw ConfigurationError("head level range " + std::to_string(h.first_level) + "-" +
                               std::to_string(h.last_level) + " is invalid for " + std::to_string(l) + " levels");
    }
    for (int64_t lvl = h.first_level; lvl <= h.last_level; ++lvl) ++covered[static_cast<size_t>(lvl)];
  }
  for (int64_t lvl = 1; lvl <= l; ++lvl) {
    if (covered[static_cast<size_t>(lvl)] != 1) {
      throw ConfigurationError("head plan must cover every level exactly once (level " + std::to_string(lvl) + ")");
    }
  }
}

EncoderSpec EncoderSpec::desk() {
  EncoderSpec s;
  s.input_resolution = 32;
  s.input_channels = 1;
  s.stem_channels = 16;
  s.stem_kernel = 3;
  s.stem_stride = 1;
  s.stem_pool = false;
  s.bottleneck = false;
  // R4 16x16, R5 8x8, R6 4x4
  s.stages = {{16, 1, 1}, {32, 1, 2}, {64, 1, 1}, {128, 1, 2}, {128, 1, 2}};
  s.sam_channels = 32;
  s.heads = {HeadPlan{1, 4}, HeadPlan{5, 6}, HeadPlan{7, 8}};
  return s;
}

EncoderSpec EncoderSpec::reference256() {
  EncoderSpec s;
  s.input_resolution = 256;
  s.input_channels = 3;
  s.stem_channels = 64;
  s.stem_kernel = 7;
  s.stem_stride = 2;
  s.stem_pool = true;
  s.bottleneck = true;
  s.stages = {{256, 3, 1}, {512, 4, 2}, {1024, 6, 2}, {2048, 3, 2}, {2048, 1, 2}};
  s.sam_channels = 512;
  s.heads = {HeadPlan{1, 6}, HeadPlan{7, 10}, HeadPlan{11, 14}};
  return s;
}

nlohmann::json EncoderSpec::to_json() const {
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : stages) st.push_back({s.channels, s.blocks, s.stride});
  nlohmann::json hd = nlohmann::json::array();
  for (const auto& h : heads) hd.push_back({h.first_level, h.last_level});
  return {{"input_resolution", input_resolution}, {"input_channels", input_channels},
          {"stem_channels", stem_channels},       {"stem_kernel", stem_kernel},
          {"stem_stride", stem_stride},           {"stem_pool", stem_pool},
          {"bottleneck", bottleneck},             {"stages", st},
          {"sam_channels", sam_channels},         {"heads", hd},
          {"representation", to_string(representation)}};
}

EncoderSpec EncoderSpec::from_json(const nlohmann::json& j) {
  EncoderSpec s;
  s.input_resolution = j.at("input_resolution").get<int64_t>();
  s.input_channels = j.at("input_channels").get<int64_t>();
  s.stem_channels = j.at("stem_channels").get<int64_t>();
  s.stem_kernel = j.at("stem_kernel").get<int64_t>();
  s.stem_stride = j.at("stem_stride").get<int64_t>();
  s.stem_pool = j.at("stem_pool").get<bool>();
  s.bottleneck = j.at("bottleneck").get<bool>();
  s.stages.clear();
  for (const auto& st : j.at("stages")) s.stages.push_back({st.at(0).get<int64_t>(), st.at(1).get<int64_t>(), st.at(2).get<int64_t>()});
  const auto& hd = j.at("heads");
  if (hd.size() != 3) throw ConfigurationError("encoder spec needs exactly three heads");
  for (size_t i = 0; i < 3; ++i) s.heads[i] = {hd.at(i).at(0).get<int64_t>(), hd.at(i).at(1).get<int64_t>()};
  s.sam_channels = j.at("sam_channels").get<int64_t>();
  s.representation = representation_from_string(j.value("representation", std::string("STYLE")));
  return s;
}

// ---------------------------------------------------------------------------
// Blocks

ResidualBlockImpl::ResidualBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride, bool bottleneck) {
  if (bottleneck) {
    const int64_t inner = out_channels / 4;
    body_ = conv_bn(in_channels, inner, 1, 1, true);
    add_conv_bn(body_, inner, inner, 3, stride, true);
    add_conv_bn(body_, inner, out_channels, 1, 1, false);
  } else {
    body_ = conv_bn(in_channels, out_channels, 3, stride, true);
    add_conv_bn(body_, out_channels, out_channels, 3, 1, false);
  }
  register_module("body", body_);
  if (stride != 1 || in_channels != out_channels) {
    shortcut_ = register_module("shortcut", conv_bn(in_channels, out_channels, 1, stride, false));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto residual = shortcut_ ? shortcut_->forward(x) : x;
  return torch::relu(body_->forward(x) + residual);
}

SpatialAlignmentImpl::SpatialAlignmentImpl(int64_t c4, int64_t c5, int64_t c6, int64_t out_channels)
    : proj4(register_module("proj4", nn::Conv2d(nn::Conv2dOptions(c4, out_channels, 1)))),
      proj5(register_module("proj5", nn::Conv2d(nn::Conv2dOptions(c5, out_channels, 1)))),
      proj6(register_module("proj6", nn::Conv2d(nn::Conv2dOptions(c6, out_channels, 1)))) {}

FeaturePyramid SpatialAlignmentImpl::forward(FeaturePyramid p) {
  GHFEAT_EXPECT(p.r4.defined() && p.r5.defined() && p.r6.defined(), "SAM needs R4, R5 and R6");
  const std::vector<int64_t> target{p.r6.size(2), p.r6.size(3)};
  auto down = [&](const torch::Tensor& r) {
    return F::adaptive_avg_pool2d(r, F::AdaptiveAvgPool2dFuncOptions(target));
  };
  p.projected6 = proj6->forward(p.r6);
  p.fused4 = proj4->forward(down(p.r4)) + p.projected6;
  p.fused5 = proj5->forward(down(p.r5)) + p.projected6;
  return p;
}

// ---------------------------------------------------------------------------
// Encoder

EncoderImpl::EncoderImpl(EncoderSpec spec, GeneratorSpec generator)
    : spec_(std::move(spec)), generator_(std::move(generator)) {
  spec_.validate(generator_);

  stem_ = conv_bn(spec_.input_channels, spec_.stem_channels, spec_.stem_kernel, spec_.stem_stride, true);
  if (spec_.stem_pool) stem_->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
  register_module("stem", stem_);

  int64_t in = spec_.stem_channels;
  for (size_t i = 0; i < spec_.stages.size(); ++i) {
    const auto& plan = spec_.stages[i];
    nn::Sequential stage;
    for (int64_t b = 0; b < plan.blocks; ++b) {
      stage->push_back(ResidualBlock(in, plan.channels, b == 0 ? plan.stride : 1, spec_.bottleneck));
      in = plan.channels;
    }
    stages_.push_back(register_module("res" + std::to_string(i + 2), stage));
  }

  const auto n = spec_.stages.size();
  sam_ = register_module("sam", SpatialAlignment(spec_.stages[n - 3].channels, spec_.stages[n - 2].channels,
                                                 spec_.stages[n - 1].channels, spec_.sam_channels));

  const int64_t head_in = spec_.head_input_dim();
  if (spec_.representation == Representation::kStyle) {
    static const char* names[] = {"head4", "head5", "head6"};
    for (size_t h = 0; h < 3; ++h) {
      auto fc = register_module(names[h], nn::Linear(head_in, spec_.head_output_dim(h, generator_)));
      // scale slots start at 1 so the untrained encoder is near identity modulation
      torch::NoGradGuard no_grad;
      fc->bias.zero_();
      int64_t offset = 0;
      for (int64_t lvl = spec_.heads[h].first_level; lvl <= spec_.heads[h].last_level; ++lvl) {
        const int64_t c = generator_.channels(level_to_layer(lvl, generator_.layer_count()));
        fc->bias.narrow(0, offset, c).fill_(1.0);
        offset += 2 * c;
      }
      heads_.push_back(fc);
    }
  } else {
    latent_head_ = register_module("latent_head", nn::Linear(3 * head_in, generator_.latent_dim));
  }
}

void EncoderImpl::check_input(const torch::Tensor& image) const {
  GHFEAT_EXPECT(image.dim() == 4, "encoder input must be [N, C, H, W]");
  GHFEAT_EXPECT(image.size(1) == spec_.input_channels, "encoder input has wrong channel count");
  GHFEAT_EXPECT(image.size(2) == spec_.input_resolution && image.size(3) == spec_.input_resolution,
                "encoder expects " + std::to_string(spec_.input_resolution) + "px input, got " +
                    std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)));
}

FeaturePyramid EncoderImpl::backbone_forward(const torch::Tensor& image) {
  check_input(image);
  auto x = stem_->forward(image);
  std::vector<torch::Tensor> outputs;
  for (auto& stage : stages_) {
    x = stage->forward(x);
    outputs.push_back(x);
  }
  const auto n = outputs.size();
  FeaturePyramid p;
  p.r4 = outputs[n - 3];
  p.r5 = outputs[n - 2];
  p.r6 = outputs[n - 1];
  return p;
}

FeaturePyramid EncoderImpl::sam_fuse(FeaturePyramid pyramid) { return sam_->forward(std::move(pyramid)); }

torch::Tensor EncoderImpl::pooled(const torch::Tensor& map) const {
  auto m = map;
  if (m.size(2) > kHeadPool || m.size(3) > kHeadPool) {
    m = F::adaptive_avg_pool2d(m, F::AdaptiveAvgPool2dFuncOptions(std::vector<int64_t>{kHeadPool, kHeadPool}));
  }
  return m.flatten(1);
}

StyleCodeHierarchy EncoderImpl::heads_forward(const FeaturePyramid& pyramid) {
  if (spec_.representation != Representation::kStyle) {
    throw UnsupportedConfiguration("encoder was built with a LATENT head; style heads are unavailable");
  }
  GHFEAT_EXPECT(pyramid.fused(), "heads need SAM-fused feature maps");
  const torch::Tensor* sources[] = {&pyramid.fused4, &pyramid.fused5, &pyramid.projected6};
  const int64_t l = generator_.layer_count();
  std::vector<StylePair> layers(static_cast<size_t>(l));
  for (size_t h = 0; h < 3; ++h) {
    const auto out = heads_[h]->forward(pooled(*sources[h]));
    int64_t offset = 0;
    for (int64_t lvl = spec_.heads[h].first_level; lvl <= spec_.heads[h].last_level; ++lvl) {
      const int64_t layer = level_to_layer(lvl, l);
      const int64_t c = generator_.channels(layer);
      layers[static_cast<size_t>(layer - 1)] = {out.narrow(1, offset, c), out.narrow(1, offset + c, c)};
      offset += 2 * c;
    }
  }
  return StyleCodeHierarchy(std::move(layers));
}

StyleCodeHierarchy EncoderImpl::encode(const torch::Tensor& image) {
  if (spec_.representation != Representation::kStyle) {
    throw UnsupportedConfiguration("encode() needs a STYLE encoder; use encode_w()");
  }
  return heads_forward(sam_fuse(backbone_forward(image)));
}

LatentCode EncoderImpl::encode_w(const torch::Tensor& image) {
  if (spec_.representation != Representation::kLatent) {
    throw UnsupportedConfiguration("encode_w() needs the LATENT ablation head");
  }
  const auto p = sam_fuse(backbone_forward(image));
  const auto features = torch::cat({pooled(p.fused4), pooled(p.fused5), pooled(p.projected6)}, 1);
  return {LatentKind::W, latent_head_->forward(features)};
}

StyleCodeHierarchy EncoderImpl::encode_styles(const torch::Tensor& image, GeneratorImpl& generator) {
  if (spec_.representation == Representation::kStyle) return encode(image);
  return generator.style_codes_from_w(encode_w(image));
}

}  // namespace ghfeat
