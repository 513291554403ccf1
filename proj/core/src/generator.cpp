#include "ghfeat/generator.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "ghfeat/errors.hpp"

namespace ghfeat {

namespace F = torch::nn::functional;

int64_t expected_layer_count(int64_t base_resolution, int64_t output_resolution) {
  if (base_resolution <= 0 || output_resolution < base_resolution ||
      output_resolution % base_resolution != 0 ||
      !std::has_single_bit(static_cast<uint64_t>(output_resolution / base_resolution))) {
    throw ConfigurationError("output resolution must be a power-of-two multiple of the base resolution");
  }
  const auto ratio = static_cast<uint64_t>(output_resolution / base_resolution);
  return 2 * static_cast<int64_t>(std::countr_zero(ratio)) + 2;
}

int64_t level_to_layer(int64_t level, int64_t layer_count) {
  if (layer_count < 1 || level < 1 || level > layer_count) {
    throw ContractViolation("level " + std::to_string(level) + " outside 1.." + std::to_string(layer_count));
  }
  return layer_count - level + 1;
}

int64_t GeneratorSpec::channels(int64_t layer) const {
  GHFEAT_EXPECT(layer >= 1 && layer <= layer_count(), "layer index out of range: " + std::to_string(layer));
  return per_layer_channels[static_cast<size_t>(layer - 1)];
}

int64_t GeneratorSpec::resolution(int64_t layer) const {
  GHFEAT_EXPECT(layer >= 1 && layer <= layer_count(), "layer index out of range: " + std::to_string(layer));
  return base_resolution << ((layer - 1) / 2);
}

int64_t GeneratorSpec::style_dim() const {
  int64_t total = 0;
  for (auto c : per_layer_channels) total += 2 * c;
  return total;
}

void GeneratorSpec::validate() const {
  const int64_t expected = expected_layer_count(base_resolution, output_resolution);
  if (layer_count() != expected) {
    throw ConfigurationError("generator needs " + std::to_string(expected) + " layers for " +
                             std::to_string(output_resolution) + "px output, got " +
                             std::to_string(layer_count()));
  }
  for (auto c : per_layer_channels) {
    if (c <= 0) throw ConfigurationError("per-layer channel counts must be positive");
  }
  if (latent_dim <= 0 || mapping_depth <= 0 || image_channels <= 0) {
    throw ConfigurationError("latent_dim, mapping_depth and image_channels must be positive");
  }
}

GeneratorSpec GeneratorSpec::desk() {
  GeneratorSpec s;
  s.output_resolution = 32;
  s.per_layer_channels = {64, 64, 64, 64, 32, 32, 16, 16};
  s.latent_dim = 64;
  s.mapping_depth = 4;
  s.image_channels = 1;
  return s;
}

GeneratorSpec GeneratorSpec::reference256() {
  GeneratorSpec s;
  s.output_resolution = 256;
  s.per_layer_channels = {512, 512, 512, 512, 512, 512, 512, 512, 256, 256, 128, 128, 64, 64};
  s.latent_dim = 512;
  s.mapping_depth = 8;
  s.image_channels = 3;
  return s;
}

nlohmann::json GeneratorSpec::to_json() const {
  return {{"base_resolution", base_resolution}, {"output_resolution", output_resolution},
          {"per_layer_channels", per_layer_channels}, {"latent_dim", latent_dim},
          {"mapping_depth", mapping_depth}, {"image_channels", image_channels}};
}

GeneratorSpec GeneratorSpec::from_json(const nlohmann::json& j) {
  GeneratorSpec s;
  s.base_resolution = j.at("base_resolution").get<int64_t>();
  s.output_resolution = j.at("output_resolution").get<int64_t>();
  s.per_layer_channels = j.at("per_layer_channels").get<std::vector<int64_t>>();
  s.latent_dim = j.at("latent_dim").get<int64_t>();
  s.mapping_depth = j.at("mapping_depth").get<int64_t>();
  s.image_channels = j.at("image_channels").get<int64_t>();
  s.validate();
  return s;
}

LatentCode LatentCode::sample(int64_t count, int64_t latent_dim, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return {LatentKind::Z, torch::randn({count, latent_dim}, gen, torch::kFloat32)};
}

// ---------------------------------------------------------------------------
// StyleCodeHierarchy

StyleCodeHierarchy::StyleCodeHierarchy(std::vector<StylePair> layers) : layers_(std::move(layers)) {
  for (const auto& p : layers_) {
    GHFEAT_EXPECT(p.scale.defined() && p.bias.defined(), "style pair tensors must be defined");
    GHFEAT_EXPECT(p.scale.dim() == 2 && p.bias.sizes() == p.scale.sizes(), "style pair must be [N, C] x2");
  }
}

int64_t StyleCodeHierarchy::batch_size() const {
  return layers_.empty() ? 0 : layers_.front().scale.size(0);
}

const StylePair& StyleCodeHierarchy::layer(int64_t layer) const {
  GHFEAT_EXPECT(layer >= 1 && layer <= layer_count(), "layer index out of range: " + std::to_string(layer));
  return layers_[static_cast<size_t>(layer - 1)];
}

StylePair& StyleCodeHierarchy::layer(int64_t layer) {
  GHFEAT_EXPECT(layer >= 1 && layer <= layer_count(), "layer index out of range: " + std::to_string(layer));
  return layers_[static_cast<size_t>(layer - 1)];
}

const StylePair& StyleCodeHierarchy::level(int64_t level) const {
  return layer(level_to_layer(level, layer_count()));
}

StylePair& StyleCodeHierarchy::level(int64_t level) { return layer(level_to_layer(level, layer_count())); }

torch::Tensor StyleCodeHierarchy::level_features(int64_t lvl) const {
  const auto& p = level(lvl);
  return torch::cat({p.scale, p.bias}, 1);
}

torch::Tensor StyleCodeHierarchy::flatten() const {
  std::vector<torch::Tensor> parts;
  parts.reserve(layers_.size());
  for (int64_t lvl = 1; lvl <= layer_count(); ++lvl) parts.push_back(level_features(lvl));
  return torch::cat(parts, 1);
}

StyleCodeHierarchy StyleCodeHierarchy::unflatten(const torch::Tensor& flat, const GeneratorSpec& spec) {
  GHFEAT_EXPECT(flat.dim() == 2 && flat.size(1) == spec.style_dim(),
                "flattened styles must be [N, " + std::to_string(spec.style_dim()) + "]");
  const int64_t n = spec.layer_count();
  std::vector<StylePair> layers(static_cast<size_t>(n));
  int64_t offset = 0;
  for (int64_t lvl = 1; lvl <= n; ++lvl) {
    const int64_t layer = level_to_layer(lvl, n);
    const int64_t c = spec.channels(layer);
    layers[static_cast<size_t>(layer - 1)] = {flat.narrow(1, offset, c), flat.narrow(1, offset + c, c)};
    offset += 2 * c;
  }
  return StyleCodeHierarchy(std::move(layers));
}

StyleCodeHierarchy StyleCodeHierarchy::detach() const {
  std::vector<StylePair> out;
  for (const auto& p : layers_) out.push_back({p.scale.detach(), p.bias.detach()});
  return StyleCodeHierarchy(std::move(out));
}

StyleCodeHierarchy StyleCodeHierarchy::clone() const {
  std::vector<StylePair> out;
  for (const auto& p : layers_) out.push_back({p.scale.clone(), p.bias.clone()});
  return StyleCodeHierarchy(std::move(out));
}

StyleCodeHierarchy StyleCodeHierarchy::rows(int64_t begin, int64_t end) const {
  GHFEAT_EXPECT(begin >= 0 && begin <= end && end <= batch_size(), "row range out of bounds");
  std::vector<StylePair> out;
  for (const auto& p : layers_) out.push_back({p.scale.slice(0, begin, end), p.bias.slice(0, begin, end)});
  return StyleCodeHierarchy(std::move(out));
}

StyleCodeHierarchy StyleCodeHierarchy::concat(std::span<const StyleCodeHierarchy> parts) {
  GHFEAT_EXPECT(!parts.empty(), "cannot concatenate zero hierarchies");
  const int64_t n = parts.front().layer_count();
  std::vector<StylePair> out;
  for (int64_t layer = 1; layer <= n; ++layer) {
    std::vector<torch::Tensor> scales, biases;
    for (const auto& h : parts) {
      GHFEAT_EXPECT(h.layer_count() == n, "hierarchies disagree on layer count");
      scales.push_back(h.layer(layer).scale);
      biases.push_back(h.layer(layer).bias);
    }
    out.push_back({torch::cat(scales, 0), torch::cat(biases, 0)});
  }
  return StyleCodeHierarchy(std::move(out));
}

void StyleCodeHierarchy::check(const GeneratorSpec& spec) const {
  GHFEAT_EXPECT(layer_count() == spec.layer_count(),
                "hierarchy has " + std::to_string(layer_count()) + " layers, spec has " +
                    std::to_string(spec.layer_count()));
  for (int64_t layer = 1; layer <= layer_count(); ++layer) {
    GHFEAT_EXPECT(this->layer(layer).scale.size(1) == spec.channels(layer),
                  "style width mismatch at layer " + std::to_string(layer));
  }
}

// ---------------------------------------------------------------------------
// AdaIN

torch::Tensor adain(const torch::Tensor& x, const torch::Tensor& scale, const torch::Tensor& bias) {
  const bool unbatched = x.dim() == 3;
  GHFEAT_EXPECT(x.dim() == 4 || unbatched, "adain expects [N,C,H,W] or [C,H,W]");
  auto input = unbatched ? x.unsqueeze(0) : x;
  auto s = unbatched ? scale.unsqueeze(0) : scale;
  auto b = unbatched ? bias.unsqueeze(0) : bias;
  GHFEAT_EXPECT(s.dim() == 2 && b.dim() == 2, "style scale/bias must be vectors per sample");
  GHFEAT_EXPECT(s.size(1) == input.size(1) && b.size(1) == input.size(1),
                "channel mismatch: features have " + std::to_string(input.size(1)) + ", style has " +
                    std::to_string(s.size(1)));
  GHFEAT_EXPECT(s.size(0) == input.size(0) || s.size(0) == 1, "style batch does not match features");

  const auto mean = input.mean({2, 3}, /*keepdim=*/true);
  const auto centered = input - mean;
  // clamp keeps the sqrt derivative finite on constant channels
  const auto var = centered.pow(2).mean({2, 3}, true).clamp_min(1e-24);
  const auto normalized = centered / (var.sqrt() + kAdainEpsilon);
  auto out = s.unsqueeze(2).unsqueeze(3) * normalized + b.unsqueeze(2).unsqueeze(3);
  return unbatched ? out.squeeze(0) : out;
}

// ---------------------------------------------------------------------------
// Generator

GeneratorImpl::GeneratorImpl(GeneratorSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const int64_t n = spec_.layer_count();

  const_input_ = register_parameter(
      "const_input", torch::randn({1, spec_.channels(1), spec_.base_resolution, spec_.base_resolution}));

  // He-style init keeps w at unit scale through the leaky MLP; the default
  // Linear init shrinks it by ~3x per layer and the styles stop depending on z.
  const double head_std = 1.0 / std::sqrt(static_cast<double>(spec_.latent_dim));
  const double mapping_std = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope)) * head_std;
  for (int64_t i = 0; i < spec_.mapping_depth; ++i) {
    auto fc = register_module("mapping" + std::to_string(i), torch::nn::Linear(spec_.latent_dim, spec_.latent_dim));
    torch::NoGradGuard no_grad;
    fc->weight.normal_(0.0, mapping_std);
    fc->bias.zero_();
    mapping_.push_back(fc);
  }

  int64_t in_channels = spec_.channels(1);
  for (int64_t layer = 1; layer <= n; ++layer) {
    const int64_t c = spec_.channels(layer);
    const auto tag = std::to_string(layer);
    convs_.push_back(register_module(
        "conv" + tag, torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, c, 3).padding(1).bias(false))));
    auto scale = register_module("style_scale" + tag, torch::nn::Linear(spec_.latent_dim, c));
    auto bias = register_module("style_bias" + tag, torch::nn::Linear(spec_.latent_dim, c));
    torch::NoGradGuard no_grad;
    scale->weight.normal_(0.0, head_std);
    bias->weight.normal_(0.0, head_std);
    scale->bias.fill_(1.0);
    bias->bias.zero_();
    scale_heads_.push_back(scale);
    bias_heads_.push_back(bias);
    in_channels = c;
  }
  to_image_ = register_module("to_image", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, spec_.image_channels, 1)));
}

LatentCode GeneratorImpl::map_latent(const LatentCode& z) {
  GHFEAT_EXPECT(z.kind == LatentKind::Z, "map_latent expects a Z-kind code");
  GHFEAT_EXPECT(z.values.dim() == 2 && z.values.size(1) == spec_.latent_dim,
                "latent code must be [N, " + std::to_string(spec_.latent_dim) + "]");
  auto h = z.values;
  for (auto& fc : mapping_) h = F::leaky_relu(fc->forward(h), F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
  return {LatentKind::W, h};
}

StyleCodeHierarchy GeneratorImpl::style_codes_from_w(const LatentCode& w) {
  GHFEAT_EXPECT(w.kind == LatentKind::W, "style codes are produced from W-kind codes only");
  GHFEAT_EXPECT(w.values.dim() == 2 && w.values.size(1) == spec_.latent_dim, "w code has wrong width");
  std::vector<StylePair> layers;
  for (size_t i = 0; i < convs_.size(); ++i) {
    layers.push_back({scale_heads_[i]->forward(w.values), bias_heads_[i]->forward(w.values)});
  }
  return StyleCodeHierarchy(std::move(layers));
}

torch::Tensor GeneratorImpl::layer_input(int64_t layer, const torch::Tensor& previous, int64_t batch) const {
  if (layer == 1) return const_input_.expand({batch, -1, -1, -1});
  // first conv of every block above the base resolution upsamples
  if (layer % 2 == 1) {
    return F::interpolate(previous, F::InterpolateFuncOptions()
                                        .scale_factor(std::vector<double>{2.0, 2.0})
                                        .mode(torch::kNearest));
  }
  return previous;
}

torch::Tensor GeneratorImpl::apply_layer(int64_t layer, const torch::Tensor& input, const StylePair& style) {
  return adain(convs_[static_cast<size_t>(layer - 1)]->forward(input), style.scale, style.bias);
}

namespace {

torch::Tensor normalize_mask(const torch::Tensor& mask, int64_t resolution) {
  GHFEAT_EXPECT(mask.defined(), "override mask is undefined");
  auto m = mask.to(torch::kFloat32);
  if (m.dim() == 2) m = m.unsqueeze(0).unsqueeze(0);
  GHFEAT_EXPECT(m.dim() == 4 && m.size(1) == 1, "override mask must be [H,W] or [N,1,H,W]");
  GHFEAT_EXPECT(m.size(2) == resolution && m.size(3) == resolution,
                "override mask is " + std::to_string(m.size(2)) + "x" + std::to_string(m.size(3)) +
                    ", layer resolution is " + std::to_string(resolution));
  return m;
}

}  // namespace

SynthesisTrace GeneratorImpl::synthesize_traced(const StyleCodeHierarchy& styles,
                                                std::span<const SpatialFeatureOverride> overrides,
                                                int64_t stop_after_layer) {
  styles.check(spec_);
  const int64_t n = spec_.layer_count();
  const int64_t batch = styles.batch_size();
  const int64_t last = stop_after_layer > 0 ? std::min(stop_after_layer, n) : n;

  for (const auto& o : overrides) {
    GHFEAT_EXPECT(o.layer >= 1 && o.layer <= n, "override targets a nonexistent layer");
  }

  SynthesisTrace trace;
  torch::Tensor x;
  for (int64_t layer = 1; layer <= last; ++layer) {
    auto features = apply_layer(layer, layer_input(layer, x, batch), styles.layer(layer));
    for (const auto& o : overrides) {
      if (o.layer != layer) continue;
      const auto mask = normalize_mask(o.mask, spec_.resolution(layer));
      torch::Tensor replacement;
      if (const auto* donor = std::get_if<StyleCodeHierarchy>(&o.replacement)) {
        replacement = synthesize_traced(*donor, {}, layer).post_adain.back();
      } else {
        replacement = std::get<torch::Tensor>(o.replacement);
        if (replacement.dim() == 3) replacement = replacement.unsqueeze(0);
      }
      GHFEAT_EXPECT(replacement.dim() == 4 && replacement.size(1) == spec_.channels(layer),
                    "override replacement must have " + std::to_string(spec_.channels(layer)) + " channels");
      GHFEAT_EXPECT(replacement.size(2) == features.size(2) && replacement.size(3) == features.size(3),
                    "override replacement resolution mismatch");
      features = mask * replacement + (1.0 - mask) * features;
    }
    trace.post_adain.push_back(features);
    x = F::leaky_relu(features, F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
  }
  if (last == n) trace.image = to_image_->forward(x);
  return trace;
}

torch::Tensor GeneratorImpl::synthesize(const StyleCodeHierarchy& styles,
                                        std::span<const SpatialFeatureOverride> overrides) {
  return synthesize_traced(styles, overrides).image;
}

torch::Tensor GeneratorImpl::generate(const LatentCode& z) {
  const auto w = map_latent(z);
  const int64_t batch = w.values.size(0);
  torch::Tensor x;
  for (int64_t layer = 1; layer <= spec_.layer_count(); ++layer) {
    const auto i = static_cast<size_t>(layer - 1);
    StylePair style{scale_heads_[i]->forward(w.values), bias_heads_[i]->forward(w.values)};
    x = F::leaky_relu(apply_layer(layer, layer_input(layer, x, batch), style),
                      F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
  }
  return to_image_->forward(x);
}

}  // namespace ghfeat
