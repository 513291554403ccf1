#include "ghfeat/editing.hpp"

#include <charconv>

#include "ghfeat/errors.hpp"

namespace ghfeat {

namespace F = torch::nn::functional;

LevelRange::LevelRange(int64_t lo_, int64_t hi_) : lo(lo_), hi(hi_) {
  GHFEAT_EXPECT(lo >= 1 && lo <= hi, "level range must satisfy 1 <= lo <= hi");
}

void LevelRange::check(int64_t layer_count) const {
  GHFEAT_EXPECT(lo >= 1 && lo <= hi && hi <= layer_count,
                "level range " + to_string() + " outside 1.." + std::to_string(layer_count));
}

LevelRange LevelRange::parse(const std::string& text) {
  auto number = [&](std::string_view s) {
    int64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ContractViolation("bad level range '" + text + "'");
    return v;
  };
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    const auto v = number(text);
    return {v, v};
  }
  const std::string_view all(text);
  return {number(all.substr(0, colon)), number(all.substr(colon + 1))};
}

std::string LevelRange::to_string() const { return std::to_string(lo) + ":" + std::to_string(hi); }

StyleCodeHierarchy mix_codes(const StyleCodeHierarchy& content, const StyleCodeHierarchy& style, LevelRange range) {
  const int64_t l = content.layer_count();
  GHFEAT_EXPECT(style.layer_count() == l, "content and style hierarchies have different depths");
  range.check(l);
  const int64_t n = content.batch_size();
  GHFEAT_EXPECT(style.batch_size() == n || style.batch_size() == 1, "style batch must match content or be 1");
  std::vector<StylePair> layers;
  for (int64_t layer = 1; layer <= l; ++layer) {
    const auto& c = content.layer(layer);
    const auto& s = style.layer(layer);
    GHFEAT_EXPECT(c.scale.size(1) == s.scale.size(1), "content and style widths differ at layer " +
                                                          std::to_string(layer));
    if (range.contains(layer_to_level(layer, l))) {
      layers.push_back({s.scale.expand_as(c.scale), s.bias.expand_as(c.bias)});
    } else {
      layers.push_back(c);
    }
  }
  return StyleCodeHierarchy(std::move(layers));
}

torch::Tensor style_mix(GeneratorImpl& generator, const StyleCodeHierarchy& content, const StyleCodeHierarchy& style,
                        LevelRange range) {
  content.check(generator.spec());
  style.check(generator.spec());
  torch::NoGradGuard no_grad;
  return generator.synthesize(mix_codes(content, style, range));
}

StyleCodeHierarchy sample_donor_codes(GeneratorImpl& generator, int64_t count, uint64_t seed,
                                      DonorSampling sampling) {
  GHFEAT_EXPECT(count > 0, "donor count must be positive");
  torch::NoGradGuard no_grad;
  const auto& spec = generator.spec();
  if (sampling == DonorSampling::kLatentPipeline) {
    return generator.style_codes_from_w(generator.map_latent(LatentCode::sample(count, spec.latent_dim, seed)));
  }
  // moments from a fixed pool of pipeline samples, then independent draws
  constexpr int64_t kPool = 1024;
  const auto pool = generator.style_codes_from_w(generator.map_latent(LatentCode::sample(kPool, spec.latent_dim, 0)))
                        .flatten();
  const auto mean = pool.mean(0);
  const auto std = pool.std(0);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto draws = torch::randn({count, pool.size(1)}, gen, torch::kFloat32) * std + mean;
  return StyleCodeHierarchy::unflatten(draws, spec);
}

torch::Tensor global_edit(GeneratorImpl& generator, const StyleCodeHierarchy& base, LevelRange range, uint64_t seed,
                          DonorSampling sampling) {
  range.check(base.layer_count());
  const auto donor = sample_donor_codes(generator, base.batch_size(), seed, sampling);
  return style_mix(generator, base, donor, range);
}

torch::Tensor mask_to_layer(const torch::Tensor& mask, int64_t resolution) {
  GHFEAT_EXPECT(mask.defined(), "mask is undefined");
  auto m = mask.to(torch::kFloat32);
  if (m.dim() == 2) m = m.unsqueeze(0).unsqueeze(0);
  GHFEAT_EXPECT(m.dim() == 4 && m.size(1) == 1, "mask must be [H, W] or [N, 1, H, W]");
  if (m.size(2) != resolution || m.size(3) != resolution) {
    m = F::interpolate(m, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{resolution, resolution})
                              .mode(torch::kNearest));
  }
  return (m > 0.5).to(torch::kFloat32);
}

LocalEditResult local_edit(GeneratorImpl& generator, const StyleCodeHierarchy& base, int64_t layer,
                           const torch::Tensor& mask, const StyleCodeHierarchy& donor) {
  const auto& spec = generator.spec();
  base.check(spec);
  donor.check(spec);
  GHFEAT_EXPECT(layer >= 1 && layer <= spec.layer_count(), "local edit layer out of range");
  GHFEAT_EXPECT(mask.defined() && mask.size(-1) == spec.output_resolution && mask.size(-2) == spec.output_resolution,
                "local edit mask must be at image resolution");
  GHFEAT_EXPECT(donor.batch_size() == base.batch_size(), "donor and base batch sizes differ");
  torch::NoGradGuard no_grad;
  const auto m = mask_to_layer(mask, spec.resolution(layer));
  LocalEditResult r;
  if (m.sum().item<double>() == 0.0) {
    r.empty_mask = true;
    r.image = generator.synthesize(base);
    return r;
  }
  const SpatialFeatureOverride o{layer, m, donor};
  r.image = generator.synthesize(base, std::span(&o, 1));
  return r;
}

torch::Tensor harmonize(EncoderImpl& encoder, GeneratorImpl& generator, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  return generator.synthesize(encoder.encode_styles(x, generator)).clamp(-1.0, 1.0);
}

torch::Tensor reconstruct(GeneratorImpl& generator, const StyleCodeHierarchy& codes) {
  torch::NoGradGuard no_grad;
  return generator.synthesize(codes);
}

}  // namespace ghfeat
