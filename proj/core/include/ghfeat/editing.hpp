#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

#include "ghfeat/encoder.hpp"
#include "ghfeat/generator.hpp"

namespace ghfeat {

/// Inclusive, non-empty range of levels [lo, hi].
struct LevelRange {
  int64_t lo = 1;
  int64_t hi = 1;

  LevelRange() = default;
  LevelRange(int64_t lo, int64_t hi);

  bool contains(int64_t level) const { return level >= lo && level <= hi; }
  // Throws ContractViolation unless 1 <= lo <= hi <= layer_count.
  void check(int64_t layer_count) const;
  // "lo:hi" or a single level "n".
  static LevelRange parse(const std::string& text);
  std::string to_string() const;

  bool operator==(const LevelRange&) const = default;
};

// content's codes with style's codes on the levels in `range`. A style
// hierarchy with batch 1 is broadcast over the content batch.
StyleCodeHierarchy mix_codes(const StyleCodeHierarchy& content, const StyleCodeHierarchy& style, LevelRange range);

torch::Tensor style_mix(GeneratorImpl& generator, const StyleCodeHierarchy& content, const StyleCodeHierarchy& style,
                        LevelRange range);

enum class DonorSampling {
  kLatentPipeline,  // z ~ N(0, I) -> w -> per-layer affine heads
  kDirectStyle,     // independent Gaussian per style dimension, fitted on pipeline samples
};

// Donor codes for `count` images drawn from `seed`.
StyleCodeHierarchy sample_donor_codes(GeneratorImpl& generator, int64_t count, uint64_t seed,
                                      DonorSampling sampling = DonorSampling::kLatentPipeline);

torch::Tensor global_edit(GeneratorImpl& generator, const StyleCodeHierarchy& base, LevelRange range, uint64_t seed,
                          DonorSampling sampling = DonorSampling::kLatentPipeline);

// Nearest-neighbour resize of an image-resolution mask ([H,W] or [N,1,H,W])
// to `resolution`, binarized at 0.5. Returns [N,1,r,r] (N = 1 for 2-D input).
torch::Tensor mask_to_layer(const torch::Tensor& mask, int64_t resolution);

struct LocalEditResult {
  torch::Tensor image;
  bool empty_mask = false;  // nothing selected; image is the plain reconstruction
};

// At `layer`, base's post-AdaIN features take donor's values inside the mask;
// later layers keep base's styles.
LocalEditResult local_edit(GeneratorImpl& generator, const StyleCodeHierarchy& base, int64_t layer,
                           const torch::Tensor& mask, const StyleCodeHierarchy& donor);

// Re-projects a (possibly stitched) image: synthesize(encode(x)), clamped to [-1, 1].
torch::Tensor harmonize(EncoderImpl& encoder, GeneratorImpl& generator, const torch::Tensor& images);

// Plain reconstruction of encoded codes, for comparisons against edits.
torch::Tensor reconstruct(GeneratorImpl& generator, const StyleCodeHierarchy& codes);

}  // namespace ghfeat
