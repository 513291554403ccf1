#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>

#include "ghfeat/encoder.hpp"
#include "ghfeat/generator.hpp"
#include "ghfeat/models.hpp"

namespace ghfeat::test {

// 32px generator with narrow layers so tests stay fast.
GeneratorSpec tiny_generator();
EncoderSpec tiny_encoder(Representation r = Representation::kStyle);

Generator make_generator(uint64_t seed = 3);
ModelBundle make_tiny_bundle(uint64_t seed = 3);

double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b);

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace ghfeat::test
