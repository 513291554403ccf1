#include "support.hpp"

#include <atomic>
#include <unistd.h>

namespace ghfeat::test {

GeneratorSpec tiny_generator() {
  GeneratorSpec g;
  g.base_resolution = 4;
  g.output_resolution = 32;
  g.per_layer_channels = {16, 16, 16, 16, 8, 8, 8, 8};
  g.latent_dim = 16;
  g.mapping_depth = 2;
  g.image_channels = 1;
  return g;
}

EncoderSpec tiny_encoder(Representation r) {
  auto e = EncoderSpec::desk();
  e.stem_channels = 8;
  e.stages = {{8, 1, 1}, {16, 1, 2}, {16, 1, 1}, {32, 1, 2}, {32, 1, 2}};
  e.sam_channels = 8;
  e.representation = r;
  return e;
}

Generator make_generator(uint64_t seed) {
  torch::manual_seed(seed);
  return Generator(tiny_generator());
}

ModelBundle make_tiny_bundle(uint64_t seed) {
  auto g = make_generator(seed);
  torch::manual_seed(seed + 1);
  Encoder e(tiny_encoder(), tiny_generator());
  return make_bundle(g, e);
}

double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.detach().to(torch::kFloat64) - b.detach().to(torch::kFloat64)).abs().max().item<double>();
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("ghfeat-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace ghfeat::test
