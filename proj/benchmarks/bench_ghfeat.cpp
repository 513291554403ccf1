#include <benchmark/benchmark.h>

#include <torch/torch.h>

#include "ghfeat/editing.hpp"
#include "ghfeat/encoder.hpp"
#include "ghfeat/evaluation.hpp"
#include "ghfeat/generator.hpp"

using namespace ghfeat;

namespace {

struct DeskModels {
  Generator generator{GeneratorSpec::desk()};
  Encoder encoder{EncoderSpec::desk(), GeneratorSpec::desk()};
  DeskModels() {
    generator->eval();
    encoder->eval();
  }
};

DeskModels& models() {
  static DeskModels m;
  return m;
}

void BM_Adain(benchmark::State& state) {
  const auto c = state.range(0);
  const auto x = torch::randn({16, c, 32, 32});
  const auto s = torch::randn({16, c}), b = torch::randn({16, c});
  for (auto _ : state) benchmark::DoNotOptimize(adain(x, s, b));
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_Adain)->Arg(16)->Arg(64)->Arg(256);

void BM_Synthesize(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  auto& g = models().generator;
  const auto codes = g->style_codes_from_w(g->map_latent(LatentCode::sample(state.range(0), 64, 1)));
  for (auto _ : state) benchmark::DoNotOptimize(g->synthesize(codes));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Synthesize)->Arg(1)->Arg(64);

void BM_Encode(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  auto& m = models();
  const auto x = torch::rand({state.range(0), 1, 32, 32}) * 2 - 1;
  for (auto _ : state) benchmark::DoNotOptimize(m.encoder->encode_styles(x, *m.generator).flatten());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Encode)->Arg(1)->Arg(64);

void BM_LocalEdit(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  auto& g = models().generator;
  const auto base = g->style_codes_from_w(g->map_latent(LatentCode::sample(1, 64, 1)));
  const auto donor = g->style_codes_from_w(g->map_latent(LatentCode::sample(1, 64, 2)));
  auto mask = torch::zeros({32, 32});
  mask.slice(0, 8, 24).slice(1, 8, 24).fill_(1.0);
  for (auto _ : state) benchmark::DoNotOptimize(local_edit(*g, base, 4, mask, donor).image);
}
BENCHMARK(BM_LocalEdit);

void BM_Ssim(benchmark::State& state) {
  const auto a = torch::rand({64, 1, 32, 32}) * 2 - 1, b = torch::rand({64, 1, 32, 32}) * 2 - 1;
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
}
BENCHMARK(BM_Ssim);

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  benchmark::Initialize(&argc, argv);
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
