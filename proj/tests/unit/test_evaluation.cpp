#include <doctest.h>

#include <cmath>

#include "ghfeat/errors.hpp"
#include "ghfeat/evaluation.hpp"
#include "support.hpp"

using namespace ghfeat;

namespace {

torch::Tensor wave(double fi, double fj, double amp, bool cosine) {
  auto i = torch::arange(16, torch::kFloat64).view({16, 1}).expand({16, 16});
  auto j = torch::arange(16, torch::kFloat64).view({1, 16}).expand({16, 16});
  const auto phase = fi * i + fj * j;
  return (amp * (cosine ? torch::cos(phase) : torch::sin(phase))).view({1, 1, 16, 16});
}

GaussianFit gaussian(std::vector<double> mean, std::vector<double> diag) {
  GaussianFit g;
  g.mean = torch::tensor(mean, torch::kFloat64);
  g.cov = torch::diag(torch::tensor(diag, torch::kFloat64));
  return g;
}

// Same pairs share a latent; each level of the second image sees its own
// noise on w (`noise` is relative to the spread of w), so levels vary
// independently. Different pairs use independent latents.
PairSet generator_pairs(Generator& g, int64_t n, uint64_t seed, double noise) {
  torch::NoGradGuard no_grad;
  const auto dim = g->spec().latent_dim;
  const auto wa = g->map_latent(LatentCode::sample(n, dim, seed));
  const auto wb = g->map_latent(LatentCode::sample(n, dim, seed + 1000));
  const double sigma = noise * wa.values.std().item<double>();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed + 7);
  std::vector<bool> same(static_cast<size_t>(n));
  auto mask = torch::zeros({n, 1});
  for (int64_t i = 0; i < n; ++i) {
    same[i] = i % 2 == 0;
    if (same[i]) mask[i] = 1.0;
  }
  std::vector<StylePair> layers;
  for (int64_t layer = 1; layer <= g->spec().layer_count(); ++layer) {
    const auto noisy = wa.values + sigma * torch::randn(wa.values.sizes(), gen, torch::kFloat32);
    const auto w = mask * noisy + (1 - mask) * wb.values;
    layers.push_back(g->style_codes_from_w({LatentKind::W, w}).layer(layer));
  }
  return {g->style_codes_from_w(wa), StyleCodeHierarchy(std::move(layers)), same};
}

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("luminance of solid colours") {
    const auto red = torch::tensor({1.0f, -1.0f, -1.0f}).view({3, 1, 1}).expand({3, 4, 4});
    CHECK(luminance(red) == doctest::Approx(0.299).epsilon(1e-6));
    CHECK(luminance(-torch::ones({3, 4, 4})) == doctest::Approx(0.0));
    CHECK(luminance(torch::ones({3, 4, 4})) == doctest::Approx(1.0));
    CHECK(luminance(torch::zeros({1, 4, 4})) == doctest::Approx(0.5));
    const auto batch = luminance_batch(torch::stack({red, torch::ones({3, 4, 4})}));
    CHECK(batch[0].item<double>() == doctest::Approx(0.299).epsilon(1e-6));
  }

  TEST_CASE("ssim matches the reference implementation") {
    // frozen from scikit-image structural_similarity(win_size=7, data_range=2,
    // use_sample_covariance=True, gaussian_weights=False)
    const auto a = wave(0.3, 0.2, 0.8, false);
    const auto b = wave(0.25, -0.1, 0.7, true);
    CHECK(ssim(a, b) == doctest::Approx(0.01809666636993966).epsilon(1e-9));
    CHECK(ssim(a, 0.9 * a + 0.05) == doctest::Approx(0.9024801111816856).epsilon(1e-9));
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("mse") {
    CHECK(mean_squared_error(torch::zeros({2, 1, 2, 2}), torch::ones({2, 1, 2, 2})) == doctest::Approx(1.0));
    CHECK_THROWS_AS(mean_squared_error(torch::zeros({2}), torch::zeros({3})), ContractViolation);
  }

  TEST_CASE("frechet distance closed forms") {
    // 1-D: (m1 - m2)^2 + s1 + s2 - 2 sqrt(s1 s2)
    const double d1 = frechet_distance(gaussian({1.0}, {4.0}), gaussian({-2.0}, {9.0}));
    CHECK(d1 == doctest::Approx(9.0 + 4.0 + 9.0 - 12.0).epsilon(1e-9));
    const double dd = frechet_distance(gaussian({0, 1, 2}, {1, 4, 0.25}), gaussian({0, 0, 0}, {9, 1, 0.25}));
    CHECK(dd == doctest::Approx(5.0 + (1 + 9 - 6) + (4 + 1 - 4) + 0).epsilon(1e-9));
    const auto g = gaussian({0.5, -0.5}, {2, 3});
    CHECK(std::abs(frechet_distance(g, g)) < 1e-9);
  }

  TEST_CASE("fid orders identical sets below different sets") {
    const auto embed = make_fixed_embedder(1);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
    const auto a = torch::tanh(torch::randn({300, 1, 32, 32}, gen, torch::kFloat32));
    const auto b = torch::tanh(torch::randn({300, 1, 32, 32}, gen, torch::kFloat32) * 0.3 + 0.4);
    const auto same = frechet_inception_distance(a, a, embed);
    const auto diff = frechet_inception_distance(a, b, embed);
    CHECK(same.value < 1e-4);
    CHECK(same.value < diff.value);
    CHECK_FALSE(same.regularized);  // 300 samples, 64-dimensional features
    CHECK(frechet_inception_distance(a.slice(0, 0, 20), b.slice(0, 0, 20), embed).regularized);
    const auto m = reconstruction_metrics(a, a, embed);
    CHECK(m.mse == 0.0);
    CHECK(m.ssim == doctest::Approx(1.0));
  }

  TEST_CASE("gaussian fit regularizes rank-deficient samples") {
    const auto f = torch::randn({3, 8}, torch::kFloat64);
    const auto g = fit_gaussian(f);
    CHECK(g.regularized);
    CHECK(torch::linalg_eigvalsh(g.cov).min().item<double>() > 0);
    CHECK_FALSE(fit_gaussian(torch::randn({50, 4}, torch::kFloat64)).regularized);
  }

  TEST_CASE("linear probe separates separable classes perfectly") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
    auto make = [&](int64_t n) {
      auto labels = torch::arange(n) % 3;
      auto centers = torch::tensor({{4.0, 0.0, 0.0}, {0.0, 4.0, 0.0}, {0.0, 0.0, 4.0}});
      auto x = centers.index_select(0, labels) + 0.3 * torch::randn({n, 3}, gen, torch::kFloat32);
      return std::pair{torch::cat({x, torch::randn({n, 5}, gen, torch::kFloat32)}, 1), labels};
    };
    const auto [xtr, ytr] = make(300);
    const auto [xte, yte] = make(150);
    const auto r = train_linear_probe(xtr, ytr, xte, yte, TaskKind::kClassification);
    CHECK(r.metric == MetricKind::kAccuracy);
    CHECK(r.score == doctest::Approx(100.0));
    const auto again = train_linear_probe(xtr, ytr, xte, yte, TaskKind::kClassification);
    CHECK(again.score == r.score);
    CHECK(torch::equal(again.probe.weight, r.probe.weight));
  }

  TEST_CASE("linear probe on random labels is near chance") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    const auto xtr = torch::randn({2000, 10}, gen, torch::kFloat32);
    const auto ytr = torch::randint(0, 2, {2000}, gen, torch::kLong);
    const auto xte = torch::randn({2000, 10}, gen, torch::kFloat32);
    const auto yte = torch::randint(0, 2, {2000}, gen, torch::kLong);
    const auto r = train_linear_probe(xtr, ytr, xte, yte, TaskKind::kClassification);
    CHECK(r.score == doctest::Approx(50.0).epsilon(0.1));
  }

  TEST_CASE("regression probes: constant targets give zero error, linear targets are recovered") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
    const auto xtr = torch::randn({200, 6}, gen, torch::kFloat32);
    const auto xte = torch::randn({100, 6}, gen, torch::kFloat32);
    for (auto kind : {TaskKind::kRegressionL1, TaskKind::kRegressionL2}) {
      const auto r = train_linear_probe(xtr, torch::full({200}, 0.42), xte, torch::full({100}, 0.42), kind);
      CHECK(r.score < 1e-6);
      const auto w = torch::tensor({0.5f, -1.0f, 0.0f, 0.0f, 2.0f, 0.1f});
      const auto lin = train_linear_probe(xtr, xtr.matmul(w) + 0.3, xte, xte.matmul(w) + 0.3, kind);
      CHECK(lin.score < 1e-2);
    }
    CHECK(higher_is_better(MetricKind::kAccuracy));
    CHECK_FALSE(higher_is_better(MetricKind::kL1Error));
  }

  TEST_CASE("single-class training labels are rejected") {
    const auto x = torch::randn({10, 3});
    CHECK_THROWS_AS(train_linear_probe(x, torch::zeros({10}, torch::kLong), x, torch::zeros({10}, torch::kLong),
                                       TaskKind::kClassification),
                    ContractViolation);
  }

  TEST_CASE("level sweep reports one finite score per level") {
    auto g = test::make_generator();
    torch::NoGradGuard no_grad;
    const auto train = g->style_codes_from_w(g->map_latent(LatentCode::sample(64, 16, 1)));
    const auto test = g->style_codes_from_w(g->map_latent(LatentCode::sample(32, 16, 2)));
    const auto ytr = torch::arange(64) % 2, yte = torch::arange(32) % 2;
    const auto report = level_sweep("parity", train, ytr, test, yte, TaskKind::kClassification);
    report.check(8);
    CHECK(report.records().size() >= 8);
    CHECK(report.records()[0]["level"] == 1);
    ProbeReport bad = report;
    bad.per_level.pop_back();
    CHECK_THROWS_AS(bad.check(8), ContractViolation);
  }

  TEST_CASE("verification: identical pairs and scale invariance") {
    auto g = test::make_generator();
    torch::NoGradGuard no_grad;
    const auto h = g->style_codes_from_w(g->map_latent(LatentCode::sample(6, 16, 5)));
    PairSet same{h, h, std::vector<bool>(6, true)};
    for (const auto& spec : {VerifySpec{VerifyStrategy::kSingle, 3}, VerifySpec{VerifyStrategy::kGrouping, 4},
                             VerifySpec{VerifyStrategy::kVoting, 0}}) {
      const auto s = pair_similarities(same, spec);
      CHECK(torch::allclose(s.values, torch::ones({6}, torch::kFloat64), 0, 1e-9));
    }
    const auto scaled = StyleCodeHierarchy::unflatten(h.flatten() * 3.0, g->spec());
    const auto pairs = generator_pairs(g, 6, 1, 1.0);
    PairSet scaled_pairs{StyleCodeHierarchy::unflatten(pairs.first.flatten() * 2.5, g->spec()), pairs.second,
                         pairs.same};
    const auto s1 = pair_similarities(pairs, {VerifyStrategy::kGrouping, 8});
    const auto s2 = pair_similarities(scaled_pairs, {VerifyStrategy::kGrouping, 8});
    CHECK(torch::allclose(s1.values, s2.values, 0, 1e-6));
    CHECK(torch::allclose(pair_similarities(PairSet{h, scaled, same.same}, {VerifyStrategy::kVoting, 0}).values,
                          torch::ones({6}, torch::kFloat64), 0, 1e-9));
  }

  TEST_CASE("threshold fitting picks a separating cut") {
    const auto sims = torch::tensor({0.1, 0.2, 0.8, 0.9}, torch::kFloat64);
    const std::vector<bool> same{false, false, true, true};
    const double t = fit_threshold(sims, same);
    CHECK(t >= 0.2);
    CHECK(t < 0.8);
    CHECK(threshold_accuracy(sims, same, t) == doctest::Approx(100.0));
  }

  TEST_CASE("voting is no worse than the best single level minus two points") {
    auto g = test::make_generator(11);
    const auto cal = generator_pairs(g, 2000, 21, 0.75);
    const auto ev = generator_pairs(g, 2000, 22, 0.75);
    double best_single = 0;
    for (int64_t level = 1; level <= 8; ++level) {
      best_single = std::max(best_single, verify_pairs(cal, ev, {VerifyStrategy::kSingle, level}).accuracy);
    }
    const auto voting = verify_pairs(cal, ev, {VerifyStrategy::kVoting, 0});
    MESSAGE("best single " << best_single << ", voting " << voting.accuracy);
    CHECK(voting.accuracy >= best_single - 2.0);
    CHECK(voting.accuracy > 50.0);
  }

  TEST_CASE("zero-norm vectors count as similarity zero") {
    auto g = test::make_generator();
    torch::NoGradGuard no_grad;
    const auto h = g->style_codes_from_w(g->map_latent(LatentCode::sample(2, 16, 5)));
    const auto zero = StyleCodeHierarchy::unflatten(torch::zeros_like(h.flatten()), g->spec());
    const auto s = pair_similarities(PairSet{h, zero, {true, false}}, {VerifyStrategy::kSingle, 2});
    CHECK(s.zero_norm == 2);
    CHECK(s.values.abs().max().item<double>() == 0.0);
  }
}
