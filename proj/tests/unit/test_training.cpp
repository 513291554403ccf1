#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "ghfeat/archive.hpp"
#include "ghfeat/errors.hpp"
#include "ghfeat/models.hpp"
#include "ghfeat/training.hpp"
#include "support.hpp"

using namespace ghfeat;
using ghfeat::test::max_abs_diff;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.encoder = test::tiny_encoder();
  c.batch_size = 4;
  c.epochs = 1;
  c.steps_per_epoch = 1;
  c.discriminator_channels = {8, 8, 8, 8};
  c.eval_samples = 8;
  return c;
}

ParameterArchive tiny_generator_archive(uint64_t seed = 3) {
  ParameterArchive a;
  add_generator(a, test::make_generator(seed));
  return a;
}

Dataset blob_dataset(int64_t n, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  Dataset d;
  d.images = torch::tanh(torch::randn({n, 1, 32, 32}, gen, torch::kFloat32));
  return d;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("learning rate decays by 0.8 per epoch from 1e-4") {
    CHECK(lr_schedule(0) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_schedule(1) == doctest::Approx(8e-5).epsilon(1e-12));
    CHECK(lr_schedule(3) == doctest::Approx(5.12e-5).epsilon(1e-12));
    CHECK_THROWS_AS(lr_schedule(1e-4, 0.8, -1), ContractViolation);
  }

  TEST_CASE("encoder loss matches the three-term closed form on two-pixel toys") {
    // images are [N, 1, 1, 2]; D(v) = 0.5 v0 - 2 v1 + 0.25; F(v) = [3 v0, v0 + v1]
    const auto x = torch::tensor({0.2, -0.4, 1.0, 0.5}, torch::kFloat64).reshape({2, 1, 1, 2});
    const auto rec = torch::tensor({0.1, -0.1, 0.7, 0.9}, torch::kFloat64).reshape({2, 1, 1, 2});
    const Critic critic = [](const torch::Tensor& v) {
      const auto f = v.flatten(1);
      return 0.5 * f.select(1, 0) - 2.0 * f.select(1, 1) + 0.25;
    };
    const FeatureFn features = [](const torch::Tensor& v) {
      const auto f = v.flatten(1);
      return torch::stack({3.0 * f.select(1, 0), f.select(1, 0) + f.select(1, 1)}, 1);
    };
    const LossWeights w{0.1, 5e-5, 5.0};
    const auto terms = encoder_loss(x, rec, critic, features, w);

    const double xs[2][2] = {{0.2, -0.4}, {1.0, 0.5}};
    const double rs[2][2] = {{0.1, -0.1}, {0.7, 0.9}};
    double recon = 0, adv = 0, perc = 0;
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) recon += (xs[i][j] - rs[i][j]) * (xs[i][j] - rs[i][j]) / 4.0;
      adv += (0.5 * rs[i][0] - 2.0 * rs[i][1] + 0.25) / 2.0;
      const double f0 = 3 * xs[i][0] - 3 * rs[i][0];
      const double f1 = (xs[i][0] + xs[i][1]) - (rs[i][0] + rs[i][1]);
      perc += (f0 * f0 + f1 * f1) / 4.0;
    }
    const double expected = recon - 0.1 * adv + 5e-5 * perc;
    CHECK(std::abs(terms.total.item<double>() - expected) <= 1e-6);
    CHECK(std::abs(terms.reconstruction.item<double>() - recon) <= 1e-12);
    CHECK(std::abs(terms.adversarial.item<double>() + 0.1 * adv) <= 1e-12);
    CHECK(std::abs(terms.perceptual.item<double>() - 5e-5 * perc) <= 1e-12);
    const double sum = terms.reconstruction.item<double>() + terms.adversarial.item<double>() +
                       terms.perceptual.item<double>();
    CHECK(std::abs(terms.total.item<double>() - sum) <= 1e-6);
  }

  TEST_CASE("perfect reconstruction leaves only the adversarial term") {
    const auto x = torch::randn({3, 1, 4, 4}, torch::kFloat64);
    const Critic critic = [](const torch::Tensor& v) { return v.flatten(1).sum(1) * 0.3; };
    const LossWeights w{0.1, 0.0, 5.0};
    const auto t = encoder_loss(x, x.clone(), critic, {}, w);
    CHECK(t.total.item<double>() == doctest::Approx(-0.1 * critic(x).mean().item<double>()).epsilon(1e-12));
  }

  TEST_CASE("with lambda1 = lambda2 = 0 the loss is the mean squared residual") {
    const auto x = torch::randn({2, 1, 8, 8}, torch::kFloat64);
    const auto rec = torch::randn({2, 1, 8, 8}, torch::kFloat64);
    const auto t = encoder_loss(x, rec, {}, {}, LossWeights{0.0, 0.0, 0.0});
    const auto diff = (x - rec).flatten();
    const double norm_sq = diff.dot(diff).item<double>();
    CHECK(t.total.item<double>() == doctest::Approx(norm_sq / 128.0).epsilon(1e-12));
  }

  TEST_CASE("nonzero perceptual weight without an extractor is a configuration error") {
    const auto x = torch::zeros({1, 1, 2, 2});
    CHECK_THROWS_AS(encoder_loss(x, x, {}, {}, LossWeights{0.0, 1.0, 0.0}), ConfigurationError);
    TrainConfig c;
    c.perceptual_mode = PerceptualMode::kDisabled;
    c.loss_weights.lambda2 = 5e-5;
    CHECK_THROWS_AS(c.validate(), ConfigurationError);
  }

  TEST_CASE("constant critic gives zero discriminator loss") {
    const auto x = torch::randn({4, 1, 4, 4});
    const Critic constant = [](const torch::Tensor& v) { return torch::full({v.size(0)}, 0.7); };
    const auto d = discriminator_loss(x, torch::randn({4, 1, 4, 4}), constant, LossWeights{});
    CHECK(d.total.item<double>() == doctest::Approx(0.0).epsilon(1e-12));
  }

  TEST_CASE("linear critic: penalty is lambda3 * ||a||^2 and the loss is exact") {
    const auto a = torch::tensor({0.5, -1.0, 2.0, 0.25}, torch::kFloat64);
    const Critic linear = [&](const torch::Tensor& v) { return v.flatten(1).matmul(a); };
    const auto x = torch::randn({5, 1, 2, 2}, torch::kFloat64);
    const auto rec = torch::randn({5, 1, 2, 2}, torch::kFloat64);
    const LossWeights w{0.1, 0.0, 5.0};
    const auto d = discriminator_loss(x, rec, linear, w);
    const double a_sq = a.dot(a).item<double>();
    CHECK(d.penalty.item<double>() == doctest::Approx(5.0 * a_sq).epsilon(1e-14));
    const double expected =
        rec.flatten(1).matmul(a).mean().item<double>() - x.flatten(1).matmul(a).mean().item<double>() + 5.0 * a_sq;
    CHECK(std::abs(d.total.item<double>() - expected) <= 1e-12);
  }

  TEST_CASE("penalty gradient agrees with central finite differences") {
    torch::manual_seed(7);
    auto critic_net = torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 3, 2)), torch::nn::Tanh(),
                                            torch::nn::Flatten(), torch::nn::Linear(27, 1));
    critic_net->to(torch::kFloat64);
    const Critic critic = [&](const torch::Tensor& v) { return critic_net->forward(v).squeeze(1); };
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal;
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
      auto x = torch::empty({1, 1, 4, 4}, torch::kFloat64);
      for (int i = 0; i < 16; ++i) x.view(-1)[i] = normal(rng);
      const double analytic = gradient_penalty(critic, x).item<double>();
      torch::NoGradGuard no_grad;
      const double h = 1e-5;
      double fd_sq = 0;
      for (int i = 0; i < 16; ++i) {
        auto xp = x.clone(), xm = x.clone();
        xp.view(-1)[i] += h;
        xm.view(-1)[i] -= h;
        const double g = (critic(xp).item<double>() - critic(xm).item<double>()) / (2 * h);
        fd_sq += g * g;
      }
      worst = std::max(worst, std::abs(analytic - fd_sq) / std::max(fd_sq, 1e-12));
    }
    CHECK(worst <= 1e-3);
  }

  TEST_CASE("discriminator and perceptual networks have the expected shapes") {
    Discriminator d(1, 32, std::vector<int64_t>{8, 8, 8, 8});
    CHECK(d->forward(torch::randn({3, 1, 32, 32})).sizes() == torch::IntArrayRef({3}));
    CHECK_THROWS_AS(Discriminator(1, 32, std::vector<int64_t>{8, 8}), ConfigurationError);
    PerceptualExtractor f(1, 1);
    CHECK(f->forward(torch::randn({2, 1, 32, 32})).sizes() == torch::IntArrayRef({2, 32, 16, 16}));
    for (const auto& p : f->parameters()) CHECK_FALSE(p.requires_grad());
  }

  TEST_CASE("batch sampler walks shuffled passes and is deterministic") {
    const auto data = blob_dataset(10, 1);
    BatchSampler a(data, 4, 9), b(data, 4, 9);
    std::vector<int64_t> seen;
    for (int i = 0; i < 2; ++i) {
      const auto x = a.next();
      CHECK(x == b.next());
      seen.insert(seen.end(), x.begin(), x.end());
    }
    std::sort(seen.begin(), seen.end());
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
  }

  TEST_CASE("frozen mode never changes the generator") {
    const auto garchive = tiny_generator_archive();
    const auto before = garchive.digest();
    auto cfg = tiny_config();
    cfg.steps_per_epoch = 3;
    const auto data = blob_dataset(16, 2);
    const auto r = train_encoder(cfg, data, data.head(8), garchive);
    CHECK(r.generator_digest_before == r.generator_digest_after);
    CHECK(garchive.digest() == before);
    CHECK(r.archive.subset(kGeneratorPrefix).digest() == garchive.subset(kGeneratorPrefix).digest());
    CHECK(r.history.size() == 1);
    CHECK(r.history[0].eval_mse.has_value());
  }

  TEST_CASE("joint mode trains the generator from scratch") {
    auto cfg = tiny_config();
    cfg.generator_mode = GeneratorMode::kJointFromScratch;
    const auto garchive = tiny_generator_archive();
    EncoderTrainer t(cfg, garchive);
    CHECK(t.initial_generator_digest() != module_digest(*load_generator(garchive)));
    const auto data = blob_dataset(4, 3);
    t.step(data.images);
    CHECK(module_digest(*t.generator()) != t.initial_generator_digest());
  }

  TEST_CASE("encoder step moves encoder and discriminator, not the perceptual network") {
    auto cfg = tiny_config();
    cfg.loss_weights.lambda2 = 1.0;
    EncoderTrainer t(cfg, tiny_generator_archive());
    const auto enc_before = module_digest(*t.encoder());
    const auto d_before = module_digest(*t.discriminator());
    const auto archive_before = t.snapshot();
    const auto data = blob_dataset(4, 4);
    const auto r = t.step(data.images);
    CHECK(std::abs(r.encoder_total - (r.reconstruction + r.adversarial + r.perceptual)) <= 1e-6);
    CHECK(module_digest(*t.encoder()) != enc_before);
    CHECK(module_digest(*t.discriminator()) != d_before);
    CHECK(t.snapshot().metadata()["perceptual_digest"] == archive_before.metadata()["perceptual_digest"]);
  }

  TEST_CASE("learning rate follows the schedule across epochs") {
    auto cfg = tiny_config();
    cfg.epochs = 3;
    std::vector<double> lrs;
    RunOptions opts;
    opts.on_epoch = [&](const EpochRecord& r) { lrs.push_back(r.lr); };
    const auto data = blob_dataset(8, 5);
    train_encoder(cfg, data, Dataset{}, tiny_generator_archive(), opts);
    REQUIRE(lrs.size() == 3);
    CHECK(lrs[0] == doctest::Approx(1e-4));
    CHECK(lrs[1] == doctest::Approx(8e-5));
    CHECK(lrs[2] == doctest::Approx(6.4e-5));
  }

  TEST_CASE("resolution mismatch is a configuration error") {
    auto cfg = tiny_config();
    Dataset d;
    d.images = torch::zeros({8, 1, 64, 64});
    CHECK_THROWS_AS(train_encoder(cfg, d, Dataset{}, tiny_generator_archive()), ConfigurationError);
    cfg.encoder.input_resolution = 64;
    CHECK_THROWS(EncoderTrainer(cfg, tiny_generator_archive()));
  }

  TEST_CASE("non-finite loss aborts with a snapshot") {
    test::TempDir dir("diverge");
    auto cfg = tiny_config();
    EncoderTrainer t(cfg, tiny_generator_archive());
    t.set_output_dir(dir.path());
    auto x = blob_dataset(4, 6).images;
    x[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
    try {
      t.step(x);
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK(std::filesystem::exists(e.snapshot_path()));
      const auto snap = load_archive(e.snapshot_path());
      CHECK(snap.metadata().contains("divergence"));
      CHECK(has_encoder(snap));
    }
  }

  TEST_CASE("metrics log and checkpoints are written per epoch") {
    test::TempDir dir("run");
    auto cfg = tiny_config();
    cfg.epochs = 2;
    RunOptions opts;
    opts.out_dir = dir.path();
    const auto data = blob_dataset(8, 7);
    train_encoder(cfg, data, data.head(4), tiny_generator_archive(), opts);
    std::ifstream log(dir.path() / "metrics.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.contains("lr"));
      CHECK(j.contains("eval_mse"));
      CHECK(j.contains("eval_ssim"));
      CHECK(j.contains("reconstruction"));
      ++lines;
    }
    CHECK(lines == 2);
    CHECK(std::filesystem::exists(dir.path() / "checkpoint-epoch001.ghf"));
    const auto final_archive = load_archive(dir.path() / "encoder.ghf");
    auto bundle = load_bundle(dir.path() / "encoder.ghf");
    CHECK(bundle.spec() == test::tiny_generator());
  }

  TEST_CASE("tiny overfit run: best-so-far loss never increases and ends low") {
    auto cfg = tiny_config();
    cfg.generator_mode = GeneratorMode::kJointFromScratch;
    cfg.loss_weights = LossWeights{0.0, 0.0, 0.0};
    cfg.base_lr = 2e-3;
    cfg.lr_decay_factor = 1.0;
    cfg.batch_size = 16;
    cfg.epochs = 200;
    cfg.steps_per_epoch = 1;
    Dataset d;
    // 16 smooth blobs
    auto grid = torch::linspace(-1, 1, 32);
    auto yy = grid.view({32, 1}).expand({32, 32}), xx = grid.view({1, 32}).expand({32, 32});
    std::vector<torch::Tensor> imgs;
    for (int i = 0; i < 16; ++i) {
      const double cx = -0.5 + (i % 4) / 3.0, cy = -0.5 + (i / 4) / 3.0;
      imgs.push_back((2 * torch::exp(-((xx - cx).pow(2) + (yy - cy).pow(2)) / 0.1) - 1).unsqueeze(0));
    }
    d.images = torch::stack(imgs);
    std::vector<double> best;
    RunOptions opts;
    opts.on_epoch = [&](const EpochRecord& r) {
      best.push_back(best.empty() ? *r.eval_mse : std::min(best.back(), *r.eval_mse));
    };
    cfg.eval_samples = 16;
    train_encoder(cfg, d, d, tiny_generator_archive(), opts);
    for (size_t i = 1; i < best.size(); ++i) CHECK(best[i] <= best[i - 1]);
    CHECK(best.back() < 0.01);
  }

  TEST_CASE("GAN pretraining smoke run yields a loadable, reproducible generator") {
    test::TempDir dir("gan");
    PretrainConfig cfg;
    cfg.generator = test::tiny_generator();
    cfg.discriminator_channels = {8, 8, 8, 8};
    cfg.batch_size = 4;
    cfg.epochs = 1;
    cfg.steps_per_epoch = 2;
    RunOptions opts;
    opts.out_dir = dir.path();
    const auto r = pretrain_generator(cfg, blob_dataset(8, 8), opts);
    CHECK(std::filesystem::exists(dir.path() / "samples-epoch000.png"));
    auto g1 = load_generator(load_archive(dir.path() / "generator.ghf"));
    auto g2 = load_generator(r.archive);
    torch::NoGradGuard no_grad;
    const auto z = LatentCode::sample(4, cfg.generator.latent_dim, 1);
    CHECK(torch::equal(g1->generate(z), g2->generate(z)));
  }
}
