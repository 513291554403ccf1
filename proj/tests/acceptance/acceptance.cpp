// Acceptance gate: runs every primary criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Trained artifacts are cached under
// --cache, keyed by the digest of the configuration that produced them.

#include <CLI11.hpp>

#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ghfeat/archive.hpp"
#include "ghfeat/config.hpp"
#include "ghfeat/dataset.hpp"
#include "ghfeat/editing.hpp"
#include "ghfeat/errors.hpp"
#include "ghfeat/evaluation.hpp"
#include "ghfeat/models.hpp"
#include "ghfeat/training.hpp"

using namespace ghfeat;
namespace fs = std::filesystem;

namespace {

struct Line {
  std::string id;
  bool pass = false;
  std::string detail;
};

std::vector<Line> g_lines;

void report(const std::string& id, bool pass, const std::string& detail) {
  g_lines.push_back({id, pass, detail});
  std::cout << (pass ? "PASS " : "FAIL ") << id << ": " << detail << std::endl;
}

std::string sci(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

void log(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

std::string text_digest(const std::string& text) { return sha256_hex(text.data(), text.size()).substr(0, 16); }

// ---------------------------------------------------------------------------
// Shared state for the trained-model criteria

struct Context {
  fs::path data_dir;
  fs::path config_dir;
  fs::path cache_dir;
  Dataset train;
  Dataset test;
  std::optional<ParameterArchive> generator_archive;
  std::string generator_key;
  std::map<std::string, ParameterArchive> encoders;
};

void load_data(Context& ctx) {
  if (ctx.train.size() > 0) return;
  DatasetSpec spec;
  spec.root = ctx.data_dir;
  ctx.train = load_dataset(spec);
  spec.split = "test";
  ctx.test = load_dataset(spec);
  log("digits: " + std::to_string(ctx.train.size()) + " train, " + std::to_string(ctx.test.size()) + " test");
}

const ParameterArchive& pretrained_generator(Context& ctx) {
  if (ctx.generator_archive) return *ctx.generator_archive;
  load_data(ctx);
  const auto cfg = PretrainConfig::load(ctx.config_dir / "desk_gan.yaml");
  const auto kv_text = format_key_values(cfg.to_key_values());
  ctx.generator_key = text_digest(kv_text);
  const auto path = ctx.cache_dir / ("generator-" + ctx.generator_key + ".ghf");
  if (fs::exists(path)) {
    auto a = load_archive(path);
    if (a.metadata().value("pretrain_config", nlohmann::json{}) == nlohmann::json(cfg.to_key_values())) {
      log("using cached generator " + path.string());
      ctx.generator_archive = std::move(a);
      return *ctx.generator_archive;
    }
    log("cached generator does not match the config; retraining");
  }
  log("pretraining generator (" + std::to_string(cfg.epochs) + " epochs), writing " + path.string());
  RunOptions opts;
  opts.out_dir = ctx.cache_dir / ("generator-" + ctx.generator_key);
  opts.verbose = true;
  auto r = pretrain_generator(cfg, ctx.train, opts);
  store_archive(r.archive, path);
  ctx.generator_archive = std::move(r.archive);
  return *ctx.generator_archive;
}

const ParameterArchive& encoder_run(Context& ctx, const std::string& name) {
  if (auto it = ctx.encoders.find(name); it != ctx.encoders.end()) return it->second;
  const auto& garchive = pretrained_generator(ctx);
  const auto cfg = TrainConfig::load(ctx.config_dir / (name + ".yaml"));
  const auto key = text_digest(format_key_values(cfg.to_key_values()) + garchive.digest());
  const auto path = ctx.cache_dir / (name + "-" + key + ".ghf");
  if (fs::exists(path)) {
    log("using cached encoder " + path.string());
    return ctx.encoders.emplace(name, load_archive(path)).first->second;
  }
  log("training " + name + ", writing " + path.string());
  RunOptions opts;
  opts.out_dir = ctx.cache_dir / (name + "-" + key);
  opts.verbose = true;
  auto r = train_encoder(cfg, ctx.train, ctx.test.head(cfg.eval_samples), garchive, opts);
  r.archive.metadata()["generator_digest_before"] = r.generator_digest_before;
  r.archive.metadata()["generator_digest_after"] = r.generator_digest_after;
  store_archive(r.archive, path);
  return ctx.encoders.emplace(name, std::move(r.archive)).first->second;
}

ModelBundle bundle_for(Context& ctx, const std::string& name) {
  const auto& a = encoder_run(ctx, name);
  return make_bundle(load_generator(a), load_encoder(a));
}

StyleCodeHierarchy encode_all(ModelBundle& m, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  std::vector<StyleCodeHierarchy> parts;
  for (int64_t i = 0; i < images.size(0); i += 128) {
    parts.push_back(m.encoder->encode_styles(images.slice(0, i, std::min(i + 128, images.size(0))), *m.generator));
  }
  return StyleCodeHierarchy::concat(parts);
}

torch::Tensor synthesize_all(ModelBundle& m, const StyleCodeHierarchy& codes) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < codes.batch_size(); i += 128) {
    parts.push_back(m.generator->synthesize(codes.rows(i, std::min(i + 128, codes.batch_size()))));
  }
  return torch::cat(parts, 0);
}

double heldout_mse(Context& ctx, const std::string& name) {
  auto m = bundle_for(ctx, name);
  const auto rec = synthesize_all(m, encode_all(m, ctx.test.images));
  return mean_squared_error(ctx.test.images, rec);
}

// ---------------------------------------------------------------------------
// Criteria

void injection_round_trip(Context& ctx) {
  const auto& garchive = pretrained_generator(ctx);
  auto g = load_generator(garchive);
  freeze(*g);
  torch::NoGradGuard no_grad;
  const auto z = LatentCode::sample(100, g->spec().latent_dim, 12345);
  const auto native = g->generate(z);
  const auto injected = g->synthesize(g->style_codes_from_w(g->map_latent(z)));
  const double dev = max_abs_diff(native, injected);
  report("injection_round_trip", dev <= 1e-5, "max per-pixel deviation " + sci(dev) + " over 100 z (<= 1e-5)");
}

void frozen_contract(Context& ctx) {
  const auto& garchive = pretrained_generator(ctx);
  const auto cfg = TrainConfig::load(ctx.config_dir / "desk_encoder_y.yaml");
  EncoderTrainer trainer(cfg, garchive);
  const auto archived = module_digest(*load_generator(garchive));
  const auto before = module_digest(*trainer.generator());
  BatchSampler sampler(ctx.train, cfg.batch_size, cfg.seed + 500);
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < 500; ++i) trainer.step(ctx.train.gather(sampler.next()));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto after = module_digest(*trainer.generator());
  const bool ok = before == after && before == archived && trainer.global_step() == 500;
  report("frozen_generator_contract", ok,
         "500 FROZEN steps in " + sci(secs) + " s; generator digest " + before.substr(0, 12) +
             (before == after ? " unchanged" : " -> " + after.substr(0, 12)));
}

void gradient_penalty_fd() {
  torch::manual_seed(99);
  Discriminator d(1, 4, std::vector<int64_t>{6});
  d->to(torch::kFloat64);
  const Critic critic = [&](const torch::Tensor& v) { return d->forward(v); };
  auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
  double worst_grad = 0, worst_penalty = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = torch::randn({1, 1, 4, 4}, gen, torch::kFloat64);
    auto xg = x.clone().requires_grad_(true);
    const auto analytic = torch::autograd::grad({critic(xg).sum()}, {xg})[0].flatten();
    const double penalty = gradient_penalty(critic, x).item<double>();
    torch::NoGradGuard no_grad;
    auto fd = torch::zeros({16}, torch::kFloat64);
    const double h = 1e-5;
    for (int i = 0; i < 16; ++i) {
      auto xp = x.clone(), xm = x.clone();
      xp.view(-1)[i] += h;
      xm.view(-1)[i] -= h;
      fd[i] = (critic(xp).item<double>() - critic(xm).item<double>()) / (2 * h);
    }
    const double fd_norm = fd.norm().item<double>();
    worst_grad = std::max(worst_grad, (analytic - fd).norm().item<double>() / std::max(fd_norm, 1e-12));
    worst_penalty = std::max(worst_penalty, std::abs(penalty - fd_norm * fd_norm) / std::max(fd_norm * fd_norm, 1e-12));
  }
  const double worst = std::max(worst_grad, worst_penalty);
  report("gradient_penalty_finite_differences", worst <= 1e-3,
         "max relative error " + sci(worst) + " over 20 points (gradient " + sci(worst_grad) + ", penalty " +
             sci(worst_penalty) + "; <= 1e-3)");
}

void loss_arithmetic() {
  // Three-pixel toy images, affine critic and a 2-output feature map, all
  // evaluated by hand below.
  const double xs[3][3] = {{0.5, -0.25, 0.0}, {1.0, 0.75, -1.0}, {-0.5, 0.5, 0.25}};
  const double rs[3][3] = {{0.25, 0.0, 0.5}, {0.5, 0.5, -0.5}, {-0.75, 0.25, 0.0}};
  const double a[3] = {0.7, -0.3, 1.1}, c0 = -0.2;
  auto to_tensor = [](const double (&v)[3][3]) {
    auto t = torch::empty({3, 1, 1, 3}, torch::kFloat64);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) t[i][0][0][j] = v[i][j];
    return t;
  };
  const auto x = to_tensor(xs), rec = to_tensor(rs);
  const auto av = torch::tensor({a[0], a[1], a[2]}, torch::kFloat64);
  const Critic critic = [&](const torch::Tensor& v) { return v.flatten(1).matmul(av) + c0; };
  const FeatureFn features = [](const torch::Tensor& v) {
    const auto f = v.flatten(1);
    return torch::stack({f.select(1, 0) - f.select(1, 2), 2.0 * f.select(1, 1)}, 1);
  };
  const LossWeights w{0.1, 5e-5, 5.0};

  double recon = 0, d_rec = 0, d_real = 0, perc = 0;
  for (int i = 0; i < 3; ++i) {
    double dr = c0, dx = c0;
    for (int j = 0; j < 3; ++j) {
      recon += (xs[i][j] - rs[i][j]) * (xs[i][j] - rs[i][j]) / 9.0;
      dr += a[j] * rs[i][j];
      dx += a[j] * xs[i][j];
    }
    d_rec += dr / 3.0;
    d_real += dx / 3.0;
    const double f0 = (xs[i][0] - xs[i][2]) - (rs[i][0] - rs[i][2]);
    const double f1 = 2 * xs[i][1] - 2 * rs[i][1];
    perc += (f0 * f0 + f1 * f1) / 6.0;
  }
  const double enc_expected = recon - w.lambda1 * d_rec + w.lambda2 * perc;
  const double a_sq = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
  const double disc_expected = d_rec - d_real + w.lambda3 * a_sq;

  const auto e = encoder_loss(x, rec, critic, features, w);
  const auto d = discriminator_loss(x, rec, critic, w);
  const double enc_err = std::abs(e.total.item<double>() - enc_expected);
  const double pen_err = std::abs(d.penalty.item<double>() - w.lambda3 * a_sq);
  const double disc_err = std::abs(d.total.item<double>() - disc_expected);
  const bool ok = enc_err <= 1e-6 && pen_err <= 1e-12 && disc_err <= 1e-12;
  report("loss_arithmetic", ok,
         "encoder |diff| " + sci(enc_err) + " (<= 1e-6); penalty |diff| " + sci(pen_err) + ", discriminator |diff| " +
             sci(disc_err) + " (exact in float64)");
}

torch::Tensor probe_features(ModelBundle& m, const torch::Tensor& images) { return encode_all(m, images).flatten(); }

void desk_pipeline(Context& ctx) {
  load_data(ctx);
  const double mse_y = heldout_mse(ctx, "desk_encoder_y");
  report("desk_pipeline.a_reconstruction_mse", mse_y <= 0.05,
         "held-out MSE " + sci(mse_y) + " on " + std::to_string(ctx.test.size()) + " digits (<= 0.05)");

  auto m = bundle_for(ctx, "desk_encoder_y");
  const auto train = ctx.train.head(5000);
  const auto ytr = torch::tensor(train.labels, torch::kLong), yte = torch::tensor(ctx.test.labels, torch::kLong);
  const auto r = train_linear_probe(probe_features(m, train.images), ytr, probe_features(m, ctx.test.images), yte,
                                    TaskKind::kClassification);
  report("desk_pipeline.b_digit_probe", r.score >= 95.0,
         "top-1 " + sci(r.score) + "% on concatenated codes, 5000 train / " + std::to_string(ctx.test.size()) +
             " test (>= 95%)");

  const double mse_w = heldout_mse(ctx, "desk_encoder_w");
  report("desk_pipeline.c_style_beats_latent", mse_y < mse_w,
         "per-layer style codes MSE " + sci(mse_y) + " vs single-w MSE " + sci(mse_w));

  const double mse_joint = heldout_mse(ctx, "desk_encoder_joint");
  report("desk_pipeline.d_frozen_beats_joint", mse_y < mse_joint,
         "FROZEN MSE " + sci(mse_y) + " vs JOINT_FROM_SCRATCH MSE " + sci(mse_joint) + " at equal steps");
}

void hierarchy_ordering(Context& ctx) {
  load_data(ctx);
  auto m = bundle_for(ctx, "desk_encoder_y");
  const auto train = ctx.train.head(5000);
  const auto codes_tr = encode_all(m, train.images), codes_te = encode_all(m, ctx.test.images);
  const int64_t L = m.spec().layer_count();

  const auto lum = level_sweep("luminance", codes_tr, luminance_batch(train.images), codes_te,
                               luminance_batch(ctx.test.images), TaskKind::kRegressionL1);
  lum.check(L);
  std::ostringstream lum_curve;
  for (double s : lum.per_level) lum_curve << sci(s) << " ";
  report("hierarchy.luminance", lum.per_level.front() < lum.per_level.back(),
         "L1 error level 1 " + sci(lum.per_level.front()) + " < level " + std::to_string(L) + " " +
             sci(lum.per_level.back()) + " [curve " + lum_curve.str() + "]");

  const auto digit = level_sweep("digit", codes_tr, torch::tensor(train.labels, torch::kLong), codes_te,
                                 torch::tensor(ctx.test.labels, torch::kLong), TaskKind::kClassification);
  digit.check(L);
  int64_t best = 2;
  for (int64_t l = 2; l <= L; ++l) {
    if (digit.per_level[l - 1] > digit.per_level[best - 1]) best = l;
  }
  std::ostringstream digit_curve;
  for (double s : digit.per_level) digit_curve << sci(s) << " ";
  report("hierarchy.digit", digit.per_level[best - 1] > digit.per_level.front(),
         "accuracy level " + std::to_string(best) + " " + sci(digit.per_level[best - 1]) + "% > level 1 " +
             sci(digit.per_level.front()) + "% [curve " + digit_curve.str() + "]");
}

void editing_identities(Context& ctx) {
  load_data(ctx);
  auto m = bundle_for(ctx, "desk_encoder_y");
  torch::NoGradGuard no_grad;
  const int64_t L = m.spec().layer_count();
  const auto content = encode_all(m, ctx.test.images.slice(0, 0, 64));
  const auto style = encode_all(m, ctx.test.images.slice(0, 64, 128));
  const auto rec_content = synthesize_all(m, content), rec_style = synthesize_all(m, style);

  double worst = 0;
  worst = std::max(worst, max_abs_diff(style_mix(*m.generator, content, content, LevelRange(1, L)), rec_content));
  worst = std::max(worst, max_abs_diff(style_mix(*m.generator, content, content, LevelRange(2, L - 1)), rec_content));
  worst = std::max(worst, max_abs_diff(style_mix(*m.generator, content, style, LevelRange(1, L)), rec_style));
  for (int64_t layer : {2L, L / 2, L}) {
    const auto r = m.spec().output_resolution;
    const auto e = local_edit(*m.generator, content, layer, torch::zeros({r, r}), style);
    if (!e.empty_mask) worst = std::max(worst, 1.0);
    worst = std::max(worst, max_abs_diff(e.image, rec_content));
  }
  const auto g1 = global_edit(*m.generator, content, LevelRange(1, L / 2), 77);
  const auto g2 = global_edit(*m.generator, content, LevelRange(1, L / 2), 77);
  worst = std::max(worst, max_abs_diff(g1, g2));
  report("editing.identities", worst <= 1e-5,
         "self-mix, full swap, zero-mask local edit, seeded sampling: max deviation " + sci(worst) + " (<= 1e-5)");

  const auto top = style_mix(*m.generator, content, style, LevelRange(L - 1, L));
  const auto bottom = style_mix(*m.generator, content, style, LevelRange(1, 2));
  const double d_top = (1 - ssim_per_image(top, rec_content)).mean().item<double>();
  const double d_bottom = (1 - ssim_per_image(bottom, rec_content)).mean().item<double>();
  report("editing.level_contrast", d_top >= d_bottom,
         "mean 1-SSIM top-two-level swap " + sci(d_top) + " >= bottom-two-level swap " + sci(d_bottom) +
             " over 64 images");
}

void metric_identities(Context& ctx) {
  load_data(ctx);
  const auto embed = make_fixed_embedder(1);
  const auto a = ctx.test.images;
  const auto self = reconstruction_metrics(a, a, embed);
  const bool ok_self = self.mse == 0.0 && std::abs(self.ssim - 1.0) <= 1e-8 && std::abs(self.fid) <= 1e-4;
  report("metrics.self_identity", ok_self,
         "(MSE, SSIM, FID) = (" + sci(self.mse) + ", " + sci(self.ssim) + ", " + sci(self.fid) +
             "); tolerances 0, 1e-8, 1e-4");

  auto g = load_generator(pretrained_generator(ctx));
  freeze(*g);
  const int64_t n = a.size(0) / 2;
  torch::Tensor fake;
  {
    torch::NoGradGuard no_grad;
    fake = g->generate(LatentCode::sample(n, g->spec().latent_dim, 4242)).clamp(-1, 1);
  }
  const auto a1 = a.slice(0, 0, n), a2 = a.slice(0, n, 2 * n);
  const auto aa = frechet_inception_distance(a1, a2, embed);
  const auto ab = frechet_inception_distance(a1, fake, embed);
  report("metrics.fid_ordering", aa.value < ab.value,
         "A/A FID " + sci(aa.value) + " (disjoint halves of held-out digits) < A/B FID " + sci(ab.value) +
             " (held-out digits vs generator samples)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ghfeat acceptance gate"};
  Context ctx;
  std::vector<std::string> only;
  int threads = 0;
  app.add_option("--data", ctx.data_dir, "IDX digit directory")->required();
  app.add_option("--configs", ctx.config_dir, "directory with desk_*.yaml")->required();
  app.add_option("--cache", ctx.cache_dir, "artifact cache directory")->required();
  app.add_option("--only", only, "run only these criterion groups");
  app.add_option("--threads", threads, "torch intra-op threads (0 = library default)");
  CLI11_PARSE(app, argc, argv);
  if (threads > 0) torch::set_num_threads(threads);
  fs::create_directories(ctx.cache_dir);

  struct Group {
    std::string name;
    std::function<void()> run;
  };
  const std::vector<Group> groups{
      {"injection_round_trip", [&] { injection_round_trip(ctx); }},
      {"frozen_generator_contract", [&] { frozen_contract(ctx); }},
      {"gradient_penalty_finite_differences", [] { gradient_penalty_fd(); }},
      {"loss_arithmetic", [] { loss_arithmetic(); }},
      {"desk_pipeline", [&] { desk_pipeline(ctx); }},
      {"hierarchy", [&] { hierarchy_ordering(ctx); }},
      {"editing", [&] { editing_identities(ctx); }},
      {"metrics", [&] { metric_identities(ctx); }},
  };
  for (const auto& g : groups) {
    if (!only.empty() && std::find(only.begin(), only.end(), g.name) == only.end()) continue;
    try {
      g.run();
    } catch (const std::exception& e) {
      report(g.name, false, std::string("error: ") + e.what());
    }
  }
  int failed = 0;
  for (const auto& l : g_lines) failed += l.pass ? 0 : 1;
  std::cout << (failed == 0 ? "ALL PASS" : "FAILURES: " + std::to_string(failed)) << " (" << g_lines.size()
            << " checks)" << std::endl;
  return failed == 0 ? 0 : 1;
}
