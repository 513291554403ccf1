#include "ghfeat/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ghfeat/errors.hpp"

namespace ghfeat {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

constexpr int64_t kSsimWindow = 7;
constexpr double kSsimK1 = 0.01;
constexpr double kSsimK2 = 0.03;
constexpr double kDataRange = 2.0;

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

torch::Tensor to_luma(const torch::Tensor& x) {
  if (x.size(1) == 3) {
    return (0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2)).unsqueeze(1);
  }
  return x;
}

}  // namespace

double mean_squared_error(const torch::Tensor& a, const torch::Tensor& b) {
  GHFEAT_EXPECT(a.sizes() == b.sizes(), "MSE needs equally shaped inputs");
  return (a.detach().to(torch::kFloat64) - b.detach().to(torch::kFloat64)).pow(2).mean().item<double>();
}

torch::Tensor ssim_per_image(const torch::Tensor& a_in, const torch::Tensor& b_in) {
  GHFEAT_EXPECT(a_in.sizes() == b_in.sizes(), "SSIM needs equally shaped inputs");
  const auto a = to_luma(as_batch(a_in.detach().to(torch::kFloat64)));
  const auto b = to_luma(as_batch(b_in.detach().to(torch::kFloat64)));
  GHFEAT_EXPECT(a.size(2) >= kSsimWindow && a.size(3) >= kSsimWindow, "SSIM needs images of at least 7x7");

  auto filt = [](const torch::Tensor& x) { return F::avg_pool2d(x, F::AvgPool2dFuncOptions(kSsimWindow).stride(1)); };
  const double np = static_cast<double>(kSsimWindow * kSsimWindow);
  const double cov_norm = np / (np - 1.0);
  const auto ux = filt(a), uy = filt(b);
  const auto vx = cov_norm * (filt(a * a) - ux * ux);
  const auto vy = cov_norm * (filt(b * b) - uy * uy);
  const auto vxy = cov_norm * (filt(a * b) - ux * uy);
  const double c1 = std::pow(kSsimK1 * kDataRange, 2), c2 = std::pow(kSsimK2 * kDataRange, 2);
  const auto map = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
  return map.mean({1, 2, 3});
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) { return ssim_per_image(a, b).mean().item<double>(); }

GaussianFit fit_gaussian(const torch::Tensor& features) {
  GHFEAT_EXPECT(features.dim() == 2 && features.size(0) >= 2, "Gaussian fit needs [N >= 2, D] features");
  const auto x = features.detach().to(torch::kFloat64);
  GaussianFit fit;
  fit.mean = x.mean(0);
  const auto centered = x - fit.mean;
  fit.cov = centered.t().matmul(centered) / static_cast<double>(x.size(0) - 1);
  if (x.size(0) - 1 < x.size(1)) {
    fit.cov = fit.cov + 1e-6 * torch::eye(x.size(1), torch::kFloat64);
    fit.regularized = true;
  }
  return fit;
}

double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  GHFEAT_EXPECT(a.mean.sizes() == b.mean.sizes(), "Gaussian fits have different dimensions");
  // Tr((A B)^1/2) = Tr((A^1/2 B A^1/2)^1/2), which keeps everything symmetric.
  auto [eval_a, evec_a] = torch::linalg_eigh(a.cov);
  const auto sqrt_a = evec_a.matmul(torch::diag(eval_a.clamp_min(0).sqrt())).matmul(evec_a.t());
  auto middle = sqrt_a.matmul(b.cov).matmul(sqrt_a);
  middle = 0.5 * (middle + middle.t());
  const auto eval_m = torch::linalg_eigvalsh(middle);
  const double cross = eval_m.clamp_min(0).sqrt().sum().item<double>();
  const double mean_term = (a.mean - b.mean).pow(2).sum().item<double>();
  const double value = mean_term + a.cov.trace().item<double>() + b.cov.trace().item<double>() - 2.0 * cross;
  return std::max(value, 0.0);
}

FidResult frechet_inception_distance(const torch::Tensor& a, const torch::Tensor& b, const Embedder& embed) {
  torch::NoGradGuard no_grad;
  const auto fa = fit_gaussian(embed(as_batch(a)));
  const auto fb = fit_gaussian(embed(as_batch(b)));
  return {frechet_distance(fa, fb), fa.regularized || fb.regularized};
}

MetricTriple reconstruction_metrics(const torch::Tensor& real, const torch::Tensor& reconstructed,
                                    const Embedder& embed) {
  GHFEAT_EXPECT(real.sizes() == reconstructed.sizes(), "metric sets must be aligned and equally sized");
  MetricTriple m;
  m.mse = mean_squared_error(real, reconstructed);
  m.ssim = ssim(real, reconstructed);
  const auto f = frechet_inception_distance(real, reconstructed, embed);
  m.fid = f.value;
  m.fid_regularized = f.regularized;
  return m;
}

FixedEmbedderImpl::FixedEmbedderImpl(int64_t image_channels, uint64_t seed) {
  torch::manual_seed(seed);
  net_ = register_module(
      "net", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(image_channels, 32, 3).stride(2).padding(1)),
                            nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                            nn::Conv2d(nn::Conv2dOptions(32, 64, 3).stride(2).padding(1)),
                            nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                            nn::Conv2d(nn::Conv2dOptions(64, 64, 3).stride(2).padding(1)),
                            nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2))));
  for (auto& p : parameters()) p.set_requires_grad(false);
  eval();
}

torch::Tensor FixedEmbedderImpl::forward(const torch::Tensor& images) {
  return net_->forward(images).mean({2, 3});
}

Embedder make_fixed_embedder(int64_t image_channels, uint64_t seed) {
  auto net = FixedEmbedder(image_channels, seed);
  return [net](const torch::Tensor& images) mutable {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < images.size(0); i += 256) {
      parts.push_back(net->forward(images.slice(0, i, std::min(images.size(0), i + 256))));
    }
    return torch::cat(parts, 0);
  };
}

double luminance(const torch::Tensor& image) {
  GHFEAT_EXPECT(image.dim() == 3 && (image.size(0) == 1 || image.size(0) == 3), "luminance expects [1|3, H, W]");
  return luminance_batch(image.unsqueeze(0)).item<double>();
}

torch::Tensor luminance_batch(const torch::Tensor& images) {
  GHFEAT_EXPECT(images.dim() == 4, "luminance_batch expects [N, C, H, W]");
  const auto y = to_luma(images.detach().to(torch::kFloat64));
  return ((y.mean({1, 2, 3}) + 1.0) / 2.0).to(torch::kFloat32);
}

// ---------------------------------------------------------------------------
// Probes

MetricKind metric_for(TaskKind kind) {
  switch (kind) {
    case TaskKind::kClassification: return MetricKind::kAccuracy;
    case TaskKind::kRegressionL1: return MetricKind::kL1Error;
    case TaskKind::kRegressionL2: return MetricKind::kMse;
  }
  return MetricKind::kAccuracy;
}

bool higher_is_better(MetricKind kind) { return kind == MetricKind::kAccuracy; }

std::string to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::kAccuracy: return "accuracy";
    case MetricKind::kL1Error: return "l1_error";
    case MetricKind::kMse: return "mse";
  }
  return "?";
}

torch::Tensor LinearProbe::predict(const torch::Tensor& features) const {
  torch::NoGradGuard no_grad;
  const auto x = (features.detach().to(torch::kFloat64) - feature_mean) / feature_scale;
  const auto out = x.matmul(weight.t()) + bias;
  if (kind == TaskKind::kClassification) return out.argmax(1);
  return out.squeeze(1);
}

double score_predictions(const torch::Tensor& predictions, const torch::Tensor& targets, MetricKind metric) {
  GHFEAT_EXPECT(predictions.size(0) == targets.size(0) && predictions.size(0) > 0, "score needs aligned predictions");
  switch (metric) {
    case MetricKind::kAccuracy:
      return 100.0 * predictions.eq(targets.to(torch::kLong)).to(torch::kFloat64).mean().item<double>();
    case MetricKind::kL1Error:
      return (predictions.to(torch::kFloat64) - targets.to(torch::kFloat64)).abs().mean().item<double>();
    case MetricKind::kMse:
      return (predictions.to(torch::kFloat64) - targets.to(torch::kFloat64)).pow(2).mean().item<double>();
  }
  return 0.0;
}

ProbeResult train_linear_probe(const torch::Tensor& train_features, const torch::Tensor& train_targets,
                               const torch::Tensor& test_features, const torch::Tensor& test_targets,
                               TaskKind kind, const ProbeOptions& options) {
  GHFEAT_EXPECT(train_features.dim() == 2 && test_features.dim() == 2, "probe features must be [N, D]");
  GHFEAT_EXPECT(train_features.size(1) == test_features.size(1), "train/test feature widths differ");
  GHFEAT_EXPECT(train_features.size(0) == train_targets.size(0) && test_features.size(0) == test_targets.size(0),
                "probe targets must align with features");

  torch::NoGradGuard outer;
  const auto x_raw = train_features.detach().to(torch::kFloat64);
  LinearProbe probe;
  probe.kind = kind;
  probe.feature_mean = x_raw.mean(0);
  auto scale = x_raw.std(0, /*unbiased=*/false);
  probe.feature_scale = torch::where(scale > 1e-12, scale, torch::ones_like(scale));
  const auto x = (x_raw - probe.feature_mean) / probe.feature_scale;
  const int64_t d = x.size(1);

  if (kind == TaskKind::kClassification) {
    const auto y = train_targets.to(torch::kLong);
    const int64_t classes = std::max(y.max().item<int64_t>(), test_targets.to(torch::kLong).max().item<int64_t>()) + 1;
    if (std::get<0>(at::_unique(y)).size(0) < 2) throw ContractViolation("probe labels contain a single class");

    torch::manual_seed(options.seed);
    auto weight = torch::zeros({classes, d}, torch::kFloat64).requires_grad_(true);
    auto bias = torch::zeros({classes}, torch::kFloat64).requires_grad_(true);
    torch::optim::LBFGS opt({weight, bias}, torch::optim::LBFGSOptions(1.0)
                                                .max_iter(options.iterations)
                                                .history_size(20)
                                                .line_search_fn("strong_wolfe"));
    torch::AutoGradMode enable(true);
    auto closure = [&] {
      opt.zero_grad();
      auto loss = F::cross_entropy(x.matmul(weight.t()) + bias, y) + options.l2 * weight.pow(2).sum();
      loss.backward();
      return loss;
    };
    opt.step(closure);
    probe.weight = weight.detach();
    probe.bias = bias.detach();
  } else {
    const auto y = train_targets.to(torch::kFloat64);
    const auto y_mean = y.mean();
    const auto yc = (y - y_mean).unsqueeze(1);
    const auto gram = x.t().matmul(x) + options.ridge * static_cast<double>(x.size(0)) * torch::eye(d, torch::kFloat64);
    auto beta = torch::linalg_solve(gram, x.t().matmul(yc));  // [D, 1]
    probe.weight = beta.t().contiguous();
    probe.bias = y_mean.reshape({1});
    if (kind == TaskKind::kRegressionL1 && yc.abs().max().item<double>() > 0) {
      torch::AutoGradMode enable(true);
      auto weight = probe.weight.clone().requires_grad_(true);
      auto bias = probe.bias.clone().requires_grad_(true);
      torch::optim::Adam opt({weight, bias}, torch::optim::AdamOptions(1e-3));
      for (int64_t i = 0; i < options.iterations; ++i) {
        opt.zero_grad();
        auto loss = (x.matmul(weight.t()).squeeze(1) + bias - y).abs().mean();
        loss.backward();
        opt.step();
      }
      probe.weight = weight.detach();
      probe.bias = bias.detach();
    }
  }

  ProbeResult result;
  result.metric = metric_for(kind);
  result.score = score_predictions(probe.predict(test_features), test_targets, result.metric);
  result.probe = std::move(probe);
  return result;
}

bool ProbeReport::better(double a, double b) const { return higher_is_better(metric) ? a > b : a < b; }

void ProbeReport::check(int64_t layer_count) const {
  GHFEAT_EXPECT(static_cast<int64_t>(per_level.size()) == layer_count, "probe report must have one score per level");
  for (double s : per_level) GHFEAT_EXPECT(std::isfinite(s), "probe report contains a non-finite score");
}

std::vector<nlohmann::json> ProbeReport::records() const {
  std::vector<nlohmann::json> out;
  for (size_t i = 0; i < per_level.size(); ++i) {
    out.push_back({{"task", task_id}, {"level", i + 1}, {"metric", to_string(metric)}, {"score", per_level[i]}});
  }
  for (size_t i = 0; i < grouping.size(); ++i) {
    out.push_back({{"task", task_id}, {"strategy", "grouping"}, {"prefix", i + 1}, {"metric", to_string(metric)},
                   {"score", grouping[i]}});
  }
  if (voting) out.push_back({{"task", task_id}, {"strategy", "voting"}, {"metric", to_string(metric)}, {"score", *voting}});
  return out;
}

ProbeReport level_sweep(const std::string& task_id, const StyleCodeHierarchy& train_codes,
                        const torch::Tensor& train_targets, const StyleCodeHierarchy& test_codes,
                        const torch::Tensor& test_targets, TaskKind kind, const ProbeOptions& options) {
  GHFEAT_EXPECT(train_codes.layer_count() == test_codes.layer_count(), "train/test hierarchies differ in depth");
  ProbeReport report;
  report.task_id = task_id;
  report.metric = metric_for(kind);
  for (int64_t level = 1; level <= train_codes.layer_count(); ++level) {
    const auto r = train_linear_probe(train_codes.level_features(level).detach(), train_targets,
                                      test_codes.level_features(level).detach(), test_targets, kind, options);
    report.per_level.push_back(r.score);
  }
  report.check(train_codes.layer_count());
  return report;
}

// ---------------------------------------------------------------------------
// Verification

namespace {

torch::Tensor cosine_rows(const torch::Tensor& a_in, const torch::Tensor& b_in, int64_t& zero_norm) {
  const auto a = a_in.detach().to(torch::kFloat64);
  const auto b = b_in.detach().to(torch::kFloat64);
  const auto na = a.norm(2, 1), nb = b.norm(2, 1);
  const auto denom = na * nb;
  const auto zero = denom.eq(0);
  zero_norm += zero.sum().item<int64_t>();
  const auto sim = (a * b).sum(1) / torch::where(zero, torch::ones_like(denom), denom);
  return torch::where(zero, torch::zeros_like(sim), sim);
}

}  // namespace

Similarities pair_similarities(const PairSet& pairs, const VerifySpec& spec) {
  const int64_t l = pairs.first.layer_count();
  GHFEAT_EXPECT(l == pairs.second.layer_count(), "pair hierarchies differ in depth");
  GHFEAT_EXPECT(pairs.first.batch_size() == pairs.second.batch_size() &&
                    pairs.first.batch_size() == static_cast<int64_t>(pairs.same.size()),
                "pair sides and labels must align");
  Similarities out;
  switch (spec.strategy) {
    case VerifyStrategy::kSingle:
      out.values = cosine_rows(pairs.first.level_features(spec.parameter), pairs.second.level_features(spec.parameter),
                               out.zero_norm);
      break;
    case VerifyStrategy::kGrouping: {
      GHFEAT_EXPECT(spec.parameter >= 1 && spec.parameter <= l, "grouping prefix out of range");
      std::vector<torch::Tensor> a, b;
      for (int64_t k = 0; k < spec.parameter; ++k) {
        a.push_back(pairs.first.level_features(l - k));
        b.push_back(pairs.second.level_features(l - k));
      }
      out.values = cosine_rows(torch::cat(a, 1), torch::cat(b, 1), out.zero_norm);
      break;
    }
    case VerifyStrategy::kVoting: {
      std::vector<torch::Tensor> per_level;
      for (int64_t level = 1; level <= l; ++level) {
        per_level.push_back(
            cosine_rows(pairs.first.level_features(level), pairs.second.level_features(level), out.zero_norm));
      }
      out.values = std::get<0>(torch::stack(per_level, 1).max(1));
      break;
    }
  }
  return out;
}

double threshold_accuracy(const torch::Tensor& similarities, const std::vector<bool>& same, double threshold) {
  const auto s = similarities.to(torch::kFloat64).contiguous();
  const double* v = s.data_ptr<double>();
  int64_t correct = 0;
  for (size_t i = 0; i < same.size(); ++i) correct += ((v[i] > threshold) == same[i]) ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(same.size());
}

double fit_threshold(const torch::Tensor& similarities, const std::vector<bool>& same) {
  GHFEAT_EXPECT(similarities.size(0) == static_cast<int64_t>(same.size()) && !same.empty(),
                "threshold fit needs aligned, non-empty inputs");
  const auto s = similarities.to(torch::kFloat64).contiguous();
  std::vector<double> sorted(s.data_ptr<double>(), s.data_ptr<double>() + s.numel());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> candidates{sorted.front() - 1.0};
  for (size_t i = 0; i + 1 < sorted.size(); ++i) {
    if (sorted[i] < sorted[i + 1]) candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
  }
  candidates.push_back(sorted.back());
  double best = candidates.front(), best_acc = -1.0;
  for (double t : candidates) {
    const double acc = threshold_accuracy(s, same, t);
    if (acc > best_acc) {
      best_acc = acc;
      best = t;
    }
  }
  return best;
}

VerificationResult verify_pairs(const PairSet& calibration, const PairSet& evaluation, const VerifySpec& spec) {
  const auto cal = pair_similarities(calibration, spec);
  const auto ev = pair_similarities(evaluation, spec);
  VerificationResult r;
  r.threshold = fit_threshold(cal.values, calibration.same);
  r.accuracy = threshold_accuracy(ev.values, evaluation.same, r.threshold);
  r.zero_norm = cal.zero_norm + ev.zero_norm;
  return r;
}

}  // namespace ghfeat
