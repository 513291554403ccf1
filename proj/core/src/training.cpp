#include "ghfeat/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "ghfeat/errors.hpp"
#include "ghfeat/evaluation.hpp"
#include "ghfeat/image_io.hpp"
#include "ghfeat/models.hpp"

namespace ghfeat {

namespace nn = torch::nn;
namespace F = torch::nn::functional;
namespace fs = std::filesystem;

namespace {

torch::Tensor lrelu(const torch::Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(kLeakySlope)); }

// D(x) and the unweighted penalty at x. A critic whose output does not depend
// on its input has a zero gradient.
std::pair<torch::Tensor, torch::Tensor> critic_with_penalty(const Critic& critic, const torch::Tensor& x) {
  auto xr = x.detach().requires_grad_(true);
  auto out = critic(xr);
  if (!out.requires_grad()) return {out, torch::zeros({}, x.options())};
  auto grads = torch::autograd::grad({out.sum()}, {xr}, {}, /*retain_graph=*/true, /*create_graph=*/true,
                                     /*allow_unused=*/true);
  if (!grads[0].defined()) return {out, torch::zeros({}, x.options())};
  return {out, grads[0].pow(2).flatten(1).sum(1).mean()};
}

void set_requires_grad(nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

std::string epoch_name(const std::string& stem, int64_t epoch, const std::string& ext) {
  std::ostringstream s;
  s << stem << "-epoch" << std::setw(3) << std::setfill('0') << epoch << ext;
  return s.str();
}

void append_line(const fs::path& path, const nlohmann::json& record) {
  std::ofstream out(path, std::ios::app);
  out << record.dump() << '\n';
}

fs::path snapshot_path(const fs::path& dir, int64_t step) {
  const auto base = dir.empty() ? fs::temp_directory_path() : dir;
  fs::create_directories(base);
  return base / ("diverged-step" + std::to_string(step) + ".ghf");
}

void check_images(const Dataset& data, const GeneratorSpec& spec, const char* what) {
  if (data.size() == 0) throw ConfigurationError(std::string(what) + " dataset is empty");
  if (data.images.size(1) != spec.image_channels || data.images.size(2) != spec.output_resolution ||
      data.images.size(3) != spec.output_resolution) {
    throw ConfigurationError(std::string(what) + " images do not match the generator resolution/channels");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Networks

DiscriminatorImpl::DiscriminatorImpl(int64_t image_channels, int64_t resolution, std::vector<int64_t> channels)
    : resolution_(resolution) {
  if (resolution < 4 || (resolution & (resolution - 1)) != 0) {
    throw ConfigurationError("discriminator resolution must be a power of two >= 4");
  }
  int64_t downs = 0;
  for (int64_t r = resolution; r > 4; r /= 2) ++downs;
  if (static_cast<int64_t>(channels.size()) != downs + 1) {
    throw ConfigurationError("discriminator needs " + std::to_string(downs + 1) + " channel entries for " +
                             std::to_string(resolution) + "px input");
  }
  from_image_ = register_module("from_image", nn::Conv2d(nn::Conv2dOptions(image_channels, channels[0], 1)));
  for (int64_t i = 0; i < downs; ++i) {
    blocks_.push_back(register_module(
        "block" + std::to_string(i),
        nn::Conv2d(nn::Conv2dOptions(channels[static_cast<size_t>(i)], channels[static_cast<size_t>(i + 1)], 3)
                       .padding(1))));
  }
  score_ = register_module("score", nn::Linear(channels.back() * 16, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images) {
  auto x = lrelu(from_image_->forward(images));
  for (auto& conv : blocks_) x = F::avg_pool2d(lrelu(conv->forward(x)), F::AvgPool2dFuncOptions(2));
  return score_->forward(x.flatten(1)).squeeze(1);
}

PerceptualExtractorImpl::PerceptualExtractorImpl(int64_t image_channels, uint64_t seed) {
  torch::manual_seed(seed);
  register_module("conv1", nn::Conv2d(nn::Conv2dOptions(image_channels, 16, 3).padding(1)));
  register_module("conv2", nn::Conv2d(nn::Conv2dOptions(16, 32, 3).stride(2).padding(1)));
  register_module("conv3", nn::Conv2d(nn::Conv2dOptions(32, 32, 3).padding(1)));
  for (auto& p : parameters()) p.set_requires_grad(false);
  eval();
}

torch::Tensor PerceptualExtractorImpl::forward(const torch::Tensor& images) {
  auto conv = [&](const char* name) { return named_children()[name]->as<nn::Conv2d>(); };
  auto x = lrelu(conv("conv1")->forward(images));
  x = lrelu(conv("conv2")->forward(x));
  return conv("conv3")->forward(x);
}

// ---------------------------------------------------------------------------
// Objectives

EncoderLossTerms encoder_loss(const torch::Tensor& x, const torch::Tensor& rec, const Critic& critic,
                              const FeatureFn& features, const LossWeights& weights, AdversarialForm form) {
  GHFEAT_EXPECT(x.sizes() == rec.sizes(), "encoder_loss needs equally shaped real and reconstructed batches");
  weights.validate();
  EncoderLossTerms t;
  t.reconstruction = (x - rec).pow(2).mean();
  if (weights.lambda1 != 0.0) {
    const auto d = critic(rec);
    t.adversarial = form == AdversarialForm::kCritic ? -weights.lambda1 * d.mean()
                                                     : weights.lambda1 * F::softplus(-d).mean();
  } else {
    t.adversarial = torch::zeros({}, rec.options());
  }
  if (weights.lambda2 != 0.0) {
    if (!features) throw ConfigurationError("lambda2 != 0 needs a perceptual feature function");
    torch::Tensor fx;
    {
      torch::NoGradGuard no_grad;
      fx = features(x);
    }
    t.perceptual = weights.lambda2 * (fx - features(rec)).pow(2).mean();
  } else {
    t.perceptual = torch::zeros({}, rec.options());
  }
  t.total = t.reconstruction + t.adversarial + t.perceptual;
  return t;
}

DiscriminatorLossTerms discriminator_loss(const torch::Tensor& x, const torch::Tensor& rec, const Critic& critic,
                                          const LossWeights& weights, AdversarialForm form) {
  GHFEAT_EXPECT(x.size(0) > 0 && rec.size(0) > 0, "discriminator_loss needs non-empty batches");
  weights.validate();
  DiscriminatorLossTerms t;
  const auto d_fake = critic(rec.detach());
  torch::Tensor d_real, penalty;
  if (weights.lambda3 != 0.0) {
    std::tie(d_real, penalty) = critic_with_penalty(critic, x);
    t.penalty = weights.lambda3 * penalty;
  } else {
    d_real = critic(x.detach());
    t.penalty = torch::zeros({}, x.options());
  }
  if (form == AdversarialForm::kCritic) {
    t.fake = d_fake.mean();
    t.real = -d_real.mean();
  } else {
    t.fake = F::softplus(d_fake).mean();
    t.real = F::softplus(-d_real).mean();
  }
  t.total = t.fake + t.real + t.penalty;
  return t;
}

torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& x) {
  return critic_with_penalty(critic, x).second;
}

double lr_schedule(double base_lr, double decay_factor, int64_t epoch) {
  GHFEAT_EXPECT(epoch >= 0, "epoch must be non-negative");
  return base_lr * std::pow(decay_factor, static_cast<double>(epoch));
}

// ---------------------------------------------------------------------------
// Batching and records

BatchSampler::BatchSampler(const Dataset& data, int64_t batch_size, uint64_t seed)
    : data_(&data), batch_size_(batch_size), seed_(seed) {
  GHFEAT_EXPECT(batch_size > 0, "batch size must be positive");
  GHFEAT_EXPECT(data.size() >= batch_size, "dataset is smaller than one batch");
}

std::vector<int64_t> BatchSampler::next() {
  if (order_.empty() || cursor_ + static_cast<size_t>(batch_size_) > order_.size()) {
    order_ = data_->order(seed_, pass_++);
    cursor_ = 0;
  }
  std::vector<int64_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                           order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_size_));
  cursor_ += static_cast<size_t>(batch_size_);
  return out;
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j{{"epoch", epoch},
                   {"step", step},
                   {"lr", lr},
                   {"reconstruction", reconstruction},
                   {"adversarial", adversarial},
                   {"perceptual", perceptual},
                   {"encoder_total", encoder_total},
                   {"discriminator_total", discriminator_total},
                   {"penalty", penalty},
                   {"seconds", seconds}};
  if (eval_mse) j["eval_mse"] = *eval_mse;
  if (eval_ssim) j["eval_ssim"] = *eval_ssim;
  return j;
}

// ---------------------------------------------------------------------------
// Encoder training

EncoderTrainer::EncoderTrainer(TrainConfig config, const ParameterArchive& generator_archive)
    : config_(std::move(config)) {
  config_.validate();
  if (!generator_archive.metadata().contains("generator_spec")) {
    throw ConfigurationError("generator archive carries no generator spec");
  }
  const auto gspec = GeneratorSpec::from_json(generator_archive.metadata().at("generator_spec"));
  gspec.validate();
  config_.encoder.validate(gspec);
  if (config_.encoder.input_resolution != gspec.output_resolution ||
      config_.encoder.input_channels != gspec.image_channels) {
    throw ConfigurationError("encoder input does not match the generator output resolution/channels");
  }

  if (config_.generator_mode == GeneratorMode::kFrozen) {
    generator_ = load_generator(generator_archive);
    freeze(*generator_);
  } else {
    torch::manual_seed(config_.seed + 7919);
    generator_ = Generator(gspec);
    generator_->train();
  }
  generator_digest_ = module_digest(*generator_);

  torch::manual_seed(config_.seed);
  encoder_ = Encoder(config_.encoder, gspec);
  discriminator_ = Discriminator(gspec.image_channels, gspec.output_resolution, config_.discriminator_channels);

  switch (config_.perceptual_mode) {
    case PerceptualMode::kPretrainedExtractor: {
      extractor_ = PerceptualExtractor(gspec.image_channels, 0);
      load_archive(config_.perceptual_archive).load_module(*extractor_, kPerceptualPrefix);
      break;
    }
    case PerceptualMode::kFixedRandomExtractor:
      extractor_ = PerceptualExtractor(gspec.image_channels, config_.seed ^ 0x5eedULL);
      break;
    case PerceptualMode::kDisabled:
      break;
  }
  if (extractor_) {
    freeze(*extractor_);
    extractor_digest_ = module_digest(*extractor_);
  }
  torch::manual_seed(config_.seed + 1);

  const auto adam = torch::optim::AdamOptions(config_.base_lr)
                        .betas(std::make_tuple(config_.optimizer.beta1, config_.optimizer.beta2));
  auto encoder_params = encoder_->parameters();
  if (config_.generator_mode == GeneratorMode::kJointFromScratch) {
    for (auto& p : generator_->parameters()) encoder_params.push_back(p);
  }
  encoder_opt_ = std::make_unique<torch::optim::Adam>(encoder_params, adam);
  discriminator_opt_ = std::make_unique<torch::optim::Adam>(discriminator_->parameters(), adam);
  set_epoch(0);
}

void EncoderTrainer::set_epoch(int64_t epoch) {
  epoch_ = epoch;
  lr_ = lr_schedule(config_.base_lr, config_.lr_decay_factor, epoch);
  set_lr(*encoder_opt_, lr_);
  set_lr(*discriminator_opt_, lr_);
}

StepRecord EncoderTrainer::step(const torch::Tensor& real) {
  torch::AutoGradMode grad_on(true);
  encoder_->train();
  const Critic critic = [this](const torch::Tensor& t) { return discriminator_->forward(t); };
  FeatureFn features;
  if (extractor_) features = [this](const torch::Tensor& t) { return extractor_->forward(t); };

  auto diverged = [&](const std::string& what, const nlohmann::json& terms) {
    auto snap = snapshot();
    snap.metadata()["divergence"] = {{"loss", what}, {"terms", terms}, {"step", step_}};
    const auto path = snapshot_path(out_dir_, step_);
    store_archive(snap, path);
    throw TrainingDiverged(what + " loss became non-finite at step " + std::to_string(step_), path.string());
  };

  // encoder step, critic held fixed
  set_requires_grad(*discriminator_, false);
  const auto rec = generator_->synthesize(encoder_->encode_styles(real, *generator_));
  auto e = encoder_loss(real, rec, critic, features, config_.loss_weights, config_.adversarial_form);
  StepRecord r;
  r.reconstruction = e.reconstruction.item<double>();
  r.adversarial = e.adversarial.item<double>();
  r.perceptual = e.perceptual.item<double>();
  r.encoder_total = e.total.item<double>();
  if (!std::isfinite(r.encoder_total)) {
    diverged("encoder", {{"reconstruction", r.reconstruction}, {"adversarial", r.adversarial},
                         {"perceptual", r.perceptual}});
  }
  encoder_opt_->zero_grad();
  e.total.backward();
  encoder_opt_->step();

  // discriminator step on the same batch
  set_requires_grad(*discriminator_, true);
  auto d = discriminator_loss(real, rec.detach(), critic, config_.loss_weights, config_.adversarial_form);
  r.discriminator_total = d.total.item<double>();
  r.penalty = d.penalty.item<double>();
  if (!std::isfinite(r.discriminator_total)) {
    diverged("discriminator", {{"fake", d.fake.item<double>()}, {"real", d.real.item<double>()},
                               {"penalty", r.penalty}});
  }
  discriminator_opt_->zero_grad();
  d.total.backward();
  discriminator_opt_->step();
  ++step_;
  return r;
}

torch::Tensor EncoderTrainer::reconstruct(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  const bool was_training = encoder_->is_training();
  encoder_->eval();
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < images.size(0); i += 128) {
    const auto batch = images.slice(0, i, std::min(images.size(0), i + 128));
    parts.push_back(generator_->synthesize(encoder_->encode_styles(batch, *generator_)));
  }
  if (was_training) encoder_->train();
  return torch::cat(parts, 0);
}

ParameterArchive EncoderTrainer::snapshot() const {
  ParameterArchive a;
  add_generator(a, generator_);
  add_encoder(a, encoder_);
  a.add_module(*discriminator_, kDiscriminatorPrefix);
  auto& m = a.metadata();
  m["kind"] = "encoder";
  m["train_config"] = config_.to_key_values();
  m["seed"] = config_.seed;
  m["step"] = step_;
  m["epoch"] = epoch_;
  m["representation"] = to_string(config_.encoder.representation);
  m["generator_mode"] = to_string(config_.generator_mode);
  m["initial_generator_digest"] = generator_digest_;
  if (!extractor_digest_.empty()) m["perceptual_digest"] = extractor_digest_;
  return a;
}

TrainResult train_encoder(const TrainConfig& config, const Dataset& train, const Dataset& eval,
                          const ParameterArchive& generator_archive, const RunOptions& options) {
  EncoderTrainer trainer(config, generator_archive);
  const auto& gspec = trainer.generator()->spec();
  check_images(train, gspec, "training");
  if (eval.size() > 0) check_images(eval, gspec, "evaluation");
  if (!options.out_dir.empty()) fs::create_directories(options.out_dir);
  trainer.set_output_dir(options.out_dir);

  TrainResult result;
  result.generator_digest_before = module_digest(*trainer.generator());
  const int64_t steps_per_epoch =
      config.steps_per_epoch > 0 ? config.steps_per_epoch : std::max<int64_t>(1, train.size() / config.batch_size);
  BatchSampler sampler(train, config.batch_size, config.seed);
  const auto eval_set = eval.size() > 0 ? eval.head(config.eval_samples) : Dataset{};

  bool done = false;
  for (int64_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    trainer.set_epoch(epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = trainer.current_lr();
    int64_t n = 0;
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      const auto idx = sampler.next();
      const auto r = trainer.step(train.gather(idx));
      rec.reconstruction += r.reconstruction;
      rec.adversarial += r.adversarial;
      rec.perceptual += r.perceptual;
      rec.encoder_total += r.encoder_total;
      rec.discriminator_total += r.discriminator_total;
      rec.penalty += r.penalty;
      ++n;
      if (options.max_steps > 0 && trainer.global_step() >= options.max_steps) {
        done = true;
        break;
      }
    }
    for (double* v : {&rec.reconstruction, &rec.adversarial, &rec.perceptual, &rec.encoder_total,
                      &rec.discriminator_total, &rec.penalty}) {
      *v /= static_cast<double>(std::max<int64_t>(n, 1));
    }
    rec.step = trainer.global_step();
    if (eval_set.size() > 0) {
      const auto out = trainer.reconstruct(eval_set.images);
      rec.eval_mse = mean_squared_error(eval_set.images, out);
      rec.eval_ssim = ssim(eval_set.images, out);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (options.verbose) std::cerr << "train-encoder " << rec.to_json().dump() << '\n';
    if (options.on_epoch) options.on_epoch(rec);
    if (!options.out_dir.empty()) {
      append_line(options.out_dir / "metrics.jsonl", rec.to_json());
      if ((epoch + 1) % config.checkpoint_every == 0) {
        store_archive(trainer.snapshot(), options.out_dir / epoch_name("checkpoint", epoch, ".ghf"));
      }
    }
  }

  result.archive = trainer.snapshot();
  result.generator_digest_after = module_digest(*trainer.generator());
  if (!options.out_dir.empty()) store_archive(result.archive, options.out_dir / "encoder.ghf");
  return result;
}

// ---------------------------------------------------------------------------
// Generator pretraining

GanTrainer::GanTrainer(PretrainConfig config) : config_(std::move(config)) {
  config_.validate();
  torch::manual_seed(config_.seed);
  generator_ = Generator(config_.generator);
  discriminator_ = Discriminator(config_.generator.image_channels, config_.generator.output_resolution,
                                 config_.discriminator_channels);
  const auto adam = torch::optim::AdamOptions(config_.base_lr)
                        .betas(std::make_tuple(config_.optimizer.beta1, config_.optimizer.beta2));
  // group 0: synthesis and style heads, group 1: mapping MLP at a reduced rate
  std::vector<torch::Tensor> synthesis, mapping;
  for (const auto& p : generator_->named_parameters()) {
    (p.key().starts_with("mapping") ? mapping : synthesis).push_back(p.value());
  }
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(synthesis, std::make_unique<torch::optim::AdamOptions>(adam));
  groups.emplace_back(mapping, std::make_unique<torch::optim::AdamOptions>(adam));
  g_opt_ = std::make_unique<torch::optim::Adam>(std::move(groups), adam);
  d_opt_ = std::make_unique<torch::optim::Adam>(discriminator_->parameters(), adam);
  set_epoch(0);
}

void GanTrainer::set_epoch(int64_t epoch) {
  epoch_ = epoch;
  lr_ = lr_schedule(config_.base_lr, config_.lr_decay_factor, epoch);
  set_lr(*g_opt_, lr_);
  static_cast<torch::optim::AdamOptions&>(g_opt_->param_groups()[1].options()).lr(lr_ * config_.mapping_lr_multiplier);
  set_lr(*d_opt_, lr_);
}

std::array<double, 3> GanTrainer::step(const torch::Tensor& real) {
  torch::AutoGradMode grad_on(true);
  const int64_t n = real.size(0);
  const Critic critic = [this](const torch::Tensor& t) { return discriminator_->forward(t); };

  torch::Tensor fake;
  {
    torch::NoGradGuard no_grad;
    fake = generator_->generate({LatentKind::Z, torch::randn({n, config_.generator.latent_dim})});
  }
  auto d = discriminator_loss(real, fake, critic, LossWeights{0.0, 0.0, config_.r1_weight},
                              AdversarialForm::kLogistic);
  const double d_total = d.total.item<double>();
  d_opt_->zero_grad();
  d.total.backward();
  d_opt_->step();

  set_requires_grad(*discriminator_, false);
  const auto g_fake = generator_->generate({LatentKind::Z, torch::randn({n, config_.generator.latent_dim})});
  const auto g_loss = F::softplus(-discriminator_->forward(g_fake)).mean();
  const double g_total = g_loss.item<double>();
  g_opt_->zero_grad();
  g_loss.backward();
  g_opt_->step();
  set_requires_grad(*discriminator_, true);

  if (!std::isfinite(d_total) || !std::isfinite(g_total)) {
    auto snap = snapshot();
    snap.metadata()["divergence"] = {{"generator_loss", g_total}, {"discriminator_loss", d_total}, {"step", step_}};
    const auto path = snapshot_path(out_dir_, step_);
    store_archive(snap, path);
    throw TrainingDiverged("GAN loss became non-finite at step " + std::to_string(step_), path.string());
  }
  ++step_;
  return {g_total, d_total, d.penalty.item<double>()};
}

torch::Tensor GanTrainer::samples(int64_t count, uint64_t seed) {
  torch::NoGradGuard no_grad;
  return generator_->generate(LatentCode::sample(count, config_.generator.latent_dim, seed));
}

ParameterArchive GanTrainer::snapshot() const {
  ParameterArchive a;
  add_generator(a, generator_);
  a.add_module(*discriminator_, kDiscriminatorPrefix);
  auto& m = a.metadata();
  m["kind"] = "generator";
  m["pretrain_config"] = config_.to_key_values();
  m["seed"] = config_.seed;
  m["step"] = step_;
  m["epoch"] = epoch_;
  return a;
}

PretrainResult pretrain_generator(const PretrainConfig& config, const Dataset& train, const RunOptions& options) {
  GanTrainer trainer(config);
  check_images(train, config.generator, "training");
  if (!options.out_dir.empty()) fs::create_directories(options.out_dir);
  trainer.set_output_dir(options.out_dir);

  PretrainResult result;
  const int64_t steps_per_epoch =
      config.steps_per_epoch > 0 ? config.steps_per_epoch : std::max<int64_t>(1, train.size() / config.batch_size);
  BatchSampler sampler(train, config.batch_size, config.seed);
  bool done = false;
  for (int64_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    trainer.set_epoch(epoch);
    std::array<double, 3> sums{};
    int64_t n = 0;
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      const auto r = trainer.step(train.gather(sampler.next()));
      for (size_t k = 0; k < 3; ++k) sums[k] += r[k];
      ++n;
      if (options.max_steps > 0 && trainer.global_step() >= options.max_steps) {
        done = true;
        break;
      }
    }
    const double denom = static_cast<double>(std::max<int64_t>(n, 1));
    nlohmann::json record{{"epoch", epoch},
                          {"step", trainer.global_step()},
                          {"lr", lr_schedule(config.base_lr, config.lr_decay_factor, epoch)},
                          {"generator_loss", sums[0] / denom},
                          {"discriminator_loss", sums[1] / denom},
                          {"penalty", sums[2] / denom},
                          {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
    result.history.push_back(record);
    if (options.verbose) std::cerr << "pretrain-gan " << record.dump() << '\n';
    if (!options.out_dir.empty()) {
      append_line(options.out_dir / "metrics.jsonl", record);
      const auto grid = trainer.samples(64, config.seed + 100);
      std::vector<torch::Tensor> tiles;
      for (int64_t i = 0; i < grid.size(0); ++i) tiles.push_back(grid[i]);
      write_png(make_grid(tiles, 8), options.out_dir / epoch_name("samples", epoch, ".png"));
      if ((epoch + 1) % config.checkpoint_every == 0) {
        store_archive(trainer.snapshot(), options.out_dir / epoch_name("checkpoint", epoch, ".ghf"));
      }
    }
  }
  result.archive = trainer.snapshot();
  if (!options.out_dir.empty()) store_archive(result.archive, options.out_dir / "generator.ghf");
  return result;
}

}  // namespace ghfeat
