#include "ghfeat/config.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "ghfeat/errors.hpp"

namespace ghfeat {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigurationError("config key '" + key + "' expects a number, got '" + v + "'");
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw ConfigurationError("config key '" + key + "' expects an integer, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigurationError("config key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<int64_t> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  for (const auto& item : split(v, ',')) out.push_back(to_int(key, item));
  return out;
}

std::string join(const std::vector<int64_t>& xs) {
  std::string out;
  for (size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Applies each entry of kv through a table of setters; unknown keys are errors.
using Setters = std::map<std::string, std::function<void(const std::string&)>>;

void apply_values(const KeyValues& kv, const Setters& setters) {
  for (const auto& [key, value] : kv) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigurationError("unknown config key: " + key);
    it->second(value);
  }
}

void encoder_setters(Setters& s, EncoderSpec& e) {
  s["encoder.input_resolution"] = [&](const std::string& v) { e.input_resolution = to_int("encoder.input_resolution", v); };
  s["encoder.input_channels"] = [&](const std::string& v) { e.input_channels = to_int("encoder.input_channels", v); };
  s["encoder.stem_channels"] = [&](const std::string& v) { e.stem_channels = to_int("encoder.stem_channels", v); };
  s["encoder.stem_kernel"] = [&](const std::string& v) { e.stem_kernel = to_int("encoder.stem_kernel", v); };
  s["encoder.stem_stride"] = [&](const std::string& v) { e.stem_stride = to_int("encoder.stem_stride", v); };
  s["encoder.stem_pool"] = [&](const std::string& v) { e.stem_pool = to_bool("encoder.stem_pool", v); };
  s["encoder.bottleneck"] = [&](const std::string& v) { e.bottleneck = to_bool("encoder.bottleneck", v); };
  s["encoder.sam_channels"] = [&](const std::string& v) { e.sam_channels = to_int("encoder.sam_channels", v); };
  s["encoder.representation"] = [&](const std::string& v) { e.representation = representation_from_string(v); };
  // "channels:blocks:stride, ..."
  s["encoder.stages"] = [&](const std::string& v) {
    e.stages.clear();
    for (const auto& item : split(v, ',')) {
      const auto parts = split(item, ':');
      if (parts.size() != 3) throw ConfigurationError("encoder.stages entries are channels:blocks:stride");
      e.stages.push_back({to_int("encoder.stages", parts[0]), to_int("encoder.stages", parts[1]),
                          to_int("encoder.stages", parts[2])});
    }
  };
  // "1-4, 5-6, 7-8"
  s["encoder.heads"] = [&](const std::string& v) {
    const auto items = split(v, ',');
    if (items.size() != 3) throw ConfigurationError("encoder.heads needs three level ranges");
    for (size_t i = 0; i < 3; ++i) {
      const auto parts = split(items[i], '-');
      if (parts.size() != 2) throw ConfigurationError("encoder.heads entries are first-last");
      e.heads[i] = {to_int("encoder.heads", parts[0]), to_int("encoder.heads", parts[1])};
    }
  };
}

void encoder_values(KeyValues& kv, const EncoderSpec& e) {
  kv["encoder.input_resolution"] = std::to_string(e.input_resolution);
  kv["encoder.input_channels"] = std::to_string(e.input_channels);
  kv["encoder.stem_channels"] = std::to_string(e.stem_channels);
  kv["encoder.stem_kernel"] = std::to_string(e.stem_kernel);
  kv["encoder.stem_stride"] = std::to_string(e.stem_stride);
  kv["encoder.stem_pool"] = e.stem_pool ? "true" : "false";
  kv["encoder.bottleneck"] = e.bottleneck ? "true" : "false";
  kv["encoder.sam_channels"] = std::to_string(e.sam_channels);
  kv["encoder.representation"] = to_string(e.representation);
  std::string stages;
  for (const auto& s : e.stages) {
    stages += (stages.empty() ? "" : ", ") + std::to_string(s.channels) + ":" + std::to_string(s.blocks) + ":" +
              std::to_string(s.stride);
  }
  kv["encoder.stages"] = stages;
  std::string heads;
  for (const auto& h : e.heads) {
    heads += (heads.empty() ? "" : ", ") + std::to_string(h.first_level) + "-" + std::to_string(h.last_level);
  }
  kv["encoder.heads"] = heads;
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigurationError(std::string("config is not a key/value document: ") + e.what());
  }
  KeyValues kv;
  if (root.IsNull()) return kv;
  if (!root.IsMap()) throw ConfigurationError("config must be a flat key/value document");
  for (const auto& entry : root) {
    if (!entry.second.IsScalar()) {
      throw ConfigurationError("config value for '" + entry.first.as<std::string>() + "' must be a scalar");
    }
    kv[entry.first.as<std::string>()] = entry.second.as<std::string>();
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot read config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    const bool quote = v.find_first_of(":,#") != std::string::npos || v.empty();
    out += k + ": " + (quote ? "\"" + v + "\"" : v) + "\n";
  }
  return out;
}

std::string to_string(GeneratorMode m) { return m == GeneratorMode::kFrozen ? "FROZEN" : "JOINT_FROM_SCRATCH"; }

std::string to_string(PerceptualMode m) {
  switch (m) {
    case PerceptualMode::kPretrainedExtractor: return "PRETRAINED_EXTRACTOR";
    case PerceptualMode::kFixedRandomExtractor: return "FIXED_RANDOM_EXTRACTOR";
    case PerceptualMode::kDisabled: return "DISABLED";
  }
  return "?";
}

std::string to_string(AdversarialForm f) { return f == AdversarialForm::kCritic ? "CRITIC" : "LOGISTIC"; }

void LossWeights::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigurationError("loss weights must be non-negative");
}

void TrainConfig::validate() const {
  loss_weights.validate();
  if (perceptual_mode == PerceptualMode::kDisabled && loss_weights.lambda2 != 0.0) {
    throw ConfigurationError("perceptual_mode DISABLED requires loss_weights.lambda2 = 0");
  }
  if (perceptual_mode == PerceptualMode::kPretrainedExtractor && perceptual_archive.empty()) {
    throw ConfigurationError("PRETRAINED_EXTRACTOR needs perceptual_archive");
  }
  if (base_lr <= 0 || lr_decay_factor <= 0) throw ConfigurationError("learning rate settings must be positive");
  if (batch_size <= 0 || epochs <= 0 || steps_per_epoch < 0 || checkpoint_every <= 0) {
    throw ConfigurationError("batch_size, epochs and checkpoint_every must be positive");
  }
  if (discriminator_channels.empty()) throw ConfigurationError("discriminator_channels must be non-empty");
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  kv["loss_weights.lambda1"] = fmt(loss_weights.lambda1);
  kv["loss_weights.lambda2"] = fmt(loss_weights.lambda2);
  kv["loss_weights.lambda3"] = fmt(loss_weights.lambda3);
  kv["optimizer.beta1"] = fmt(optimizer.beta1);
  kv["optimizer.beta2"] = fmt(optimizer.beta2);
  kv["base_lr"] = fmt(base_lr);
  kv["lr_decay_factor"] = fmt(lr_decay_factor);
  kv["batch_size"] = std::to_string(batch_size);
  kv["epochs"] = std::to_string(epochs);
  kv["steps_per_epoch"] = std::to_string(steps_per_epoch);
  kv["generator_mode"] = to_string(generator_mode);
  kv["perceptual_mode"] = to_string(perceptual_mode);
  if (!perceptual_archive.empty()) kv["perceptual_archive"] = perceptual_archive;
  kv["adversarial_form"] = to_string(adversarial_form);
  kv["discriminator_channels"] = join(discriminator_channels);
  kv["seed"] = std::to_string(seed);
  kv["eval_samples"] = std::to_string(eval_samples);
  kv["checkpoint_every"] = std::to_string(checkpoint_every);
  encoder_values(kv, encoder);
  return kv;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  TrainConfig c;
  Setters s;
  s["loss_weights.lambda1"] = [&](const std::string& v) { c.loss_weights.lambda1 = to_double("loss_weights.lambda1", v); };
  s["loss_weights.lambda2"] = [&](const std::string& v) { c.loss_weights.lambda2 = to_double("loss_weights.lambda2", v); };
  s["loss_weights.lambda3"] = [&](const std::string& v) { c.loss_weights.lambda3 = to_double("loss_weights.lambda3", v); };
  s["optimizer.beta1"] = [&](const std::string& v) { c.optimizer.beta1 = to_double("optimizer.beta1", v); };
  s["optimizer.beta2"] = [&](const std::string& v) { c.optimizer.beta2 = to_double("optimizer.beta2", v); };
  s["base_lr"] = [&](const std::string& v) { c.base_lr = to_double("base_lr", v); };
  s["lr_decay_factor"] = [&](const std::string& v) { c.lr_decay_factor = to_double("lr_decay_factor", v); };
  s["batch_size"] = [&](const std::string& v) { c.batch_size = to_int("batch_size", v); };
  s["epochs"] = [&](const std::string& v) { c.epochs = to_int("epochs", v); };
  s["steps_per_epoch"] = [&](const std::string& v) { c.steps_per_epoch = to_int("steps_per_epoch", v); };
  s["generator_mode"] = [&](const std::string& v) {
    if (v == "FROZEN") c.generator_mode = GeneratorMode::kFrozen;
    else if (v == "JOINT_FROM_SCRATCH") c.generator_mode = GeneratorMode::kJointFromScratch;
    else throw ConfigurationError("unknown generator_mode: " + v);
  };
  s["perceptual_mode"] = [&](const std::string& v) {
    if (v == "PRETRAINED_EXTRACTOR") c.perceptual_mode = PerceptualMode::kPretrainedExtractor;
    else if (v == "FIXED_RANDOM_EXTRACTOR") c.perceptual_mode = PerceptualMode::kFixedRandomExtractor;
    else if (v == "DISABLED") c.perceptual_mode = PerceptualMode::kDisabled;
    else throw ConfigurationError("unknown perceptual_mode: " + v);
  };
  s["perceptual_archive"] = [&](const std::string& v) { c.perceptual_archive = v; };
  s["adversarial_form"] = [&](const std::string& v) {
    if (v == "CRITIC") c.adversarial_form = AdversarialForm::kCritic;
    else if (v == "LOGISTIC") c.adversarial_form = AdversarialForm::kLogistic;
    else throw ConfigurationError("unknown adversarial_form: " + v);
  };
  s["discriminator_channels"] = [&](const std::string& v) { c.discriminator_channels = to_int_list("discriminator_channels", v); };
  s["seed"] = [&](const std::string& v) { c.seed = static_cast<uint64_t>(to_int("seed", v)); };
  s["eval_samples"] = [&](const std::string& v) { c.eval_samples = to_int("eval_samples", v); };
  s["checkpoint_every"] = [&](const std::string& v) { c.checkpoint_every = to_int("checkpoint_every", v); };
  encoder_setters(s, c.encoder);
  apply_values(kv, s);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) { return from_key_values(read_key_values(path)); }

void PretrainConfig::validate() const {
  generator.validate();
  if (base_lr <= 0 || lr_decay_factor <= 0 || r1_weight < 0 || mapping_lr_multiplier <= 0) throw ConfigurationError("invalid optimizer settings");
  if (batch_size <= 0 || epochs <= 0 || steps_per_epoch < 0 || checkpoint_every <= 0) {
    throw ConfigurationError("batch_size, epochs and checkpoint_every must be positive");
  }
  if (discriminator_channels.empty()) throw ConfigurationError("discriminator_channels must be non-empty");
}

KeyValues PretrainConfig::to_key_values() const {
  KeyValues kv;
  kv["generator.output_resolution"] = std::to_string(generator.output_resolution);
  kv["generator.base_resolution"] = std::to_string(generator.base_resolution);
  kv["generator.per_layer_channels"] = join(generator.per_layer_channels);
  kv["generator.latent_dim"] = std::to_string(generator.latent_dim);
  kv["generator.mapping_depth"] = std::to_string(generator.mapping_depth);
  kv["generator.image_channels"] = std::to_string(generator.image_channels);
  kv["discriminator_channels"] = join(discriminator_channels);
  kv["optimizer.beta1"] = fmt(optimizer.beta1);
  kv["optimizer.beta2"] = fmt(optimizer.beta2);
  kv["base_lr"] = fmt(base_lr);
  kv["lr_decay_factor"] = fmt(lr_decay_factor);
  kv["r1_weight"] = fmt(r1_weight);
  kv["mapping_lr_multiplier"] = fmt(mapping_lr_multiplier);
  kv["batch_size"] = std::to_string(batch_size);
  kv["epochs"] = std::to_string(epochs);
  kv["steps_per_epoch"] = std::to_string(steps_per_epoch);
  kv["seed"] = std::to_string(seed);
  kv["checkpoint_every"] = std::to_string(checkpoint_every);
  return kv;
}

PretrainConfig PretrainConfig::from_key_values(const KeyValues& kv) {
  PretrainConfig c;
  Setters s;
  s["generator.output_resolution"] = [&](const std::string& v) { c.generator.output_resolution = to_int("generator.output_resolution", v); };
  s["generator.base_resolution"] = [&](const std::string& v) { c.generator.base_resolution = to_int("generator.base_resolution", v); };
  s["generator.per_layer_channels"] = [&](const std::string& v) { c.generator.per_layer_channels = to_int_list("generator.per_layer_channels", v); };
  s["generator.latent_dim"] = [&](const std::string& v) { c.generator.latent_dim = to_int("generator.latent_dim", v); };
  s["generator.mapping_depth"] = [&](const std::string& v) { c.generator.mapping_depth = to_int("generator.mapping_depth", v); };
  s["generator.image_channels"] = [&](const std::string& v) { c.generator.image_channels = to_int("generator.image_channels", v); };
  s["discriminator_channels"] = [&](const std::string& v) { c.discriminator_channels = to_int_list("discriminator_channels", v); };
  s["optimizer.beta1"] = [&](const std::string& v) { c.optimizer.beta1 = to_double("optimizer.beta1", v); };
  s["optimizer.beta2"] = [&](const std::string& v) { c.optimizer.beta2 = to_double("optimizer.beta2", v); };
  s["base_lr"] = [&](const std::string& v) { c.base_lr = to_double("base_lr", v); };
  s["lr_decay_factor"] = [&](const std::string& v) { c.lr_decay_factor = to_double("lr_decay_factor", v); };
  s["r1_weight"] = [&](const std::string& v) { c.r1_weight = to_double("r1_weight", v); };
  s["mapping_lr_multiplier"] = [&](const std::string& v) {
    c.mapping_lr_multiplier = to_double("mapping_lr_multiplier", v);
  };
  s["batch_size"] = [&](const std::string& v) { c.batch_size = to_int("batch_size", v); };
  s["epochs"] = [&](const std::string& v) { c.epochs = to_int("epochs", v); };
  s["steps_per_epoch"] = [&](const std::string& v) { c.steps_per_epoch = to_int("steps_per_epoch", v); };
  s["seed"] = [&](const std::string& v) { c.seed = static_cast<uint64_t>(to_int("seed", v)); };
  s["checkpoint_every"] = [&](const std::string& v) { c.checkpoint_every = to_int("checkpoint_every", v); };
  apply_values(kv, s);
  c.validate();
  return c;
}

PretrainConfig PretrainConfig::load(const std::filesystem::path& path) { return from_key_values(read_key_values(path)); }

}  // namespace ghfeat
