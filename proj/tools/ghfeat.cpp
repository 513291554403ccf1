// ghfeat: command line front end for training, editing, probing and serving.

#include <CLI11.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "ghfeat/archive.hpp"
#include "ghfeat/config.hpp"
#include "ghfeat/dataset.hpp"
#include "ghfeat/editing.hpp"
#include "ghfeat/errors.hpp"
#include "ghfeat/evaluation.hpp"
#include "ghfeat/image_io.hpp"
#include "ghfeat/models.hpp"
#include "ghfeat/service.hpp"
#include "ghfeat/training.hpp"

namespace fs = std::filesystem;
using namespace ghfeat;

namespace {

DatasetSpec digit_split(const fs::path& root, const std::string& split, const GeneratorSpec& g) {
  DatasetSpec s;
  s.kind = fs::exists(root / "train-images-idx3-ubyte") ? SourceKind::kIdxDigits : SourceKind::kImageFolder;
  s.root = root;
  s.split = split;
  s.resolution = g.output_resolution;
  s.channels = g.image_channels;
  return s;
}

StyleCodeHierarchy encode_file(ModelBundle& m, const fs::path& path) {
  torch::NoGradGuard no_grad;
  const auto& spec = m.spec();
  auto img = conform_images(read_png(path, spec.image_channels).unsqueeze(0), spec.output_resolution,
                            spec.image_channels);
  return m.encoder->encode_styles(img, *m.generator);
}

torch::Tensor read_mask(const fs::path& path, int64_t resolution) {
  auto m = read_png(path, 1).unsqueeze(0);
  if (m.size(2) != resolution || m.size(3) != resolution) {
    m = torch::nn::functional::interpolate(
        m, torch::nn::functional::InterpolateFuncOptions()
               .size(std::vector<int64_t>{resolution, resolution})
               .mode(torch::kNearest));
  }
  return (m[0][0] > 0.0).to(torch::kFloat32);
}

void write_outputs(const torch::Tensor& result, const std::vector<torch::Tensor>& inputs, const fs::path& out,
                   const fs::path& grid) {
  write_png(result.clamp(-1, 1), out);
  std::cout << "wrote " << out.string() << '\n';
  if (!grid.empty()) {
    auto tiles = inputs;
    tiles.push_back(result.clamp(-1, 1));
    write_png(make_grid(tiles, static_cast<int64_t>(tiles.size())), grid);
    std::cout << "wrote " << grid.string() << '\n';
  }
}

// Renders score-vs-level as a small bar chart (one bar per level).
torch::Tensor score_plot(const std::vector<double>& scores, bool higher_better) {
  const int64_t bar = 12, height = 96, n = static_cast<int64_t>(scores.size());
  auto img = torch::full({1, height, n * bar}, -1.0);
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it, hi = *hi_it, span = hi - lo > 1e-12 ? hi - lo : 1.0;
  for (int64_t i = 0; i < n; ++i) {
    double t = (scores[static_cast<size_t>(i)] - lo) / span;
    if (!higher_better) t = 1.0 - t;
    const auto h = std::max<int64_t>(2, static_cast<int64_t>(t * (height - 4)) + 2);
    img.index_put_({0, torch::indexing::Slice(height - h, height), torch::indexing::Slice(i * bar + 1, (i + 1) * bar - 1)},
                   1.0);
  }
  return img;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(std::max(1, torch::get_num_threads()));
  CLI::App app{"Generative hierarchical features: train, edit, probe and serve"};
  app.require_subcommand(1);

  // import-digits
  auto* import_cmd = app.add_subcommand("import-digits", "Convert per-digit JSON files into IDX train/test files");
  std::string json_dir, import_out;
  int64_t test_every = 5;
  import_cmd->add_option("--json-dir", json_dir, "Directory with 0.json .. 9.json")->required();
  import_cmd->add_option("--out", import_out, "Output directory")->required();
  import_cmd->add_option("--test-every", test_every, "Every k-th image of a class goes to the test split");

  // pretrain-gan
  auto* pretrain_cmd = app.add_subcommand("pretrain-gan", "Train the style generator adversarially");
  std::string pre_config, pre_data, pre_out;
  int64_t pre_max_steps = 0;
  pretrain_cmd->add_option("--config", pre_config, "Key/value config file");
  pretrain_cmd->add_option("--data", pre_data, "Dataset directory")->required();
  pretrain_cmd->add_option("--out", pre_out, "Output directory")->required();
  pretrain_cmd->add_option("--max-steps", pre_max_steps, "Stop after this many steps");

  // train-encoder
  auto* train_cmd = app.add_subcommand("train-encoder", "Train the hierarchical encoder against a generator");
  std::string tr_config, tr_generator, tr_data, tr_out;
  int64_t tr_max_steps = 0, tr_eval_count = 1000;
  train_cmd->add_option("--config", tr_config, "Key/value config file");
  train_cmd->add_option("--generator", tr_generator, "Generator archive")->required();
  train_cmd->add_option("--data", tr_data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr_out, "Output directory")->required();
  train_cmd->add_option("--max-steps", tr_max_steps, "Stop after this many steps");
  train_cmd->add_option("--eval-count", tr_eval_count, "Held-out images used for per-epoch metrics");

  // edit
  auto* edit_cmd = app.add_subcommand("edit", "Manipulate images through their hierarchical features");
  edit_cmd->require_subcommand(1);
  std::string ed_archive, ed_generator, ed_content, ed_style, ed_levels = "1:1", ed_mask, ed_out, ed_grid;
  uint64_t ed_seed = 0;
  int64_t ed_layer = 0;
  bool ed_direct = false;
  auto common = [&](CLI::App* c, bool style, bool levels) {
    c->add_option("--archive", ed_archive, "Encoder archive (carries its generator)")->required();
    c->add_option("--generator", ed_generator, "Override generator archive");
    c->add_option("--content", ed_content, "Input image")->required();
    if (style) c->add_option("--style", ed_style, "Style/donor image")->required();
    if (levels) c->add_option("--levels", ed_levels, "Level range lo:hi");
    c->add_option("--out", ed_out, "Output PNG")->required();
    c->add_option("--grid", ed_grid, "Optional side-by-side PNG");
  };
  auto* mix_cmd = edit_cmd->add_subcommand("mix", "Swap a level range from --style into --content");
  common(mix_cmd, true, true);
  auto* global_cmd = edit_cmd->add_subcommand("global", "Resample a level range from the generator");
  common(global_cmd, false, true);
  global_cmd->add_option("--seed", ed_seed, "Sampling seed")->required();
  global_cmd->add_flag("--direct-style", ed_direct, "Sample style codes directly instead of through z -> w");
  auto* local_cmd = edit_cmd->add_subcommand("local", "Replace masked features at one layer with the donor's");
  common(local_cmd, true, false);
  local_cmd->add_option("--mask", ed_mask, "Mask PNG at image resolution")->required();
  local_cmd->add_option("--layer", ed_layer, "Generator layer (1 = 4x4 end)")->required();
  auto* harm_cmd = edit_cmd->add_subcommand("harmonize", "Re-project a stitched image through the encoder");
  common(harm_cmd, false, false);

  // probe
  auto* probe_cmd = app.add_subcommand("probe", "Linear probes on frozen hierarchical features");
  std::string pr_archive, pr_data, pr_task = "digit", pr_level = "sweep", pr_plot;
  int64_t pr_train = 5000, pr_test = 1000;
  probe_cmd->add_option("--archive", pr_archive, "Encoder archive")->required();
  probe_cmd->add_option("--data", pr_data, "Dataset directory")->required();
  probe_cmd->add_option("--task", pr_task, "digit | luminance")->check(CLI::IsMember({"digit", "luminance"}));
  probe_cmd->add_option("--level", pr_level, "n | all | sweep");
  probe_cmd->add_option("--train-count", pr_train, "Training images for the probe");
  probe_cmd->add_option("--test-count", pr_test, "Held-out images");
  probe_cmd->add_option("--plot", pr_plot, "Write a score-vs-level PNG (sweep only)");

  // metrics
  auto* metrics_cmd = app.add_subcommand("metrics", "MSE / SSIM / FID between two aligned PNG folders");
  std::string me_real, me_rec;
  int64_t me_channels = 1;
  metrics_cmd->add_option("--real", me_real, "Folder of real images")->required();
  metrics_cmd->add_option("--rec", me_rec, "Folder of reconstructions (same file names)")->required();
  metrics_cmd->add_option("--channels", me_channels, "1 or 3");

  // inspect-archive
  auto* inspect_cmd = app.add_subcommand("inspect-archive", "Print tensor names, shapes and metadata");
  std::string in_path;
  inspect_cmd->add_option("path", in_path, "Archive file")->required();

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "HTTP service for the workbench");
  std::string sv_archive, sv_generator, sv_host = "127.0.0.1";
  int sv_port = 8080;
  int64_t sv_ttl = 3600;
  serve_cmd->add_option("--archive", sv_archive, "Encoder archive")->required();
  serve_cmd->add_option("--generator", sv_generator, "Override generator archive");
  serve_cmd->add_option("--host", sv_host, "Bind address");
  serve_cmd->add_option("--port", sv_port, "Port");
  serve_cmd->add_option("--session-ttl", sv_ttl, "Session lifetime in seconds");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*import_cmd) {
      const auto s = import_digit_json(json_dir, import_out, test_every);
      std::cout << "train " << s.train << " test " << s.test << '\n';
      return 0;
    }

    if (*pretrain_cmd) {
      const auto config = pre_config.empty() ? PretrainConfig{} : PretrainConfig::load(pre_config);
      const auto train = load_dataset(digit_split(pre_data, "train", config.generator));
      RunOptions opts;
      opts.out_dir = pre_out;
      opts.max_steps = pre_max_steps;
      opts.verbose = true;
      pretrain_generator(config, train, opts);
      std::cout << "wrote " << (fs::path(pre_out) / "generator.ghf").string() << '\n';
      return 0;
    }

    if (*train_cmd) {
      const auto config = tr_config.empty() ? TrainConfig{} : TrainConfig::load(tr_config);
      const auto garchive = load_archive(tr_generator);
      const auto gspec = GeneratorSpec::from_json(garchive.metadata().at("generator_spec"));
      const auto train = load_dataset(digit_split(tr_data, "train", gspec));
      auto eval_spec = digit_split(tr_data, "test", gspec);
      eval_spec.end = tr_eval_count;
      const auto eval = load_dataset(eval_spec);
      RunOptions opts;
      opts.out_dir = tr_out;
      opts.max_steps = tr_max_steps;
      opts.verbose = true;
      train_encoder(config, train, eval, garchive, opts);
      std::cout << "wrote " << (fs::path(tr_out) / "encoder.ghf").string() << '\n';
      return 0;
    }

    if (*edit_cmd) {
      auto m = load_bundle(ed_archive, ed_generator);
      torch::NoGradGuard no_grad;
      const auto content = encode_file(m, ed_content);
      const auto content_img = conform_images(read_png(ed_content, m.spec().image_channels).unsqueeze(0),
                                              m.spec().output_resolution, m.spec().image_channels)[0];
      if (*mix_cmd) {
        const auto style = encode_file(m, ed_style);
        const auto style_img = conform_images(read_png(ed_style, m.spec().image_channels).unsqueeze(0),
                                              m.spec().output_resolution, m.spec().image_channels)[0];
        const auto out = style_mix(*m.generator, content, style, LevelRange::parse(ed_levels));
        write_outputs(out[0], {content_img, style_img}, ed_out, ed_grid);
      } else if (*global_cmd) {
        const auto out = global_edit(*m.generator, content, LevelRange::parse(ed_levels), ed_seed,
                                     ed_direct ? DonorSampling::kDirectStyle : DonorSampling::kLatentPipeline);
        write_outputs(out[0], {content_img}, ed_out, ed_grid);
      } else if (*local_cmd) {
        const auto donor = encode_file(m, ed_style);
        const auto r = local_edit(*m.generator, content, ed_layer, read_mask(ed_mask, m.spec().output_resolution),
                                  donor);
        if (r.empty_mask) std::cerr << "warning: mask is empty, output is the plain reconstruction\n";
        write_outputs(r.image[0], {content_img}, ed_out, ed_grid);
      } else if (*harm_cmd) {
        const auto out = harmonize(*m.encoder, *m.generator, content_img.unsqueeze(0));
        write_outputs(out[0], {content_img}, ed_out, ed_grid);
      }
      return 0;
    }

    if (*probe_cmd) {
      auto m = load_bundle(pr_archive);
      auto train_spec = digit_split(pr_data, "train", m.spec());
      train_spec.end = pr_train;
      auto test_spec = digit_split(pr_data, "test", m.spec());
      test_spec.end = pr_test;
      const auto train = load_dataset(train_spec);
      const auto test = load_dataset(test_spec);
      auto encode_all = [&](const torch::Tensor& images) {
        torch::NoGradGuard no_grad;
        std::vector<StyleCodeHierarchy> parts;
        for (int64_t i = 0; i < images.size(0); i += 256) {
          parts.push_back(m.encoder->encode_styles(images.slice(0, i, std::min(images.size(0), i + 256)), *m.generator));
        }
        return StyleCodeHierarchy::concat(parts);
      };
      const auto train_codes = encode_all(train.images);
      const auto test_codes = encode_all(test.images);
      const bool digit = pr_task == "digit";
      const auto kind = digit ? TaskKind::kClassification : TaskKind::kRegressionL1;
      const auto train_y = digit ? train.label_tensor() : luminance_batch(train.images);
      const auto test_y = digit ? test.label_tensor() : luminance_batch(test.images);
      if (pr_level == "sweep") {
        const auto report = level_sweep(pr_task, train_codes, train_y, test_codes, test_y, kind);
        for (const auto& r : report.records()) std::cout << r.dump() << '\n';
        if (!pr_plot.empty()) write_png(score_plot(report.per_level, higher_is_better(report.metric)), pr_plot);
      } else if (pr_level == "all") {
        const auto r = train_linear_probe(train_codes.flatten(), train_y, test_codes.flatten(), test_y, kind);
        std::cout << nlohmann::json{{"task", pr_task}, {"level", "all"}, {"metric", to_string(r.metric)},
                                    {"score", r.score}}.dump()
                  << '\n';
      } else {
        const auto level = std::stoll(pr_level);
        const auto r = train_linear_probe(train_codes.level_features(level), train_y,
                                          test_codes.level_features(level), test_y, kind);
        std::cout << nlohmann::json{{"task", pr_task}, {"level", level}, {"metric", to_string(r.metric)},
                                    {"score", r.score}}.dump()
                  << '\n';
      }
      return 0;
    }

    if (*metrics_cmd) {
      std::vector<fs::path> names;
      for (const auto& e : fs::directory_iterator(me_real)) {
        if (e.path().extension() == ".png") names.push_back(e.path().filename());
      }
      std::sort(names.begin(), names.end());
      if (names.empty()) throw DataError("no PNG files", me_real);
      std::vector<torch::Tensor> real, rec;
      for (const auto& n : names) {
        real.push_back(read_png(fs::path(me_real) / n, me_channels));
        rec.push_back(read_png(fs::path(me_rec) / n, me_channels));
      }
      const auto m = reconstruction_metrics(torch::stack(real), torch::stack(rec), make_fixed_embedder(me_channels));
      std::cout << nlohmann::json{{"count", names.size()}, {"mse", m.mse}, {"ssim", m.ssim}, {"fid", m.fid},
                                  {"fid_regularized", m.fid_regularized}}.dump()
                << '\n';
      return 0;
    }

    if (*inspect_cmd) {
      const auto a = load_archive(in_path);
      for (const auto& [name, t] : a.tensors()) {
        std::cout << name << " [";
        for (size_t i = 0; i < t.shape.size(); ++i) std::cout << (i ? ", " : "") << t.shape[i];
        std::cout << "]\n";
      }
      std::cout << "digest " << a.digest() << '\n';
      std::cout << "metadata " << a.metadata().dump(2) << '\n';
      return 0;
    }

    if (*serve_cmd) {
      ServiceOptions opts;
      opts.session_ttl = std::chrono::seconds(sv_ttl);
      Service service(load_bundle(sv_archive, sv_generator), opts);
      std::cout << "listening on " << sv_host << ':' << sv_port << std::endl;
      if (!service.listen(sv_host, sv_port)) {
        std::cerr << "could not bind " << sv_host << ':' << sv_port << '\n';
        return 1;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
