#include "cli.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "pgm.hpp"
#include "run_config.hpp"
#include "stampnet/errors.hpp"
#include "stampnet/evaluation.hpp"

namespace stampnet::cli {

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::string out;
};

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void require_file(const std::string& flag, const fs::path& p) {
  if (p.empty()) throw ConfigError(flag + ": required");
  if (!fs::is_regular_file(p)) throw ConfigError(flag + ": file not found: " + p.string());
}

fs::path pick(const std::string& flag, const std::string& given, const fs::path& fallback) {
  const fs::path p = given.empty() ? fallback : fs::path(given);
  if (p.empty()) throw ConfigError(flag + ": required (flag or config paths section)");
  return p;
}

RunConfig config_for(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config: required");
  RunConfig c = load_run_config(g.config);
  if (g.seed) c.reseed(*g.seed);
  return c;
}

Dataset load_compatible(const fs::path& path, const ModelConfig& model) {
  Dataset d = load_dataset(path);
  if (d.canvas_x != model.canvas_x || d.canvas_y != model.canvas_y) {
    throw DimensionError("dataset canvas " + std::to_string(d.canvas_x) + "x" + std::to_string(d.canvas_y) +
                         " does not match model canvas " + std::to_string(model.canvas_x) + "x" +
                         std::to_string(model.canvas_y));
  }
  return d;
}

int cmd_gen(const Globals& g, std::optional<std::size_t> samples, std::ostream& out) {
  RunConfig c = config_for(g);
  if (samples) c.dataset.samples = *samples;
  c.validate();
  const fs::path target = pick("--out", g.out, c.paths.data);
  std::optional<MnistSet> mnist;
  if (c.dataset.kind != DatasetKind::simple_shapes) mnist = load_mnist_idx(c.paths.mnist_images, c.paths.mnist_labels);
  const Dataset d = generate_dataset(c.dataset, mnist ? &*mnist : nullptr, g.threads);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  save_dataset(d, target);
  out << "samples " << d.size() << " checksum " << hex64(file_checksum(target)) << " -> " << target.string()
      << "\n";
  return kExitOk;
}

int cmd_train(const Globals& g, const std::string& data_flag, const std::string& resume, std::ostream& out) {
  RunConfig c = config_for(g);
  c.model.validate();
  c.train.validate();
  const fs::path data_path = pick("--data", data_flag, c.paths.data);
  require_file("--data", data_path);
  if (!resume.empty()) require_file("--resume", resume);
  const fs::path dir = pick("--out", g.out, c.paths.checkpoints);

  const Dataset data = load_compatible(data_path, c.model);
  StampNet model(c.model, c.train.seed);
  TrainState state = TrainState::fresh(model, c.train.seed);
  if (!resume.empty()) {
    restore_checkpoint(resume, model, state);
    out << "resumed at epoch " << state.epoch << "\n";
  }
  fs::create_directories(dir);
  std::ofstream log(dir / "train_log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  FitOptions opts;
  opts.checkpoint_dir = dir;
  opts.on_epoch = [&](const EpochRecord& r) {
    const std::string line = to_json_line(r);
    out << line << "\n" << std::flush;
    log << line << "\n" << std::flush;
  };
  fit(model, data, c.train, state, opts);
  out << "final checkpoint " << (dir / "final.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_eval(const Globals& g, const std::string& ckpt, const std::string& data_flag, std::ostream& out) {
  std::optional<RunConfig> c;
  if (!g.config.empty()) c = config_for(g);
  require_file("--checkpoint", ckpt);
  const fs::path data_path = pick("--data", data_flag, c ? c->paths.data : fs::path{});
  require_file("--data", data_path);
  const fs::path report_path = pick("--out", g.out, c ? c->paths.outputs / "report.json" : fs::path{});

  const Checkpoint ck = load_checkpoint(ckpt);
  if (c && !(c->model == ck.model.config())) {
    throw DimensionError("checkpoint model configuration differs from the config file's model section");
  }
  const Dataset data = load_compatible(data_path, ck.model.config());
  EvalOptions opts;
  opts.tau_eval = c ? c->train.tau_eval : TrainConfig{}.tau_eval;
  opts.seed = g.seed.value_or(0);
  opts.threads = g.threads;
  opts.dataset_name = data_path.filename().string();
  const MetricsReport r = evaluate(ck.model, data, opts);
  if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
  export_report(r, report_path);
  out << "corloc " << fixed6(r.corloc) << " mean_iou " << fixed6(r.mean_iou) << " purity " << fixed6(r.purity)
      << "\n";
  return kExitOk;
}

int cmd_stamps(const Globals& g, const std::string& ckpt, std::ostream& out) {
  require_file("--checkpoint", ckpt);
  const fs::path target = pick("--out", g.out, {});
  const Checkpoint ck = load_checkpoint(ckpt);
  const double v_max = ck.model.config().v_max;
  const Tensor grid = stamp_grid(ck.model.stamp_bank().omega, v_max);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  write_pgm(target, grid, v_max);
  out << "stamps " << ck.model.config().stamps << " image " << grid.dim(0) << "x" << grid.dim(1) << " -> "
      << target.string() << "\n";
  return kExitOk;
}

int cmd_reconstruct(const Globals& g, const std::string& ckpt, const std::string& data_flag,
                    const std::vector<std::size_t>& indices, std::ostream& out) {
  std::optional<RunConfig> c;
  if (!g.config.empty()) c = config_for(g);
  require_file("--checkpoint", ckpt);
  const fs::path data_path = pick("--data", data_flag, c ? c->paths.data : fs::path{});
  require_file("--data", data_path);
  const fs::path dir = pick("--out", g.out, c ? c->paths.outputs : fs::path{});
  if (indices.empty()) throw ConfigError("--indices: at least one index required");

  const Checkpoint ck = load_checkpoint(ckpt);
  const ModelConfig& mc = ck.model.config();
  const Dataset data = load_compatible(data_path, mc);
  for (std::size_t i : indices) {
    if (i >= data.size()) {
      throw ConfigError("--indices: " + std::to_string(i) + " out of range for " + std::to_string(data.size()) +
                        " samples");
    }
  }
  const double tau = c ? c->train.tau_eval : TrainConfig{}.tau_eval;
  const std::uint64_t seed = g.seed.value_or(0);
  fs::create_directories(dir);
  for (std::size_t i : indices) {
    const std::size_t one[1] = {i};
    std::vector<SeededRng> rngs{eval_stream(seed, i)};
    const auto inf = ck.model.infer(stack_images(data, one), tau, rngs);
    const Tensor& input = data.samples[i].image;
    Tensor recon({mc.canvas_x, mc.canvas_y});
    for (Index x = 0; x < mc.canvas_x; ++x)
      for (Index y = 0; y < mc.canvas_y; ++y) recon(x, y) = inf.reconstructions(0, x, y);
    Tensor boxed = input;
    const auto preds = extract_predictions(inf.latents[0], mc.stamp_x, mc.stamp_y);
    for (std::size_t s = 0; s < preds.size(); ++s) {
      const auto& b = preds[s].box;
      draw_box(boxed, b.x, b.y, b.width, b.height, 0.5 * mc.v_max);
      out << "sample " << i << " shape " << s << " x " << b.x << " y " << b.y << " stamp " << preds[s].stamp
          << "\n";
    }
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%04zu", i);
    write_pgm(dir / (std::string(stem) + "_input.pgm"), input, mc.v_max);
    write_pgm(dir / (std::string(stem) + "_reconstruction.pgm"), recon, mc.v_max);
    write_pgm(dir / (std::string(stem) + "_boxes.pgm"), boxed, mc.v_max);
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Generate data, train, evaluate and inspect stamp autoencoders"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Run configuration (JSON)");
  app.add_option("--seed", g.seed, "Override every seed");
  app.add_option("--threads", g.threads, "Worker threads for generation and evaluation")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output file or directory");

  std::optional<std::size_t> samples;
  auto* gen = app.add_subcommand("gen", "Generate a dataset container");
  gen->add_option("--samples", samples, "Override dataset.samples");

  std::string data, resume, ckpt;
  std::vector<std::size_t> indices;
  auto* train = app.add_subcommand("train", "Train a model, writing checkpoints and a JSON-lines log");
  train->add_option("--data", data, "Training dataset");
  train->add_option("--resume", resume, "Checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write a metrics report");
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data, "Test dataset");

  auto* stamps = app.add_subcommand("stamps", "Export the stamp bank as a PGM grid");
  stamps->add_option("--checkpoint", ckpt, "Checkpoint file")->required();

  auto* recon = app.add_subcommand("reconstruct", "Write input, reconstruction and box images");
  recon->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  recon->add_option("--data", data, "Dataset");
  recon->add_option("--indices", indices, "Sample indices")->delimiter(',')->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  try {
    if (gen->parsed()) return cmd_gen(g, samples, out);
    if (train->parsed()) return cmd_train(g, data, resume, out);
    if (eval->parsed()) return cmd_eval(g, ckpt, data, out);
    if (stamps->parsed()) return cmd_stamps(g, ckpt, out);
    return cmd_reconstruct(g, ckpt, data, indices, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DimensionError& e) {
    err << "incompatible input: " << e.what() << "\n";
    return kExitCompatibility;
  } catch (const FormatError& e) {
    err << "incompatible input: " << e.what() << "\n";
    return kExitCompatibility;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace stampnet::cli
