#include "stampnet/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "stampnet/binary_io.hpp"

namespace stampnet {

namespace {
constexpr std::uint64_t kShuffleStream = 0x5348554655;
constexpr std::uint64_t kSampleStream = 0x534d504c;
}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("train." + field + ": " + why);
  };
  if (epochs < 1) fail("epochs", "must be at least 1");
  if (batch_size < 2) fail("batch_size", "must be at least 2 (BatchNorm)");
  if (!(adam.lr > 0.0)) fail("lr", "must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
  if (!(adam.epsilon > 0.0)) fail("adam_epsilon", "must be positive");
  if (!(tau_initial > 0.0)) fail("tau_initial", "must be positive");
  if (!(tau_floor > 0.0)) fail("tau_floor", "must be positive");
  if (!(tau_rate >= 0.0)) fail("tau_rate", "must be non-negative");
  if (!(tau_eval > 0.0)) fail("tau_eval", "must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.adam.lr},
                     {"beta1", c.adam.beta1},
                     {"beta2", c.adam.beta2},
                     {"adam_epsilon", c.adam.epsilon},
                     {"tau_initial", c.tau_initial},
                     {"tau_floor", c.tau_floor},
                     {"tau_rate", c.tau_rate},
                     {"tau_eval", c.tau_eval},
                     {"checkpoint_every", c.checkpoint_every},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.epsilon = j.value("adam_epsilon", c.adam.epsilon);
  c.tau_initial = j.value("tau_initial", c.tau_initial);
  c.tau_floor = j.value("tau_floor", c.tau_floor);
  c.tau_rate = j.value("tau_rate", c.tau_rate);
  c.tau_eval = j.value("tau_eval", c.tau_eval);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
}

double anneal_tau(std::size_t epoch, const TrainConfig& config) {
  return std::max(config.tau_floor, config.tau_initial * std::exp(-config.tau_rate * static_cast<double>(epoch)));
}

std::string to_json_line(const EpochRecord& r) {
  // Fixed formatting keeps report files diff-stable.
  char buf[256];
  std::snprintf(buf, sizeof buf, R"({"epoch": %zu, "tau": %.12g, "mean_loss": %.12g, "seconds": %.3f})", r.epoch,
                r.tau, r.mean_loss, r.seconds);
  return buf;
}

EpochRecord epoch_record_from_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  return EpochRecord{j.at("epoch").get<std::size_t>(), j.at("tau").get<double>(), j.at("mean_loss").get<double>(),
                     j.at("seconds").get<double>()};
}

TrainState TrainState::fresh(StampNet& model, std::uint64_t seed) {
  TrainState s;
  s.adam = AdamState::for_parameters(model.trainable_parameters());
  s.seed = seed;
  return s;
}

double train_epoch(StampNet& model, const Dataset& data, double tau, TrainState& state, const TrainConfig& config) {
  if (!(tau > 0.0)) throw ConfigError("train_epoch: temperature must be positive");
  const std::size_t n = data.size();
  if (n < 2) throw ConfigError("train_epoch: need at least 2 samples (BatchNorm)");
  const ModelConfig& mc = model.config();
  if (data.canvas_x != mc.canvas_x || data.canvas_y != mc.canvas_y) {
    throw DimensionError("train_epoch: dataset canvas does not match the model");
  }

  SeededRng shuffle = SeededRng::derive(state.seed, {kShuffleStream, state.epoch});
  const auto order = permutation(n, shuffle);

  // Batch boundaries; a trailing batch of one sample joins its predecessor.
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s < n; s += config.batch_size) starts.push_back(s);
  if (n - starts.back() < 2 && starts.size() > 1) starts.pop_back();
  starts.push_back(n);

  const auto trainable = model.trainable_parameters();
  double loss_sum = 0.0;
  for (std::size_t b = 0; b + 1 < starts.size(); ++b) {
    const std::span<const std::size_t> idx(order.data() + starts[b], starts[b + 1] - starts[b]);
    std::vector<SeededRng> rngs;
    rngs.reserve(idx.size());
    for (std::size_t i : idx) rngs.push_back(SeededRng::derive(state.seed, {kSampleStream, state.epoch, i}));
    const Tensor images = stack_images(data, idx);

    model.zero_grad();
    Tape tape;
    const auto out = model.forward(tape, images, tau, rngs, Mode::train);
    const Var loss = mse_loss(out.reconstruction, tape.reference(images));
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss at epoch " + std::to_string(state.epoch) + ", batch " +
                         std::to_string(b) + ", tau " + std::to_string(tau));
    }
    tape.backward(loss);
    adam_step(trainable, state.adam, config.adam);
    model.constrain_stamps();
    loss_sum += value;
  }
  return loss_sum / static_cast<double>(starts.size() - 1);
}

std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04zu.ckpt", epoch);
  return buf;
}

TrainReport fit(StampNet& model, const Dataset& train, const TrainConfig& config, TrainState& state,
                const FitOptions& options) {
  config.validate();
  TrainReport report;
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);
  while (state.epoch < config.epochs) {
    const auto start = std::chrono::steady_clock::now();
    const std::size_t epoch = state.epoch;
    const double tau = anneal_tau(epoch, config);
    const double loss = train_epoch(model, train, tau, state, config);
    state.epoch = epoch + 1;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EpochRecord rec{epoch, tau, loss, secs};
    report.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    if (options.checkpoint_dir) {
      const bool periodic = config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0;
      if (periodic) save_checkpoint(model, state, *options.checkpoint_dir / checkpoint_name(state.epoch));
      if (state.epoch == config.epochs) save_checkpoint(model, state, *options.checkpoint_dir / "final.ckpt");
    }
  }
  return report;
}

void save_checkpoint(const StampNet& model, const TrainState& state, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  io::write_magic(out, "STCK");
  io::write_le<std::uint32_t>(out, kCheckpointFormatVersion);
  const std::string config_text = nlohmann::json(model.config()).dump();
  io::write_le<std::uint64_t>(out, config_text.size());
  out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  io::write_le<std::uint64_t>(out, state.epoch);
  io::write_le<std::uint64_t>(out, state.seed);
  io::write_le<std::uint64_t>(out, state.adam.step);
  const auto params = model.parameters();
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  std::size_t trainable = 0;
  for (const Parameter* p : params) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    io::write_le<std::uint8_t>(out, p->trainable ? 1 : 0);
    write_tensor(out, p->value);
    trainable += p->trainable ? 1 : 0;
  }
  if (state.adam.m.size() != trainable || state.adam.v.size() != trainable) {
    throw DimensionError("save_checkpoint: optimizer state does not match the model");
  }
  for (std::size_t i = 0; i < trainable; ++i) {
    write_tensor(out, state.adam.m[i]);
    write_tensor(out, state.adam.v[i]);
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

namespace {

struct RawCheckpoint {
  ModelConfig config;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<Tensor> m, v;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  try {
    RawCheckpoint raw;
    io::expect_magic(in, "STCK");
    const auto version = io::read_le<std::uint32_t>(in, "checkpoint version");
    if (version != kCheckpointFormatVersion) {
      throw FormatError("unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointFormatVersion) + ")");
    }
    const auto len = io::read_le<std::uint64_t>(in, "config length");
    if (len > (1u << 20)) throw FormatError("implausible config length" + io::offset_suffix(in));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (in.gcount() != static_cast<std::streamsize>(len)) throw FormatError("truncated config text");
    try {
      raw.config = nlohmann::json::parse(text).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad model config text: ") + e.what());
    }
    raw.epoch = io::read_le<std::uint64_t>(in, "epoch");
    raw.seed = io::read_le<std::uint64_t>(in, "seed");
    raw.step = io::read_le<std::uint64_t>(in, "adam step");
    const auto count = io::read_le<std::uint32_t>(in, "tensor count");
    std::size_t trainable = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto nlen = io::read_le<std::uint32_t>(in, "name length");
      if (nlen > 4096) throw FormatError("implausible tensor name length" + io::offset_suffix(in));
      std::string name(nlen, '\0');
      in.read(name.data(), nlen);
      if (in.gcount() != static_cast<std::streamsize>(nlen)) throw FormatError("truncated tensor name");
      trainable += io::read_le<std::uint8_t>(in, "trainable flag") != 0 ? 1 : 0;
      raw.tensors.emplace_back(std::move(name), read_tensor(in));
    }
    for (std::size_t i = 0; i < trainable; ++i) {
      raw.m.push_back(read_tensor(in));
      raw.v.push_back(read_tensor(in));
    }
    return raw;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void apply(const RawCheckpoint& raw, StampNet& model, TrainState& state) {
  if (!(raw.config == model.config())) {
    throw DimensionError("checkpoint model configuration " + nlohmann::json(raw.config).dump() +
                         " differs from " + nlohmann::json(model.config()).dump());
  }
  auto params = model.parameters();
  if (params.size() != raw.tensors.size()) throw DimensionError("checkpoint tensor count differs from the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = raw.tensors[i];
    if (name != params[i]->name || t.shape() != params[i]->value.shape()) {
      throw DimensionError("checkpoint tensor " + name + " " + shape_string(t.shape()) + " does not match " +
                           params[i]->name + " " + shape_string(params[i]->value.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->value = raw.tensors[i].second;
    params[i]->zero_grad();
  }
  TrainState fresh = TrainState::fresh(model, raw.seed);
  if (fresh.adam.m.size() != raw.m.size()) throw DimensionError("checkpoint optimizer state does not match");
  for (std::size_t i = 0; i < raw.m.size(); ++i) {
    if (raw.m[i].shape() != fresh.adam.m[i].shape() || raw.v[i].shape() != fresh.adam.v[i].shape()) {
      throw DimensionError("checkpoint optimizer moment shape mismatch");
    }
  }
  fresh.adam.m = raw.m;
  fresh.adam.v = raw.v;
  fresh.adam.step = raw.step;
  fresh.epoch = raw.epoch;
  state = std::move(fresh);
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  RawCheckpoint raw = read_raw(path);
  try {
    raw.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": invalid stored configuration: " + e.what());
  }
  Checkpoint ck{StampNet(raw.config, 0), {}};
  apply(raw, ck.model, ck.state);
  return ck;
}

void restore_checkpoint(const std::filesystem::path& path, StampNet& model, TrainState& state) {
  apply(read_raw(path), model, state);
}

}  // namespace stampnet
