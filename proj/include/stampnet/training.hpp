#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stampnet/adam.hpp"
#include "stampnet/data.hpp"
#include "stampnet/model.hpp"

namespace stampnet {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  AdamConfig adam{};
  // Gumbel temperature tau(t) = max(tau_floor, tau_initial * exp(-tau_rate * t)).
  double tau_initial = 7.0;
  double tau_floor = 0.2;
  double tau_rate = 0.01;
  double tau_eval = 0.01;
  std::size_t checkpoint_every = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Temperature for epoch t, updated once per epoch.
double anneal_tau(std::size_t epoch, const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  double tau = 0.0;
  double mean_loss = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
};

/// One JSON object per line: {"epoch", "tau", "mean_loss", "seconds"}.
std::string to_json_line(const EpochRecord& record);
EpochRecord epoch_record_from_json_line(const std::string& line);

/// Optimizer moments plus the index of the next epoch to run. Together with
/// the seed this is the whole RNG state: every stream is derived from
/// (seed, epoch, sample).
struct TrainState {
  AdamState adam;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;

  static TrainState fresh(StampNet& model, std::uint64_t seed);
};

/// One pass over shuffled mini-batches: forward in train mode, MSE against
/// the input, backward, Adam step, stamp projection. Returns the mean batch
/// loss. Throws NumericError on a non-finite loss.
double train_epoch(StampNet& model, const Dataset& data, double tau, TrainState& state, const TrainConfig& config);

struct FitOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Runs epochs state.epoch .. config.epochs-1 with the annealed temperature,
/// checkpointing every `checkpoint_every` epochs and after the last one.
TrainReport fit(StampNet& model, const Dataset& train, const TrainConfig& config, TrainState& state,
                const FitOptions& options = {});

// Checkpoint: "STCK", u32 version, u64 length + ModelConfig JSON text, u64
// next epoch, u64 seed, u64 Adam step, u32 tensor count, then per tensor
// (model order) u32 name length, name, u8 trainable flag, tensor record;
// then Adam m and v tensor records for each trainable tensor in order.
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

void save_checkpoint(const StampNet& model, const TrainState& state, const std::filesystem::path& path);

struct Checkpoint {
  StampNet model;
  TrainState state;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Loads into an existing model; throws DimensionError when the stored
/// configuration or tensor shapes differ from the model's.
void restore_checkpoint(const std::filesystem::path& path, StampNet& model, TrainState& state);

std::string checkpoint_name(std::size_t epoch);

}  // namespace stampnet
