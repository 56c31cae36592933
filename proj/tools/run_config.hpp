#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include <nlohmann/json.hpp>

#include "stampnet/data.hpp"
#include "stampnet/model.hpp"
#include "stampnet/training.hpp"

namespace stampnet {

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

}  // namespace stampnet

namespace stampnet::cli {

struct RunPaths {
  std::filesystem::path data;
  std::filesystem::path checkpoints;
  std::filesystem::path outputs;
  std::filesystem::path mnist_images;
  std::filesystem::path mnist_labels;
};

/// One JSON document with "model", "dataset", "train" and "paths" sections
/// plus a top-level "seed". The seed fills dataset.seed and train.seed when
/// those are absent.
struct RunConfig {
  ModelConfig model;
  DatasetConfig dataset;
  TrainConfig train;
  RunPaths paths;
  std::uint64_t seed = 0;

  /// Per-section checks plus the cross-field rules: matching canvases, at
  /// most `model.shapes` objects per image, MNIST files present for the
  /// MNIST kinds. Throws ConfigError with a field path.
  void validate() const;
  /// Overrides the global seed and both derived seeds.
  void reseed(std::uint64_t seed);
};

void to_json(nlohmann::json& j, const RunConfig& c);

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace stampnet::cli
