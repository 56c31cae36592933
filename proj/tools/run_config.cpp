#include "run_config.hpp"

#include <fstream>

#include "stampnet/errors.hpp"

namespace stampnet {

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"kind", std::string(to_string(c.kind))},
                     {"canvas", {c.canvas_x, c.canvas_y}},
                     {"shape_size", c.shape_size},
                     {"shapes_per_image", c.shapes_per_image},
                     {"clutter_count", c.clutter_count},
                     {"clutter_size", c.clutter_size},
                     {"samples", c.samples},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c = DatasetConfig{};
  if (j.contains("kind")) c.kind = dataset_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("canvas")) {
    c.canvas_x = j.at("canvas").at(0).get<Index>();
    c.canvas_y = j.at("canvas").at(1).get<Index>();
  }
  c.shape_size = j.value("shape_size", c.shape_size);
  c.shapes_per_image = j.value("shapes_per_image", c.shapes_per_image);
  c.clutter_count = j.value("clutter_count", c.clutter_count);
  c.clutter_size = j.value("clutter_size", c.clutter_size);
  c.samples = j.value("samples", c.samples);
  c.seed = j.value("seed", c.seed);
}

}  // namespace stampnet

namespace stampnet::cli {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"model", c.model},
                     {"dataset", c.dataset},
                     {"train", c.train},
                     {"paths",
                      {{"data", c.paths.data.string()},
                       {"checkpoints", c.paths.checkpoints.string()},
                       {"outputs", c.paths.outputs.string()},
                       {"mnist_images", c.paths.mnist_images.string()},
                       {"mnist_labels", c.paths.mnist_labels.string()}}}};
}

namespace {

template <typename T>
T section(const nlohmann::json& j, const char* name) {
  if (!j.contains(name)) return T{};
  const auto& s = j.at(name);
  if (!s.is_object()) throw ConfigError(std::string(name) + ": expected an object");
  try {
    return s.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(name) + ": " + e.what());
  }
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object at the top level");
  for (const auto& [key, value] : j.items()) {
    if (key != "seed" && key != "model" && key != "dataset" && key != "train" && key != "paths") {
      throw ConfigError(key + ": unknown section");
    }
  }
  RunConfig c;
  try {
    c.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("seed: expected a non-negative integer");
  }
  c.model = section<ModelConfig>(j, "model");
  c.dataset = section<DatasetConfig>(j, "dataset");
  c.train = section<TrainConfig>(j, "train");
  const bool dataset_seed = j.contains("dataset") && j.at("dataset").contains("seed");
  const bool train_seed = j.contains("train") && j.at("train").contains("seed");
  if (!dataset_seed) c.dataset.seed = c.seed;
  if (!train_seed) c.train.seed = c.seed;
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    auto get = [&](const char* key) -> fs::path {
      if (!p.contains(key)) return {};
      if (!p.at(key).is_string()) throw ConfigError(std::string("paths.") + key + ": expected a string");
      return p.at(key).get<std::string>();
    };
    c.paths = RunPaths{get("data"), get("checkpoints"), get("outputs"), get("mnist_images"), get("mnist_labels")};
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void RunConfig::validate() const {
  model.validate();
  dataset.validate();
  train.validate();
  if (dataset.canvas_x != model.canvas_x || dataset.canvas_y != model.canvas_y) {
    throw ConfigError("dataset.canvas: must equal model.canvas");
  }
  if (dataset.shapes_per_image > model.shapes) {
    throw ConfigError("dataset.shapes_per_image: exceeds model.shapes");
  }
  if (dataset.kind != DatasetKind::simple_shapes) {
    for (const auto& [key, p] : {std::pair{"paths.mnist_images", paths.mnist_images},
                                 std::pair{"paths.mnist_labels", paths.mnist_labels}}) {
      if (p.empty()) throw ConfigError(std::string(key) + ": required for dataset kind " +
                                       std::string(to_string(dataset.kind)));
      if (!fs::exists(p)) throw ConfigError(std::string(key) + ": file not found: " + p.string());
    }
  }
}

void RunConfig::reseed(std::uint64_t s) {
  seed = s;
  dataset.seed = s;
  train.seed = s;
}

}  // namespace stampnet::cli
