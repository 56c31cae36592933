#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stampnet/box.hpp"
#include "stampnet/rng.hpp"
#include "stampnet/tensor.hpp"

namespace stampnet {

enum class DatasetKind { simple_shapes, t_mnist, ct_mnist };

std::string_view to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(std::string_view name);

enum class ShapeName { plus, equal, equal_rot, slash, triangle };

inline constexpr std::array<ShapeName, 5> kSimpleShapes = {ShapeName::plus, ShapeName::equal,
                                                           ShapeName::equal_rot, ShapeName::slash,
                                                           ShapeName::triangle};

std::string_view to_string(ShapeName name);
ShapeName shape_name_from_string(std::string_view name);

/// Evaluation-only annotation. (x, y) is the top-left corner on the canvas.
struct GroundTruthBox {
  Index x = 0;
  Index y = 0;
  Index width = 0;
  Index height = 0;
  Index class_label = 0;

  BoundingBox box() const { return BoundingBox{x, y, width, height}; }
  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

/// One canvas [canvas_x, canvas_y] with values in [0, 1] and its boxes.
struct Sample {
  Tensor image;
  std::vector<GroundTruthBox> boxes;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  Index canvas_x = 0;
  Index canvas_y = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct DatasetConfig {
  DatasetKind kind = DatasetKind::simple_shapes;
  Index canvas_x = 84;
  Index canvas_y = 84;
  Index shape_size = 28;      // square shape / digit extent
  Index shapes_per_image = 2;  // m
  Index clutter_count = 8;     // ct_mnist only
  Index clutter_size = 8;      // ct_mnist only
  std::size_t samples = 0;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct MnistSet {
  std::vector<Tensor> images;  // [28, 28] in [0, 1], indexed (x, y)
  std::vector<std::uint8_t> labels;
};

/// Binary raster of a Simple Shapes class, [size, size], values in {0, 1}.
/// Bars, slash and the triangle outline use a stroke of size / 7 pixels.
Tensor raster_shape(ShapeName name, Index size = 28);

/// Pastes `piece` at (x, y) by elementwise max. The piece must fit.
void paste_max(Tensor& canvas, const Tensor& piece, Index x, Index y);

Dataset gen_simple_shapes(const DatasetConfig& config, unsigned threads = 1);
Dataset gen_translated_mnist(const DatasetConfig& config, const MnistSet& mnist, unsigned threads = 1);
Dataset gen_cluttered_translated_mnist(const DatasetConfig& config, const MnistSet& mnist,
                                       unsigned threads = 1);
/// Dispatches on config.kind; `mnist` may be null for simple_shapes.
Dataset generate_dataset(const DatasetConfig& config, const MnistSet* mnist, unsigned threads = 1);

/// Reads an IDX image file (magic 2051) and label file (magic 2049).
MnistSet load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Dataset container: "STDS", u32 version, u64 count, u32 canvas_x, u32
/// canvas_y, then per sample a tensor record, u32 box count and 5 x u32 per
/// box (x, y, w, h, class). Little-endian.
inline constexpr std::uint32_t kDatasetFormatVersion = 1;

void write_dataset(std::ostream& out, const Dataset& dataset);
Dataset read_dataset(std::istream& in);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// FNV-1a over the file bytes, printed by the CLI as a content checksum.
std::uint64_t file_checksum(const std::filesystem::path& path);

/// Stacks the selected samples into a [count, canvas_x, canvas_y] batch.
Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices);

}  // namespace stampnet
