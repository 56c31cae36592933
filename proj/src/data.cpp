#include "stampnet/data.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "stampnet/binary_io.hpp"
#include "stampnet/parallel.hpp"

namespace stampnet {

namespace {
// Stream tags keep generator RNG streams disjoint from training streams.
constexpr std::uint64_t kShapesStream = 0x5348;
constexpr std::uint64_t kMnistStream = 0x4d4e;
}  // namespace

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::simple_shapes: return "simple_shapes";
    case DatasetKind::t_mnist: return "t_mnist";
    case DatasetKind::ct_mnist: return "ct_mnist";
  }
  return "unknown";
}

DatasetKind dataset_kind_from_string(std::string_view name) {
  if (name == "simple_shapes") return DatasetKind::simple_shapes;
  if (name == "t_mnist") return DatasetKind::t_mnist;
  if (name == "ct_mnist") return DatasetKind::ct_mnist;
  throw ConfigError("unknown dataset kind \"" + std::string(name) + "\"");
}

std::string_view to_string(ShapeName name) {
  switch (name) {
    case ShapeName::plus: return "plus";
    case ShapeName::equal: return "equal";
    case ShapeName::equal_rot: return "equal_rot";
    case ShapeName::slash: return "slash";
    case ShapeName::triangle: return "triangle";
  }
  return "unknown";
}

ShapeName shape_name_from_string(std::string_view name) {
  for (ShapeName s : kSimpleShapes) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown shape \"" + std::string(name) + "\"");
}

void DatasetConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("dataset." + field + ": " + why);
  };
  if (canvas_x <= 0 || canvas_y <= 0) fail("canvas", "extents must be positive");
  if (shape_size <= 0 || shape_size > canvas_x || shape_size > canvas_y) {
    fail("shape_size", "must be positive and fit on the canvas");
  }
  if (kind != DatasetKind::simple_shapes && shape_size != 28) fail("shape_size", "MNIST digits are 28x28");
  if (shapes_per_image < 1) fail("shapes_per_image", "must be at least 1");
  if (kind == DatasetKind::ct_mnist) {
    if (clutter_count < 0) fail("clutter_count", "must be non-negative");
    if (clutter_size <= 0 || clutter_size > 28 || clutter_size > canvas_x || clutter_size > canvas_y) {
      fail("clutter_size", "clutter pieces must fit inside a digit and on the canvas");
    }
  }
}

Tensor raster_shape(ShapeName name, Index size) {
  if (size < 7) throw ConfigError("raster_shape: size must be at least 7");
  const Index stroke = size / 7;
  Tensor r({size, size});
  auto in_band = [](Index v, Index lo, Index width) { return v >= lo && v < lo + width; };
  const Index centre = (size - stroke) / 2;
  const Index first_bar = size / 4 - stroke / 2;
  const Index second_bar = size - first_bar - stroke;
  for (Index x = 0; x < size; ++x) {
    for (Index y = 0; y < size; ++y) {
      bool on = false;
      switch (name) {
        case ShapeName::plus:
          on = in_band(x, centre, stroke) || in_band(y, centre, stroke);
          break;
        case ShapeName::equal:
          on = in_band(y, first_bar, stroke) || in_band(y, second_bar, stroke);
          break;
        case ShapeName::equal_rot:
          on = in_band(x, first_bar, stroke) || in_band(x, second_bar, stroke);
          break;
        case ShapeName::slash:
          // Anti-diagonal band x + y in [size-1 - stroke/2 + 1, size-1 + stroke/2].
          on = in_band(x + y, size - stroke / 2, stroke);
          break;
        case ShapeName::triangle: {
          // Apex at y = 0, base along y = size - 1; filled.
          const double half = static_cast<double>(y + 1) / 2.0;
          on = std::abs(static_cast<double>(x) + 0.5 - static_cast<double>(size) / 2.0) <= half;
          break;
        }
      }
      r(x, y) = on ? 1.0 : 0.0;
    }
  }
  return r;
}

void paste_max(Tensor& canvas, const Tensor& piece, Index x, Index y) {
  if (x < 0 || y < 0 || x + piece.dim(0) > canvas.dim(0) || y + piece.dim(1) > canvas.dim(1)) {
    throw DimensionError("paste_max: piece does not fit at (" + std::to_string(x) + "," + std::to_string(y) + ")");
  }
  for (Index i = 0; i < piece.dim(0); ++i) {
    for (Index j = 0; j < piece.dim(1); ++j) canvas(x + i, y + j) = std::max(canvas(x + i, y + j), piece(i, j));
  }
}

namespace {

template <typename SampleFn>
Dataset generate(const DatasetConfig& config, unsigned threads, SampleFn&& make) {
  config.validate();
  Dataset ds{config.canvas_x, config.canvas_y, std::vector<Sample>(config.samples)};
  parallel_for(config.samples, threads, [&](std::size_t i) { ds.samples[i] = make(i); });
  return ds;
}

void require_mnist(const MnistSet& mnist) {
  if (mnist.images.empty()) throw ConfigError("MNIST set is empty");
  if (mnist.images.size() != mnist.labels.size()) throw ConfigError("MNIST images and labels differ in count");
}

Sample place_digits(const DatasetConfig& c, const MnistSet& mnist, SeededRng& rng) {
  Sample s{Tensor({c.canvas_x, c.canvas_y}), {}};
  const Index nx = c.canvas_x - 28 + 1, ny = c.canvas_y - 28 + 1;
  for (Index m = 0; m < c.shapes_per_image; ++m) {
    const auto d = static_cast<std::size_t>(rng.below(mnist.images.size()));
    const auto x = static_cast<Index>(rng.below(static_cast<std::uint64_t>(nx)));
    const auto y = static_cast<Index>(rng.below(static_cast<std::uint64_t>(ny)));
    paste_max(s.image, mnist.images[d], x, y);
    s.boxes.push_back(GroundTruthBox{x, y, 28, 28, static_cast<Index>(mnist.labels[d])});
  }
  return s;
}

}  // namespace

Dataset gen_simple_shapes(const DatasetConfig& config, unsigned threads) {
  if (config.kind != DatasetKind::simple_shapes) throw ConfigError("gen_simple_shapes: kind must be simple_shapes");
  std::vector<Tensor> rasters;
  for (ShapeName s : kSimpleShapes) rasters.push_back(raster_shape(s, config.shape_size));
  const Index nx = config.canvas_x - config.shape_size + 1;
  const Index ny = config.canvas_y - config.shape_size + 1;
  return generate(config, threads, [&](std::size_t i) {
    SeededRng rng = SeededRng::derive(config.seed, {kShapesStream, i});
    Sample s{Tensor({config.canvas_x, config.canvas_y}), {}};
    for (Index m = 0; m < config.shapes_per_image; ++m) {
      const auto cls = static_cast<Index>(rng.below(rasters.size()));
      const auto x = static_cast<Index>(rng.below(static_cast<std::uint64_t>(nx)));
      const auto y = static_cast<Index>(rng.below(static_cast<std::uint64_t>(ny)));
      paste_max(s.image, rasters[static_cast<std::size_t>(cls)], x, y);
      s.boxes.push_back(GroundTruthBox{x, y, config.shape_size, config.shape_size, cls});
    }
    return s;
  });
}

Dataset gen_translated_mnist(const DatasetConfig& config, const MnistSet& mnist, unsigned threads) {
  if (config.kind != DatasetKind::t_mnist) throw ConfigError("gen_translated_mnist: kind must be t_mnist");
  require_mnist(mnist);
  return generate(config, threads, [&](std::size_t i) {
    SeededRng rng = SeededRng::derive(config.seed, {kMnistStream, i});
    return place_digits(config, mnist, rng);
  });
}

Dataset gen_cluttered_translated_mnist(const DatasetConfig& config, const MnistSet& mnist, unsigned threads) {
  if (config.kind != DatasetKind::ct_mnist) {
    throw ConfigError("gen_cluttered_translated_mnist: kind must be ct_mnist");
  }
  require_mnist(mnist);
  const Index cs = config.clutter_size;
  return generate(config, threads, [&](std::size_t i) {
    SeededRng rng = SeededRng::derive(config.seed, {kMnistStream, i});
    Sample s = place_digits(config, mnist, rng);
    Tensor crop({cs, cs});
    for (Index c = 0; c < config.clutter_count; ++c) {
      const Tensor& digit = mnist.images[static_cast<std::size_t>(rng.below(mnist.images.size()))];
      const auto ox = static_cast<Index>(rng.below(static_cast<std::uint64_t>(28 - cs + 1)));
      const auto oy = static_cast<Index>(rng.below(static_cast<std::uint64_t>(28 - cs + 1)));
      for (Index a = 0; a < cs; ++a) {
        for (Index b = 0; b < cs; ++b) crop(a, b) = digit(ox + a, oy + b);
      }
      const auto px = static_cast<Index>(rng.below(static_cast<std::uint64_t>(config.canvas_x - cs + 1)));
      const auto py = static_cast<Index>(rng.below(static_cast<std::uint64_t>(config.canvas_y - cs + 1)));
      paste_max(s.image, crop, px, py);
    }
    return s;
  });
}

Dataset generate_dataset(const DatasetConfig& config, const MnistSet* mnist, unsigned threads) {
  if (config.kind == DatasetKind::simple_shapes) return gen_simple_shapes(config, threads);
  if (mnist == nullptr) throw ConfigError("dataset." + std::string(to_string(config.kind)) + " requires MNIST data");
  if (config.kind == DatasetKind::t_mnist) return gen_translated_mnist(config, *mnist, threads);
  return gen_cluttered_translated_mnist(config, *mnist, threads);
}

MnistSet load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw FormatError("cannot open MNIST images file " + images_path.string());
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw FormatError("cannot open MNIST labels file " + labels_path.string());

  const auto image_magic = io::read_be<std::uint32_t>(images, "IDX image magic");
  if (image_magic != 2051) {
    throw FormatError(images_path.string() + ": bad IDX image magic " + std::to_string(image_magic) +
                      " at byte offset 0 (expected 2051)");
  }
  const auto count = io::read_be<std::uint32_t>(images, "IDX image count");
  const auto rows = io::read_be<std::uint32_t>(images, "IDX row count");
  const auto cols = io::read_be<std::uint32_t>(images, "IDX column count");
  if (rows != 28 || cols != 28) {
    throw FormatError(images_path.string() + ": expected 28x28 images at byte offset 8, got " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  }
  const auto label_magic = io::read_be<std::uint32_t>(labels, "IDX label magic");
  if (label_magic != 2049) {
    throw FormatError(labels_path.string() + ": bad IDX label magic " + std::to_string(label_magic) +
                      " at byte offset 0 (expected 2049)");
  }
  const auto label_count = io::read_be<std::uint32_t>(labels, "IDX label count");
  if (label_count != count) {
    throw FormatError("MNIST count mismatch: " + std::to_string(count) + " images (byte offset 4 of " +
                      images_path.string() + ") vs " + std::to_string(label_count) +
                      " labels (byte offset 4 of " + labels_path.string() + ")");
  }

  MnistSet set;
  set.images.reserve(count);
  set.labels.resize(count);
  std::vector<unsigned char> pixels(28 * 28);
  for (std::uint32_t n = 0; n < count; ++n) {
    images.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (images.gcount() != static_cast<std::streamsize>(pixels.size())) {
      throw FormatError(images_path.string() + ": truncated at image " + std::to_string(n) + ", byte offset " +
                        std::to_string(16 + static_cast<std::uint64_t>(n) * 784 +
                                       static_cast<std::uint64_t>(images.gcount())));
    }
    // IDX stores rows (y) of columns (x); tensors are indexed (x, y).
    Tensor img({28, 28});
    for (Index y = 0; y < 28; ++y) {
      for (Index x = 0; x < 28; ++x) img(x, y) = static_cast<double>(pixels[static_cast<std::size_t>(y * 28 + x)]) / 255.0;
    }
    set.images.push_back(std::move(img));
  }
  labels.read(reinterpret_cast<char*>(set.labels.data()), static_cast<std::streamsize>(count));
  if (labels.gcount() != static_cast<std::streamsize>(count)) {
    throw FormatError(labels_path.string() + ": truncated at byte offset " +
                      std::to_string(8 + static_cast<std::uint64_t>(labels.gcount())));
  }
  return set;
}

void write_dataset(std::ostream& out, const Dataset& dataset) {
  io::write_magic(out, "STDS");
  io::write_le<std::uint32_t>(out, kDatasetFormatVersion);
  io::write_le<std::uint64_t>(out, dataset.samples.size());
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.canvas_x));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.canvas_y));
  for (const Sample& s : dataset.samples) {
    if (s.image.rank() != 2 || s.image.dim(0) != dataset.canvas_x || s.image.dim(1) != dataset.canvas_y) {
      throw DimensionError("write_dataset: sample image " + shape_string(s.image.shape()) +
                           " does not match the dataset canvas");
    }
    write_tensor(out, s.image);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.boxes.size()));
    for (const GroundTruthBox& b : s.boxes) {
      for (Index v : {b.x, b.y, b.width, b.height, b.class_label}) {
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
      }
    }
  }
}

Dataset read_dataset(std::istream& in) {
  io::expect_magic(in, "STDS");
  const auto version = io::read_le<std::uint32_t>(in, "dataset version");
  if (version != kDatasetFormatVersion) {
    throw FormatError("unsupported dataset format version " + std::to_string(version) + " (expected " +
                      std::to_string(kDatasetFormatVersion) + ")");
  }
  const auto count = io::read_le<std::uint64_t>(in, "sample count");
  Dataset ds;
  ds.canvas_x = io::read_le<std::uint32_t>(in, "canvas x");
  ds.canvas_y = io::read_le<std::uint32_t>(in, "canvas y");
  for (std::uint64_t i = 0; i < count; ++i) {
    Sample s;
    s.image = read_tensor(in);
    if (s.image.rank() != 2 || s.image.dim(0) != ds.canvas_x || s.image.dim(1) != ds.canvas_y) {
      throw FormatError("sample " + std::to_string(i) + " image " + shape_string(s.image.shape()) +
                        " does not match the canvas" + io::offset_suffix(in));
    }
    const auto boxes = io::read_le<std::uint32_t>(in, "box count");
    for (std::uint32_t b = 0; b < boxes; ++b) {
      GroundTruthBox box;
      box.x = io::read_le<std::uint32_t>(in, "box x");
      box.y = io::read_le<std::uint32_t>(in, "box y");
      box.width = io::read_le<std::uint32_t>(in, "box width");
      box.height = io::read_le<std::uint32_t>(in, "box height");
      box.class_label = io::read_le<std::uint32_t>(in, "box class");
      s.boxes.push_back(box);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_dataset(out, dataset);
  if (!out) throw FormatError("failed writing " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset " + path.string());
  try {
    return read_dataset(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices) {
  const Index plane = dataset.canvas_x * dataset.canvas_y;
  Tensor batch({static_cast<Index>(indices.size()), dataset.canvas_x, dataset.canvas_y});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    batch.vec().segment(static_cast<Index>(b) * plane, plane) = dataset.samples.at(indices[b]).image.vec();
  }
  return batch;
}

}  // namespace stampnet
