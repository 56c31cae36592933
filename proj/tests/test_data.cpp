#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stampnet/data.hpp"
#include "support/oracles.hpp"

using namespace stampnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stampnet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

// Synthetic IDX pair: image n has pixel (x, y) = (n * 7 + x + 28 * y) % 256.
void write_idx(const fs::path& images, const fs::path& labels, std::uint32_t count,
               std::uint32_t image_magic = 2051, std::uint32_t label_count = 0, bool truncate = false) {
  std::ofstream im(images, std::ios::binary);
  put_be32(im, image_magic);
  put_be32(im, count);
  put_be32(im, 28);
  put_be32(im, 28);
  for (std::uint32_t n = 0; n < count; ++n) {
    const std::uint32_t pixels = truncate && n + 1 == count ? 100 : 784;
    for (std::uint32_t p = 0; p < pixels; ++p) im.put(static_cast<char>((n * 7 + p) % 256));
  }
  std::ofstream lb(labels, std::ios::binary);
  put_be32(lb, 2049);
  put_be32(lb, label_count ? label_count : count);
  for (std::uint32_t n = 0; n < count; ++n) lb.put(static_cast<char>(n % 10));
}

MnistSet tiny_mnist(std::size_t count) {
  MnistSet m;
  for (std::size_t n = 0; n < count; ++n) {
    m.images.push_back(oracle::random_tensor({28, 28}, n, 0.0, 1.0));
    m.labels.push_back(static_cast<std::uint8_t>(n % 10));
  }
  return m;
}

DatasetConfig shapes_config(std::size_t samples, Index shapes = 2, Index canvas = 84) {
  DatasetConfig c;
  c.canvas_x = c.canvas_y = canvas;
  c.shapes_per_image = shapes;
  c.samples = samples;
  c.seed = 17;
  return c;
}

Index foreground(const Tensor& t) {
  Index n = 0;
  for (double v : t.values()) n += v > 0.0;
  return n;
}

void check_boxes_cover_foreground(const Dataset& ds) {
  for (const Sample& s : ds.samples) {
    for (Index x = 0; x < ds.canvas_x; ++x)
      for (Index y = 0; y < ds.canvas_y; ++y) {
        if (s.image(x, y) == 0.0) continue;
        bool inside = false;
        for (const auto& b : s.boxes) inside = inside || (x >= b.x && x < b.x + b.width && y >= b.y && y < b.y + b.height);
        CHECK(inside);
      }
    for (const auto& b : s.boxes) {
      CHECK(b.x >= 0);
      CHECK(b.y >= 0);
      CHECK(b.x + b.width <= ds.canvas_x);
      CHECK(b.y + b.height <= ds.canvas_y);
    }
  }
}

}  // namespace

TEST_SUITE("rasters") {
  TEST_CASE("plus foreground count") {
    // Two 4-pixel bars across 28 pixels overlapping in a 4x4 square.
    CHECK(foreground(raster_shape(ShapeName::plus)) == 28 * 4 + 28 * 4 - 4 * 4);
    CHECK(foreground(raster_shape(ShapeName::plus)) == 208);
  }

  TEST_CASE("equal_rot is the transpose of equal") {
    const Tensor e = raster_shape(ShapeName::equal), r = raster_shape(ShapeName::equal_rot);
    for (Index x = 0; x < 28; ++x)
      for (Index y = 0; y < 28; ++y) CHECK(e(x, y) == r(y, x));
  }

  TEST_CASE("binary, distinct, and weakly overlapping") {
    std::vector<Tensor> rs;
    for (ShapeName s : kSimpleShapes) rs.push_back(raster_shape(s));
    for (const Tensor& r : rs)
      for (double v : r.values()) CHECK((v == 0.0 || v == 1.0));
    for (std::size_t a = 0; a < rs.size(); ++a)
      for (std::size_t b = a + 1; b < rs.size(); ++b) {
        Index inter = 0, uni = 0;
        for (Index i = 0; i < rs[a].size(); ++i) {
          inter += rs[a][i] > 0 && rs[b][i] > 0;
          uni += rs[a][i] > 0 || rs[b][i] > 0;
        }
        INFO(to_string(kSimpleShapes[a]), " vs ", to_string(kSimpleShapes[b]));
        CHECK(static_cast<double>(inter) / static_cast<double>(uni) < 0.5);
      }
  }

  TEST_CASE("slash is four pixels thick") {
    const Tensor s = raster_shape(ShapeName::slash);
    for (Index x = 0; x < 28; ++x) {
      Index run = 0;
      for (Index y = 0; y < 28; ++y) run += s(x, y) > 0;
      if (x >= 2 && x <= 26) CHECK(run == 4);
      CHECK(run >= 2);
    }
  }

  TEST_CASE("names round trip and unknown names fail") {
    for (ShapeName s : kSimpleShapes) CHECK(shape_name_from_string(to_string(s)) == s);
    CHECK_THROWS_AS(shape_name_from_string("circle"), ConfigError);
    CHECK_THROWS_AS(dataset_kind_from_string("pedestrians"), ConfigError);
  }
}

TEST_SUITE("simple shapes") {
  TEST_CASE("one box per shape, values in [0,1], boxes cover the foreground") {
    for (Index m : {1, 2, 3}) {
      const Dataset ds = gen_simple_shapes(shapes_config(40, m));
      REQUIRE(ds.size() == 40);
      for (const Sample& s : ds.samples) {
        CHECK(static_cast<Index>(s.boxes.size()) == m);
        CHECK(s.image.vec().minCoeff() >= 0.0);
        CHECK(s.image.vec().maxCoeff() <= 1.0);
        for (const auto& b : s.boxes) {
          CHECK(b.width == 28);
          CHECK(b.class_label >= 0);
          CHECK(b.class_label < 5);
        }
      }
      check_boxes_cover_foreground(ds);
    }
  }

  TEST_CASE("single shape pastes the raster at its box") {
    const Dataset ds = gen_simple_shapes(shapes_config(5, 1, 56));
    for (const Sample& s : ds.samples) {
      const auto& b = s.boxes[0];
      const Tensor r = raster_shape(kSimpleShapes[static_cast<std::size_t>(b.class_label)]);
      for (Index x = 0; x < 28; ++x)
        for (Index y = 0; y < 28; ++y) CHECK(s.image(b.x + x, b.y + y) == r(x, y));
      CHECK(foreground(s.image) == foreground(r));
    }
  }

  TEST_CASE("pure function of config and seed, independent of threads") {
    const Dataset a = gen_simple_shapes(shapes_config(30), 1);
    const Dataset b = gen_simple_shapes(shapes_config(30), 3);
    CHECK(a == b);
    DatasetConfig other = shapes_config(30);
    other.seed = 18;
    CHECK_FALSE(gen_simple_shapes(other) == a);
  }

  TEST_CASE("placement is uniform over the grid") {
    // 6 positions per axis; grid mean 2.5.
    DatasetConfig c = shapes_config(100000, 1, 12);
    c.shape_size = 7;
    const Dataset ds = gen_simple_shapes(c);
    double sx = 0.0, sy = 0.0;
    std::array<int, 5> classes{};
    for (const Sample& s : ds.samples) {
      sx += static_cast<double>(s.boxes[0].x);
      sy += static_cast<double>(s.boxes[0].y);
      ++classes[static_cast<std::size_t>(s.boxes[0].class_label)];
    }
    CHECK(std::abs(sx / 100000.0 - 2.5) < 0.02 * 2.5);
    CHECK(std::abs(sy / 100000.0 - 2.5) < 0.02 * 2.5);
    for (int n : classes) CHECK(std::abs(n - 20000) < 600);
  }

  TEST_CASE("invalid configurations name the field") {
    DatasetConfig c = shapes_config(1);
    c.shape_size = 90;
    CHECK_THROWS_WITH_AS(gen_simple_shapes(c), doctest::Contains("dataset.shape_size"), ConfigError);
    c = shapes_config(1);
    c.shapes_per_image = 0;
    CHECK_THROWS_WITH_AS(gen_simple_shapes(c), doctest::Contains("dataset.shapes_per_image"), ConfigError);
    c = shapes_config(1);
    c.kind = DatasetKind::t_mnist;
    CHECK_THROWS_AS(gen_simple_shapes(c), ConfigError);
    CHECK_THROWS_AS(generate_dataset(c, nullptr), ConfigError);
  }
}

TEST_SUITE("mnist") {
  TEST_CASE("IDX loader scales bytes and transposes rows to (x, y)") {
    const fs::path dir = scratch_dir("idx");
    write_idx(dir / "img", dir / "lbl", 3);
    const MnistSet m = load_mnist_idx(dir / "img", dir / "lbl");
    REQUIRE(m.images.size() == 3);
    CHECK(m.labels == std::vector<std::uint8_t>{0, 1, 2});
    CHECK(m.images[0](0, 0) == 0.0);
    CHECK(m.images[0](3, 9) == 1.0);  // byte 255
    for (std::uint32_t n = 0; n < 3; ++n)
      for (Index y = 0; y < 28; ++y)
        for (Index x = 0; x < 28; ++x)
          CHECK(m.images[n](x, y) == static_cast<double>((n * 7 + x + 28 * y) % 256) / 255.0);
  }

  TEST_CASE("format errors carry byte offsets") {
    const fs::path dir = scratch_dir("idx_bad");
    write_idx(dir / "img", dir / "lbl", 2, 2052);
    CHECK_THROWS_WITH_AS(load_mnist_idx(dir / "img", dir / "lbl"), doctest::Contains("byte offset 0"), FormatError);
    write_idx(dir / "img", dir / "lbl", 2, 2051, 3);
    CHECK_THROWS_WITH_AS(load_mnist_idx(dir / "img", dir / "lbl"), doctest::Contains("count mismatch"), FormatError);
    write_idx(dir / "img", dir / "lbl", 2, 2051, 0, true);
    CHECK_THROWS_WITH_AS(load_mnist_idx(dir / "img", dir / "lbl"), doctest::Contains("byte offset 900"), FormatError);
    CHECK_THROWS_AS(load_mnist_idx(dir / "missing", dir / "lbl"), FormatError);
  }

  TEST_CASE("translated MNIST") {
    const MnistSet m = tiny_mnist(12);
    DatasetConfig c;
    c.kind = DatasetKind::t_mnist;
    c.shapes_per_image = 2;
    c.samples = 20;
    c.seed = 3;
    const Dataset ds = gen_translated_mnist(c, m);
    CHECK(ds.canvas_x == 84);
    for (const Sample& s : ds.samples) {
      CHECK(s.boxes.size() == 2);
      CHECK(s.image.vec().maxCoeff() <= 1.0);
    }
    check_boxes_cover_foreground(ds);
    CHECK(gen_translated_mnist(c, m, 2) == ds);
  }

  TEST_CASE("all-zero digit leaves the canvas blank") {
    MnistSet m;
    m.images.push_back(Tensor({28, 28}));
    m.labels.push_back(4);
    DatasetConfig c;
    c.kind = DatasetKind::t_mnist;
    c.shapes_per_image = 1;
    c.samples = 3;
    for (const Sample& s : gen_translated_mnist(c, m).samples) {
      CHECK(s.image.sum() == 0.0);
      CHECK(s.boxes[0].class_label == 4);
    }
  }

  TEST_CASE("cluttered MNIST keeps m boxes and stays in range") {
    const MnistSet m = tiny_mnist(12);
    DatasetConfig c;
    c.kind = DatasetKind::ct_mnist;
    c.canvas_x = c.canvas_y = 100;
    c.shapes_per_image = 1;
    c.samples = 20;
    c.seed = 9;
    const Dataset ds = gen_cluttered_translated_mnist(c, m);
    CHECK(ds.canvas_x == 100);
    for (const Sample& s : ds.samples) {
      CHECK(s.boxes.size() == 1);
      CHECK(s.image.vec().minCoeff() >= 0.0);
      CHECK(s.image.vec().maxCoeff() <= 1.0);
    }
    // Clutter adds foreground outside the digit box.
    DatasetConfig plain = c;
    plain.kind = DatasetKind::t_mnist;
    const Dataset base = gen_translated_mnist(plain, m);
    CHECK(ds.samples[0].boxes == base.samples[0].boxes);
    double extra = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) extra += ds.samples[i].image.sum() - base.samples[i].image.sum();
    CHECK(extra > 0.0);
  }

  TEST_CASE("clutter pieces must fit") {
    DatasetConfig c;
    c.kind = DatasetKind::ct_mnist;
    c.clutter_size = 30;
    c.samples = 1;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("dataset.clutter_size"), ConfigError);
  }

  TEST_CASE("real MNIST training file when available") {
    const char* dir = std::getenv("STAMPNET_MNIST_DIR");
    if (dir == nullptr) return;
    const MnistSet m = load_mnist_idx(fs::path(dir) / "train-images-idx3-ubyte", fs::path(dir) / "train-labels-idx1-ubyte");
    CHECK(m.images.size() == 60000);
    CHECK(m.images[0].shape() == Shape{28, 28});
  }
}

TEST_SUITE("dataset container") {
  TEST_CASE("round trip is bit-identical") {
    const fs::path dir = scratch_dir("container");
    const Dataset ds = gen_simple_shapes(shapes_config(7, 2, 56));
    save_dataset(ds, dir / "d.stds");
    CHECK(load_dataset(dir / "d.stds") == ds);
    CHECK(file_checksum(dir / "d.stds") == file_checksum(dir / "d.stds"));
  }

  TEST_CASE("empty dataset") {
    std::stringstream buf;
    write_dataset(buf, Dataset{56, 56, {}});
    CHECK(buf.str().size() == 4 + 4 + 8 + 4 + 4);
    const Dataset back = read_dataset(buf);
    CHECK(back.size() == 0);
    CHECK(back.canvas_x == 56);
  }

  TEST_CASE("truncation, bad version and bad magic are format errors") {
    std::stringstream buf;
    write_dataset(buf, gen_simple_shapes(shapes_config(2, 1, 56)));
    const std::string s = buf.str();
    std::stringstream cut(s.substr(0, s.size() - 10));
    CHECK_THROWS_WITH_AS(read_dataset(cut), doctest::Contains("offset"), FormatError);
    std::string v = s;
    v[4] = 7;
    std::stringstream bad_version(v);
    CHECK_THROWS_WITH_AS(read_dataset(bad_version), doctest::Contains("version"), FormatError);
    std::string mg = s;
    mg[1] = 'X';
    std::stringstream bad_magic(mg);
    CHECK_THROWS_AS(read_dataset(bad_magic), FormatError);
  }

  TEST_CASE("stack_images") {
    const Dataset ds = gen_simple_shapes(shapes_config(4, 1, 56));
    const std::vector<std::size_t> idx{2, 0};
    const Tensor b = stack_images(ds, idx);
    CHECK(b.shape() == Shape{2, 56, 56});
    CHECK(b.vec().head(56 * 56) == ds.samples[2].image.vec());
  }
}
