#include "pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "stampnet/errors.hpp"

namespace stampnet::cli {

void write_pgm(const std::filesystem::path& path, const Tensor& image, double scale) {
  if (image.rank() != 2) throw DimensionError("write_pgm: expected a [width, height] tensor");
  const Index w = image.dim(0), h = image.dim(1);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double v = std::clamp(image(x, y) / scale, 0.0, 1.0);
      bytes[static_cast<std::size_t>(y * w + x)] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string token(std::istream& in) {
  std::string t;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!t.empty()) break;
      continue;
    }
    t.push_back(c);
  }
  return t;
}

}  // namespace

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  if (token(in) != "P5") throw FormatError(path.string() + ": not a binary PGM (P5)");
  Index w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(token(in));
    h = std::stol(token(in));
    maxval = std::stol(token(in));
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PGM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError(path.string() + ": unsupported PGM header");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  Tensor img({w, h});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) img(x, y) = bytes[static_cast<std::size_t>(y * w + x)];
  return img;
}

Tensor stamp_grid(const Tensor& bank, double separator) {
  if (bank.rank() != 3) throw DimensionError("stamp_grid: expected [N, kx, ky]");
  const Index n = bank.dim(0), kx = bank.dim(1), ky = bank.dim(2);
  const Index cols = std::min<Index>(n, 5), rows = (n + 4) / 5;
  Tensor grid({cols * (kx + 1) - 1, rows * (ky + 1) - 1}, separator);
  for (Index s = 0; s < n; ++s) {
    const Index ox = (s % 5) * (kx + 1), oy = (s / 5) * (ky + 1);
    for (Index x = 0; x < kx; ++x)
      for (Index y = 0; y < ky; ++y) grid(ox + x, oy + y) = bank(s, x, y);
  }
  // Unused cells of the last row stay at the separator value.
  return grid;
}

void draw_box(Tensor& image, Index x, Index y, Index width, Index height, double value) {
  auto put = [&](Index px, Index py) {
    if (px >= 0 && py >= 0 && px < image.dim(0) && py < image.dim(1)) image(px, py) = value;
  };
  const Index x1 = x + width - 1, y1 = y + height - 1;
  for (Index i = x; i <= x1; ++i) {
    put(i, y);
    put(i, y1);
  }
  for (Index j = y; j <= y1; ++j) {
    put(x, j);
    put(x1, j);
  }
}

}  // namespace stampnet::cli
