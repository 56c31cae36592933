#pragma once

#include <filesystem>

#include "stampnet/tensor.hpp"

namespace stampnet::cli {

/// Binary PGM (P5, maxval 255). The tensor is [width, height] indexed (x, y);
/// values in [0, scale] map linearly onto 0..255 with rounding and clamping.
void write_pgm(const std::filesystem::path& path, const Tensor& image, double scale = 1.0);
/// Returns the raw grey levels 0..255 as a [width, height] tensor.
Tensor read_pgm(const std::filesystem::path& path);

/// Tiles the [N, kx, ky] bank five stamps per row with one-pixel separators
/// (value `separator`). Result: [min(N,5)*(kx+1)-1, ceil(N/5)*(ky+1)-1].
Tensor stamp_grid(const Tensor& bank, double separator);

/// Outlines the box border in place; pixels outside the image are skipped.
void draw_box(Tensor& image, Index x, Index y, Index width, Index height, double value);

}  // namespace stampnet::cli
