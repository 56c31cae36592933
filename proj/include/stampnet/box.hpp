#pragma once

#include "stampnet/tensor.hpp"

namespace stampnet {

/// Axis-aligned pixel box; (x, y) is the top-left corner, x along the first
/// image axis and y along the second.
struct BoundingBox {
  Index x = 0;
  Index y = 0;
  Index width = 1;
  Index height = 1;

  Index area() const { return width * height; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

}  // namespace stampnet
