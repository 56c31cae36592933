#pragma once

// Independent reference implementations used only by the tests. They share
// no code with the library beyond the Tensor container.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include <Eigen/Core>

#include "stampnet/box.hpp"
#include "stampnet/rng.hpp"
#include "stampnet/tape.hpp"
#include "stampnet/tensor.hpp"

namespace oracle {

using stampnet::Index;
using stampnet::Shape;
using stampnet::Tensor;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  stampnet::SeededRng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_integers(Shape shape, std::uint64_t seed, int lo, int hi) {
  stampnet::SeededRng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = lo + static_cast<double>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  return t;
}

// Direct cross-correlation, input [C,H,W], kernels [Co,C,kh,kw].
inline Tensor conv_direct(const Tensor& x, const Tensor& k, bool same) {
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const Index pt = same ? (kh - 1) / 2 : 0, pl = same ? (kw - 1) / 2 : 0;
  const Index ho = same ? h : h - kh + 1, wo = same ? w : w - kw + 1;
  Tensor out({co, ho, wo});
  for (Index o = 0; o < co; ++o)
    for (Index i = 0; i < ho; ++i)
      for (Index j = 0; j < wo; ++j) {
        double s = 0.0;
        for (Index ci = 0; ci < c; ++ci)
          for (Index u = 0; u < kh; ++u)
            for (Index v = 0; v < kw; ++v) {
              const Index yy = i + u - pt, xx = j + v - pl;
              if (yy >= 0 && yy < h && xx >= 0 && xx < w) s += x(ci, yy, xx) * k(o, ci, u, v);
            }
        out(o, i, j) = s;
      }
  return out;
}

inline Tensor window_max(const Tensor& x) {
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, h / 2, w / 2});
  for (Index ci = 0; ci < c; ++ci)
    for (Index i = 0; i < h / 2; ++i)
      for (Index j = 0; j < w / 2; ++j)
        out(ci, i, j) = std::max({x(ci, 2 * i, 2 * j), x(ci, 2 * i, 2 * j + 1), x(ci, 2 * i + 1, 2 * j),
                                  x(ci, 2 * i + 1, 2 * j + 1)});
  return out;
}

inline Tensor naive_matmul_bt(const Tensor& a, const Tensor& b) {
  Tensor out({a.dim(0), b.dim(0)});
  for (Index i = 0; i < a.dim(0); ++i)
    for (Index j = 0; j < b.dim(0); ++j) {
      double s = 0.0;
      for (Index k = 0; k < a.dim(1); ++k) s += a(i, k) * b(j, k);
      out(i, j) = s;
    }
  return out;
}

struct Placement {
  Index x, y, stamp;
};

// Pastes stamps additively at their top-left corners, then clamps.
inline Tensor paste_then_clip(Index cx, Index cy, const Tensor& bank, const std::vector<Placement>& placements,
                              double v_max) {
  Tensor canvas({cx, cy});
  for (const auto& p : placements)
    for (Index a = 0; a < bank.dim(1); ++a)
      for (Index b = 0; b < bank.dim(2); ++b) canvas(p.x + a, p.y + b) += bank(p.stamp, a, b);
  for (auto& v : canvas.values()) v = std::clamp(v, 0.0, v_max);
  return canvas;
}

// Best total over all injective pairings of the shorter side, by enumeration.
inline double best_matching_total(const Eigen::MatrixXd& s) {
  const bool flip = s.rows() > s.cols();
  const Eigen::MatrixXd m = flip ? Eigen::MatrixXd(s.transpose()) : s;
  std::vector<int> cols(static_cast<std::size_t>(m.cols()));
  std::iota(cols.begin(), cols.end(), 0);
  double best = 0.0;
  do {
    double t = 0.0;
    for (Index r = 0; r < m.rows(); ++r) t += m(r, cols[static_cast<std::size_t>(r)]);
    best = std::max(best, t);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

inline double box_iou(const stampnet::BoundingBox& a, const stampnet::BoundingBox& b) {
  // Counts covered pixels one by one.
  Index inter = 0, uni = 0;
  const Index x0 = std::min(a.x, b.x), x1 = std::max(a.x + a.width, b.x + b.width);
  const Index y0 = std::min(a.y, b.y), y1 = std::max(a.y + a.height, b.y + b.height);
  for (Index x = x0; x < x1; ++x)
    for (Index y = y0; y < y1; ++y) {
      const bool ia = x >= a.x && x < a.x + a.width && y >= a.y && y < a.y + a.height;
      const bool ib = x >= b.x && x < b.x + b.width && y >= b.y && y < b.y + b.height;
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
// gradient is zero from dividing rounding noise by zero.
inline double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-6) {
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

using ScalarFn = std::function<stampnet::Var(stampnet::Tape&, const std::vector<stampnet::Var>&)>;

// Analytic gradients of fn at `inputs` against central differences with
// step h. Returns the worst relative error over all inputs.
inline double gradient_check(const ScalarFn& fn, const std::vector<Tensor>& inputs, double h = 1e-5) {
  stampnet::Tape tape;
  std::vector<stampnet::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  tape.backward(fn(tape, vars));

  auto eval = [&](const std::vector<Tensor>& xs) {
    stampnet::Tape t;
    std::vector<stampnet::Var> vs;
    for (const auto& x : xs) vs.push_back(t.constant(x));
    return fn(t, vs).value()[0];
  };
  double worst = 0.0;
  std::vector<Tensor> xs = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor numeric(inputs[i].shape());
    for (Index e = 0; e < inputs[i].size(); ++e) {
      const double orig = xs[i][e];
      xs[i][e] = orig + h;
      const double up = eval(xs);
      xs[i][e] = orig - h;
      const double down = eval(xs);
      xs[i][e] = orig;
      numeric[e] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, max_relative_error(vars[i].grad(), numeric));
  }
  return worst;
}

}  // namespace oracle
