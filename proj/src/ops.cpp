#include "stampnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

namespace stampnet {
namespace {

using RowMatrix = Tensor::RowMajorMatrix;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw UsageError("operands recorded on different tapes");
}

struct ConvGeometry {
  bool batched = false;
  Index batch = 1, cin = 0, h = 0, w = 0;
  Index cout = 0, kh = 0, kw = 0;
  Index ho = 0, wo = 0, pad_top = 0, pad_left = 0;

  Index patch() const { return cin * kh * kw; }
  Index out_plane() const { return ho * wo; }
  Index in_sample() const { return cin * h * w; }
  Index out_sample() const { return cout * ho * wo; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, Padding padding) {
  ConvGeometry g;
  if (input.rank() == 4) {
    g.batched = true;
    g.batch = input.dim(0);
  } else if (input.rank() != 3) {
    throw DimensionError("conv2d: input must be [C,H,W] or [B,C,H,W], got " + shape_string(input.shape()));
  }
  const Index off = g.batched ? 1 : 0;
  g.cin = input.dim(off);
  g.h = input.dim(off + 1);
  g.w = input.dim(off + 2);
  if (kernels.rank() != 4) throw DimensionError("conv2d: kernels must be [C_out,C_in,kh,kw]");
  g.cout = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  if (kernels.dim(1) != g.cin) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernels.dim(1)) +
                         " input channels, input has " + std::to_string(g.cin));
  }
  if (padding == Padding::same) {
    g.pad_top = (g.kh - 1) / 2;
    g.pad_left = (g.kw - 1) / 2;
    g.ho = g.h;
    g.wo = g.w;
  } else {
    g.ho = g.h - g.kh + 1;
    g.wo = g.w - g.kw + 1;
  }
  if (g.ho <= 0 || g.wo <= 0) {
    throw DimensionError("conv2d: kernel " + shape_string(kernels.shape()) + " larger than input " +
                         shape_string(input.shape()));
  }
  return g;
}

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* cols) {
  const Index plane = g.out_plane();
  for (Index c = 0; c < g.cin; ++c) {
    for (Index u = 0; u < g.kh; ++u) {
      for (Index v = 0; v < g.kw; ++v) {
        Scalar* dst = cols + ((c * g.kh + u) * g.kw + v) * plane;
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy + u - g.pad_top;
          Scalar* row = dst + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(row, row + g.wo, Scalar(0));
            continue;
          }
          const Scalar* src = x + (c * g.h + iy) * g.w;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox + v - g.pad_left;
            row[ox] = (ix >= 0 && ix < g.w) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* x) {
  const Index plane = g.out_plane();
  for (Index c = 0; c < g.cin; ++c) {
    for (Index u = 0; u < g.kh; ++u) {
      for (Index v = 0; v < g.kw; ++v) {
        const Scalar* src = cols + ((c * g.kh + u) * g.kw + v) * plane;
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy + u - g.pad_top;
          if (iy < 0 || iy >= g.h) continue;
          Scalar* dst = x + (c * g.h + iy) * g.w;
          const Scalar* row = src + oy * g.wo;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox + v - g.pad_left;
            if (ix >= 0 && ix < g.w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.vec() += b.value().vec();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (tape.needs_grad(a)) tape.grad_buffer(a).vec() += g.vec();
    if (tape.needs_grad(b)) tape.grad_buffer(b).vec() += g.vec();
  }, "add");
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  out.vec() *= factor;
  return a.tape().record(std::move(out), {a}, [a, factor](Tape& tape, const Tensor& g) {
    tape.grad_buffer(a).vec() += factor * g.vec();
  }, "scale");
}

Var add_constant(const Var& a, const Tensor& c) {
  require_same_shape(a.value(), c, "add_constant");
  Tensor out = a.value();
  out.vec() += c.vec();
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Tensor& g) {
    tape.grad_buffer(a).vec() += g.vec();
  }, "add_constant");
}

Var sum(const Var& a) {
  Tensor out(Shape{1}, a.value().sum());
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Tensor& g) {
    tape.grad_buffer(a).vec().array() += g[0];
  }, "sum");
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Tensor& g) {
    tape.grad_buffer(a).vec() += g.vec();
  }, "reshape");
}

Var conv2d(const Var& input, const Var& kernels, Padding padding) {
  require_same_tape(input, kernels);
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  const ConvGeometry g = conv_geometry(x, k, padding);

  Shape out_shape = g.batched ? Shape{g.batch, g.cout, g.ho, g.wo} : Shape{g.cout, g.ho, g.wo};
  Tensor out(out_shape);
  RowMatrix cols(g.patch(), g.out_plane());
  const ConstMatMap kmat(k.data(), g.cout, g.patch());
  for (Index b = 0; b < g.batch; ++b) {
    im2col(x.data() + b * g.in_sample(), g, cols.data());
    MatMap(out.data() + b * g.out_sample(), g.cout, g.out_plane()).noalias() = kmat * cols;
  }

  return input.tape().record(std::move(out), {input, kernels},
                             [input, kernels, g](Tape& tape, const Tensor& grad) {
    const Tensor& xv = input.value();
    const Tensor& kv = kernels.value();
    const ConstMatMap km(kv.data(), g.cout, g.patch());
    const bool want_x = tape.needs_grad(input);
    const bool want_k = tape.needs_grad(kernels);
    RowMatrix c(g.patch(), g.out_plane());
    RowMatrix dk = RowMatrix::Zero(g.cout, g.patch());
    for (Index b = 0; b < g.batch; ++b) {
      const ConstMatMap gout(grad.data() + b * g.out_sample(), g.cout, g.out_plane());
      if (want_k) {
        im2col(xv.data() + b * g.in_sample(), g, c.data());
        dk.noalias() += gout * c.transpose();
      }
      if (want_x) {
        c.noalias() = km.transpose() * gout;
        col2im_add(c.data(), g, tape.grad_buffer(input).data() + b * g.in_sample());
      }
    }
    if (want_k) {
      MatMap(tape.grad_buffer(kernels).data(), g.cout, g.patch()) += dk;
    }
  }, "conv2d");
}

Var add_channel_bias(const Var& input, const Var& bias) {
  require_same_tape(input, bias);
  const Tensor& x = input.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1) throw DimensionError("add_channel_bias: bias must be rank 1");
  const Index caxis = x.rank() == 3 ? 0 : 1;
  if (x.rank() < 2 || x.dim(caxis) != bv.dim(0)) {
    throw DimensionError("add_channel_bias: " + shape_string(x.shape()) + " vs bias " +
                         shape_string(bv.shape()));
  }
  const Index channels = bv.dim(0);
  const Index outer = caxis == 1 ? x.dim(0) : 1;
  const Index inner = x.size() / (outer * channels);
  Tensor out = x;
  for (Index o = 0; o < outer; ++o) {
    for (Index c = 0; c < channels; ++c) {
      out.vec().segment((o * channels + c) * inner, inner).array() += bv[c];
    }
  }
  return input.tape().record(std::move(out), {input, bias},
                             [input, bias, outer, channels, inner](Tape& tape, const Tensor& g) {
    if (tape.needs_grad(input)) tape.grad_buffer(input).vec() += g.vec();
    if (tape.needs_grad(bias)) {
      Tensor& gb = tape.grad_buffer(bias);
      for (Index o = 0; o < outer; ++o) {
        for (Index c = 0; c < channels; ++c) gb[c] += g.vec().segment((o * channels + c) * inner, inner).sum();
      }
    }
  }, "add_channel_bias");
}

Var maxpool2d(const Var& input) {
  const Tensor& x = input.value();
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("maxpool2d: input must be [C,H,W] or [B,C,H,W], got " + shape_string(x.shape()));
  }
  const Index h = x.dim(x.rank() - 2);
  const Index w = x.dim(x.rank() - 1);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("maxpool2d: spatial extents must be even, got " + shape_string(x.shape()));
  }
  const Index planes = x.size() / (h * w);
  const Index ho = h / 2, wo = w / 2;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = ho;
  out_shape[out_shape.size() - 1] = wo;
  Tensor out(out_shape);
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  for (Index p = 0; p < planes; ++p) {
    const double* src = x.data() + p * h * w;
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) {
        Index best = (2 * oy) * w + 2 * ox;
        const Index cand[3] = {best + 1, best + w, best + w + 1};
        for (Index c : cand) {
          if (src[c] > src[best]) best = c;
        }
        const Index o = p * ho * wo + oy * wo + ox;
        out[o] = src[best];
        (*argmax)[static_cast<std::size_t>(o)] = p * h * w + best;
      }
    }
  }
  return input.tape().record(std::move(out), {input}, [input, argmax](Tape& tape, const Tensor& g) {
    Tensor& gx = tape.grad_buffer(input);
    for (Index o = 0; o < g.size(); ++o) gx[(*argmax)[static_cast<std::size_t>(o)]] += g[o];
  }, "maxpool2d");
}

Var leaky_relu(const Var& input, double slope) {
  Tensor out = input.value();
  out.vec() = out.vec().unaryExpr([slope](double v) { return v >= 0.0 ? v : slope * v; });
  return input.tape().record(std::move(out), {input}, [input, slope](Tape& tape, const Tensor& g) {
    const Tensor& x = input.value();
    Tensor& gx = tape.grad_buffer(input);
    for (Index i = 0; i < g.size(); ++i) gx[i] += x[i] >= 0.0 ? g[i] : slope * g[i];
  }, "leaky_relu");
}

Var batchnorm(const Var& input, const Var& gamma, const Var& beta, Tensor& running_mean,
              Tensor& running_var, const BatchNormOptions& options) {
  require_same_tape(input, gamma);
  require_same_tape(input, beta);
  const Tensor& x = input.value();
  if (x.rank() < 2) throw DimensionError("batchnorm: input must be [B,C,...]");
  const Index batch = x.dim(0);
  const Index channels = x.dim(1);
  const Index inner = x.size() / (batch * channels);
  for (const Tensor* t : {&gamma.value(), &beta.value(), static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)}) {
    if (t->rank() != 1 || t->dim(0) != channels) {
      throw DimensionError("batchnorm: per-channel tensor " + shape_string(t->shape()) +
                           " does not match " + std::to_string(channels) + " channels");
    }
  }
  const bool train = options.mode == Mode::train;
  if (train && batch < 2) throw ConfigError("batchnorm: train mode requires a batch of at least 2");

  const double n = static_cast<double>(batch * inner);
  Eigen::VectorXd mean(channels), inv_std(channels);
  for (Index c = 0; c < channels; ++c) {
    if (train) {
      double s = 0.0;
      for (Index b = 0; b < batch; ++b) s += x.vec().segment((b * channels + c) * inner, inner).sum();
      const double mu = s / n;
      double ss = 0.0;
      for (Index b = 0; b < batch; ++b) {
        ss += (x.vec().segment((b * channels + c) * inner, inner).array() - mu).square().sum();
      }
      const double var = ss / n;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + options.epsilon);
      running_mean[c] = options.momentum * running_mean[c] + (1.0 - options.momentum) * mu;
      running_var[c] = options.momentum * running_var[c] + (1.0 - options.momentum) * (ss / (n - 1.0));
    } else {
      mean[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + options.epsilon);
    }
  }

  auto xhat = std::make_shared<Tensor>(x.shape());
  Tensor out(x.shape());
  const Tensor& gm = gamma.value();
  const Tensor& bt = beta.value();
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (b * channels + c) * inner;
      auto xh = xhat->vec().segment(off, inner);
      xh = (x.vec().segment(off, inner).array() - mean[c]) * inv_std[c];
      out.vec().segment(off, inner) = (xh.array() * gm[c] + bt[c]).matrix();
    }
  }

  return input.tape().record(std::move(out), {input, gamma, beta},
                             [input, gamma, beta, xhat, inv_std, train, batch, channels, inner,
                              n](Tape& tape, const Tensor& g) {
    const Tensor& gm = gamma.value();
    Eigen::VectorXd dgamma = Eigen::VectorXd::Zero(channels);
    Eigen::VectorXd dbeta = Eigen::VectorXd::Zero(channels);
    for (Index b = 0; b < batch; ++b) {
      for (Index c = 0; c < channels; ++c) {
        const Index off = (b * channels + c) * inner;
        dbeta[c] += g.vec().segment(off, inner).sum();
        dgamma[c] += g.vec().segment(off, inner).dot(xhat->vec().segment(off, inner));
      }
    }
    if (tape.needs_grad(gamma)) tape.grad_buffer(gamma).vec() += dgamma;
    if (tape.needs_grad(beta)) tape.grad_buffer(beta).vec() += dbeta;
    if (!tape.needs_grad(input)) return;
    Tensor& gx = tape.grad_buffer(input);
    for (Index b = 0; b < batch; ++b) {
      for (Index c = 0; c < channels; ++c) {
        const Index off = (b * channels + c) * inner;
        auto dy = g.vec().segment(off, inner).array();
        if (train) {
          // dgamma and dbeta are exactly sum(dy*xhat) and sum(dy) per channel.
          gx.vec().segment(off, inner).array() +=
              gm[c] * inv_std[c] / n *
              (n * dy - dbeta[c] - xhat->vec().segment(off, inner).array() * dgamma[c]);
        } else {
          gx.vec().segment(off, inner).array() += gm[c] * inv_std[c] * dy;
        }
      }
    }
  }, "batchnorm");
}

Var dropout(const Var& input, double rate, Mode mode, std::span<SeededRng> rngs) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return input;
  const Tensor& x = input.value();
  const Index rows = rngs.size() == 1 ? 1 : x.dim(0);
  if (rngs.size() != 1 && static_cast<Index>(rngs.size()) != x.dim(0)) {
    throw DimensionError("dropout: need one rng per batch row or a single rng");
  }
  const Index per_row = x.size() / rows;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<Tensor>(x.shape());
  for (Index r = 0; r < rows; ++r) {
    SeededRng& rng = rngs[static_cast<std::size_t>(r)];
    for (Index i = 0; i < per_row; ++i) {
      (*mask)[r * per_row + i] = rng.uniform(0.0, 1.0) < rate ? 0.0 : keep_scale;
    }
  }
  Tensor out(x.shape());
  out.vec() = x.vec().cwiseProduct(mask->vec());
  return input.tape().record(std::move(out), {input}, [input, mask](Tape& tape, const Tensor& g) {
    tape.grad_buffer(input).vec() += g.vec().cwiseProduct(mask->vec());
  }, "dropout");
}

Var dense(const Var& input, const Var& weight, const Var& bias) {
  require_same_tape(input, weight);
  require_same_tape(input, bias);
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& bv = bias.value();
  if (x.rank() != 2 || w.rank() != 2 || bv.rank() != 1 || w.dim(1) != x.dim(1) || bv.dim(0) != w.dim(0)) {
    throw DimensionError("dense: input " + shape_string(x.shape()) + ", weight " + shape_string(w.shape()) +
                         ", bias " + shape_string(bv.shape()));
  }
  const Index batch = x.dim(0), fin = x.dim(1), fout = w.dim(0);
  Tensor out(Shape{batch, fout});
  auto y = out.matrix(batch, fout);
  y.noalias() = x.matrix(batch, fin) * w.matrix(fout, fin).transpose();
  y.rowwise() += bv.vec().transpose();
  return input.tape().record(std::move(out), {input, weight, bias},
                             [input, weight, bias, batch, fin, fout](Tape& tape, const Tensor& g) {
    const auto gy = g.matrix(batch, fout);
    if (tape.needs_grad(input)) {
      tape.grad_buffer(input).matrix(batch, fin).noalias() += gy * weight.value().matrix(fout, fin);
    }
    if (tape.needs_grad(weight)) {
      tape.grad_buffer(weight).matrix(fout, fin).noalias() += gy.transpose() * input.value().matrix(batch, fin);
    }
    if (tape.needs_grad(bias)) tape.grad_buffer(bias).vec() += gy.colwise().sum().transpose();
  }, "dense");
}

Var softmax(const Var& logits) {
  const Tensor& x = logits.value();
  const Index k = x.dim(x.rank() - 1);
  const Index rows = x.size() / k;
  Tensor out(x.shape());
  auto in = x.matrix(rows, k);
  auto y = out.matrix(rows, k);
  for (Index r = 0; r < rows; ++r) {
    const double m = in.row(r).maxCoeff();
    y.row(r) = (in.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  auto saved = std::make_shared<Tensor>(out);
  return logits.tape().record(std::move(out), {logits}, [logits, saved, rows, k](Tape& tape, const Tensor& g) {
    const auto yv = saved->matrix(rows, k);
    const auto gv = g.matrix(rows, k);
    auto gx = tape.grad_buffer(logits).matrix(rows, k);
    for (Index r = 0; r < rows; ++r) {
      const double dot = gv.row(r).dot(yv.row(r));
      gx.row(r).array() += yv.row(r).array() * (gv.row(r).array() - dot);
    }
  }, "softmax");
}

Var mse_loss(const Var& prediction, const Var& target) {
  require_same_tape(prediction, target);
  require_same_shape(prediction.value(), target.value(), "mse_loss");
  const double n = static_cast<double>(prediction.value().size());
  auto diff = std::make_shared<Tensor>(prediction.value());
  diff->vec() -= target.value().vec();
  Tensor out(Shape{1}, diff->vec().squaredNorm() / n);
  return prediction.tape().record(std::move(out), {prediction, target},
                                  [prediction, target, diff, n](Tape& tape, const Tensor& g) {
    const double s = 2.0 * g[0] / n;
    if (tape.needs_grad(prediction)) tape.grad_buffer(prediction).vec() += s * diff->vec();
    if (tape.needs_grad(target)) tape.grad_buffer(target).vec() -= s * diff->vec();
  }, "mse_loss");
}

Var clip_values(const Var& input, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clip_values: lo must not exceed hi");
  Tensor out = input.value();
  clamp_in_place(out, lo, hi);
  return input.tape().record(std::move(out), {input}, [input, lo, hi](Tape& tape, const Tensor& g) {
    const Tensor& x = input.value();
    Tensor& gx = tape.grad_buffer(input);
    for (Index i = 0; i < g.size(); ++i) {
      if (x[i] >= lo && x[i] <= hi) gx[i] += g[i];
    }
  }, "clip_values");
}

Var outer3(const Var& x, const Var& y, const Var& s) {
  require_same_tape(x, y);
  require_same_tape(x, s);
  const Tensor& xv = x.value();
  const Tensor& yv = y.value();
  const Tensor& sv = s.value();
  if (xv.rank() != 2 || yv.rank() != 2 || sv.rank() != 2 || xv.dim(0) != yv.dim(0) || xv.dim(0) != sv.dim(0)) {
    throw DimensionError("outer3: operands must be [B,n] with a shared batch extent");
  }
  const Index batch = xv.dim(0), nx = xv.dim(1), ny = yv.dim(1), nk = sv.dim(1);
  Tensor out(Shape{batch, nx, ny, nk});
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < nx; ++i) {
      for (Index j = 0; j < ny; ++j) {
        const double xy = xv(b, i) * yv(b, j);
        double* dst = out.data() + ((b * nx + i) * ny + j) * nk;
        for (Index k = 0; k < nk; ++k) dst[k] = xy * sv(b, k);
      }
    }
  }
  return x.tape().record(std::move(out), {x, y, s}, [x, y, s, batch, nx, ny, nk](Tape& tape, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    const Tensor& sv = s.value();
    const bool gx = tape.needs_grad(x), gy = tape.needs_grad(y), gs = tape.needs_grad(s);
    for (Index b = 0; b < batch; ++b) {
      // g_b viewed as [nx*ny, nk]; contract against s first.
      const ConstMatMap gb(g.data() + b * nx * ny * nk, nx * ny, nk);
      const Eigen::VectorXd svec = sv.matrix(batch, nk).row(b).transpose();
      const Eigen::VectorXd gsum = gb * svec;  // [nx*ny], index i*ny + j
      const Eigen::Map<const RowMatrix> gij(gsum.data(), nx, ny);
      const Eigen::VectorXd xvec = xv.matrix(batch, nx).row(b).transpose();
      const Eigen::VectorXd yvec = yv.matrix(batch, ny).row(b).transpose();
      if (gx) tape.grad_buffer(x).matrix(batch, nx).row(b) += (gij * yvec).transpose();
      if (gy) tape.grad_buffer(y).matrix(batch, ny).row(b) += (gij.transpose() * xvec).transpose();
      if (gs) {
        Eigen::VectorXd xy(nx * ny);
        for (Index i = 0; i < nx; ++i) xy.segment(i * ny, ny) = xvec[i] * yvec;
        tape.grad_buffer(s).matrix(batch, nk).row(b) += (gb.transpose() * xy).transpose();
      }
    }
  }, "outer3");
}

Var stamp_render(const Var& sl, const Var& bank) {
  require_same_tape(sl, bank);
  const Tensor& sv = sl.value();
  const Tensor& kv = bank.value();
  if (sv.rank() != 4 || kv.rank() != 3 || sv.dim(3) != kv.dim(0)) {
    throw DimensionError("stamp_render: sl " + shape_string(sv.shape()) + " incompatible with bank " +
                         shape_string(kv.shape()));
  }
  const Index batch = sv.dim(0), nx = sv.dim(1), ny = sv.dim(2), nk = sv.dim(3);
  const Index kx = kv.dim(1), ky = kv.dim(2);
  const Index ox = nx + kx - 1, oy = ny + ky - 1;
  Tensor out(Shape{batch, ox, oy});
  const ConstMatMap bmat(kv.data(), nk, kx * ky);
  RowMatrix patches(nx * ny, kx * ky);
  for (Index b = 0; b < batch; ++b) {
    const ConstMatMap smat(sv.data() + b * nx * ny * nk, nx * ny, nk);
    patches.noalias() = smat * bmat;
    double* canvas = out.data() + b * ox * oy;
    for (Index i = 0; i < nx; ++i) {
      for (Index j = 0; j < ny; ++j) {
        const double* p = patches.data() + (i * ny + j) * kx * ky;
        for (Index a = 0; a < kx; ++a) {
          double* row = canvas + (i + a) * oy + j;
          for (Index c = 0; c < ky; ++c) row[c] += p[a * ky + c];
        }
      }
    }
  }
  return sl.tape().record(std::move(out), {sl, bank},
                          [sl, bank, batch, nx, ny, nk, kx, ky, ox, oy](Tape& tape, const Tensor& g) {
    const bool want_sl = tape.needs_grad(sl), want_bank = tape.needs_grad(bank);
    const ConstMatMap bmat(bank.value().data(), nk, kx * ky);
    RowMatrix gathered(nx * ny, kx * ky);
    RowMatrix dbank = RowMatrix::Zero(nk, kx * ky);
    for (Index b = 0; b < batch; ++b) {
      const double* canvas = g.data() + b * ox * oy;
      for (Index i = 0; i < nx; ++i) {
        for (Index j = 0; j < ny; ++j) {
          double* p = gathered.data() + (i * ny + j) * kx * ky;
          for (Index a = 0; a < kx; ++a) {
            const double* row = canvas + (i + a) * oy + j;
            for (Index c = 0; c < ky; ++c) p[a * ky + c] = row[c];
          }
        }
      }
      if (want_sl) {
        MatMap(tape.grad_buffer(sl).data() + b * nx * ny * nk, nx * ny, nk).noalias() +=
            gathered * bmat.transpose();
      }
      if (want_bank) {
        const ConstMatMap smat(sl.value().data() + b * nx * ny * nk, nx * ny, nk);
        dbank.noalias() += smat.transpose() * gathered;
      }
    }
    if (want_bank) MatMap(tape.grad_buffer(bank).data(), nk, kx * ky) += dbank;
  }, "stamp_render");
}

Var stamp_render_factored(const Var& x, const Var& y, const Var& s, const Var& bank) {
  require_same_tape(x, y);
  require_same_tape(x, s);
  require_same_tape(x, bank);
  const Tensor& xv = x.value();
  const Tensor& yv = y.value();
  const Tensor& sv = s.value();
  const Tensor& kv = bank.value();
  if (xv.rank() != 2 || yv.rank() != 2 || sv.rank() != 2 || kv.rank() != 3 || xv.dim(0) != yv.dim(0) ||
      xv.dim(0) != sv.dim(0) || sv.dim(1) != kv.dim(0)) {
    throw DimensionError("stamp_render_factored: x " + shape_string(xv.shape()) + ", y " +
                         shape_string(yv.shape()) + ", s " + shape_string(sv.shape()) + ", bank " +
                         shape_string(kv.shape()));
  }
  const Index batch = xv.dim(0), nx = xv.dim(1), ny = yv.dim(1), nk = sv.dim(1);
  const Index kx = kv.dim(1), ky = kv.dim(2);
  const Index ox = nx + kx - 1, oy = ny + ky - 1;
  const ConstMatMap bmat(kv.data(), nk, kx * ky);

  // Per sample: mixed stamp w = s . bank, rows spread along x, then along y.
  auto mixed = std::make_shared<RowMatrix>(batch, kx * ky);
  mixed->noalias() = sv.matrix(batch, nk) * bmat;
  auto spread = std::make_shared<RowMatrix>(batch, ox * ky);
  spread->setZero();
  Tensor out(Shape{batch, ox, oy});
  for (Index b = 0; b < batch; ++b) {
    const ConstMatMap w(mixed->data() + b * kx * ky, kx, ky);
    MatMap t(spread->data() + b * ox * ky, ox, ky);
    for (Index i = 0; i < nx; ++i) t.middleRows(i, kx) += xv(b, i) * w;
    MatMap canvas(out.data() + b * ox * oy, ox, oy);
    for (Index j = 0; j < ny; ++j) canvas.middleCols(j, ky) += yv(b, j) * t;
  }

  return x.tape().record(std::move(out), {x, y, s, bank},
                         [x, y, s, bank, mixed, spread, batch, nx, ny, nk, kx, ky, ox,
                          oy](Tape& tape, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    const bool want_x = tape.needs_grad(x), want_y = tape.needs_grad(y);
    const bool want_s = tape.needs_grad(s), want_bank = tape.needs_grad(bank);
    RowMatrix dmixed(batch, kx * ky);
    RowMatrix dt(ox, ky);
    for (Index b = 0; b < batch; ++b) {
      const ConstMatMap gc(g.data() + b * ox * oy, ox, oy);
      const ConstMatMap t(spread->data() + b * ox * ky, ox, ky);
      const ConstMatMap w(mixed->data() + b * kx * ky, kx, ky);
      dt.setZero();
      for (Index j = 0; j < ny; ++j) {
        const auto block = gc.middleCols(j, ky);
        dt.noalias() += yv(b, j) * block;
        if (want_y) tape.grad_buffer(y)(b, j) += block.cwiseProduct(t).sum();
      }
      MatMap dw(dmixed.data() + b * kx * ky, kx, ky);
      dw.setZero();
      for (Index i = 0; i < nx; ++i) {
        const auto block = dt.middleRows(i, kx);
        dw.noalias() += xv(b, i) * block;
        if (want_x) tape.grad_buffer(x)(b, i) += block.cwiseProduct(w).sum();
      }
    }
    if (want_s) {
      tape.grad_buffer(s).matrix(batch, nk).noalias() +=
          dmixed * ConstMatMap(bank.value().data(), nk, kx * ky).transpose();
    }
    if (want_bank) {
      MatMap(tape.grad_buffer(bank).data(), nk, kx * ky).noalias() +=
          s.value().matrix(batch, nk).transpose() * dmixed;
    }
  }, "stamp_render_factored");
}

void clamp_in_place(Tensor& t, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lo must not exceed hi");
  t.vec() = t.vec().cwiseMax(lo).cwiseMin(hi);
}

}  // namespace stampnet
