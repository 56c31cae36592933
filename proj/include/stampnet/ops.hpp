#pragma once

#include <span>

#include "stampnet/rng.hpp"
#include "stampnet/tape.hpp"
#include "stampnet/tensor.hpp"

namespace stampnet {

enum class Padding { valid, same };
enum class Mode { train, eval };

// Differentiable operations on tape variables. All inputs must live on the
// same tape; the result is recorded on it. Spatial ops accept a batch axis
// ([B,C,H,W]) or a single sample ([C,H,W]).

Var add(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// a + c where c is a constant tensor of the same shape (e.g. sampled noise).
Var add_constant(const Var& a, const Tensor& c);
Var sum(const Var& a);
Var reshape(const Var& a, Shape shape);

/// Cross-correlation, no kernel flip. kernels: [C_out, C_in, kh, kw].
Var conv2d(const Var& input, const Var& kernels, Padding padding);
/// Adds bias[c] to every element of channel c (axis 1 when batched).
Var add_channel_bias(const Var& input, const Var& bias);
/// 2x2 window, stride 2. Extents must be even; ties go to the first
/// row-major cell of the window.
Var maxpool2d(const Var& input);
Var leaky_relu(const Var& input, double slope);

struct BatchNormOptions {
  Mode mode = Mode::train;
  double momentum = 0.9;
  double epsilon = 1e-5;
};

/// Per-channel normalization over (batch, spatial...) for input [B,C,...].
/// Train mode uses batch statistics and folds them into the running
/// estimates; eval mode uses the running estimates.
Var batchnorm(const Var& input, const Var& gamma, const Var& beta, Tensor& running_mean,
              Tensor& running_var, const BatchNormOptions& options);

/// Inverted dropout. `rngs` holds one stream per batch row (axis 0) or a
/// single stream for the whole tensor.
Var dropout(const Var& input, double rate, Mode mode, std::span<SeededRng> rngs);

/// input [B,F_in], weight [F_out,F_in], bias [F_out] -> [B,F_out].
Var dense(const Var& input, const Var& weight, const Var& bias);
/// Softmax over the last axis, max-subtracted.
Var softmax(const Var& logits);
/// Mean of squared differences, returned as a one-element tensor.
Var mse_loss(const Var& prediction, const Var& target);
/// Clamp with unit gradient inside [lo, hi] and zero outside.
Var clip_values(const Var& input, double lo, double hi);

/// out[b,i,j,k] = x[b,i] * y[b,j] * s[b,k] for x [B,nx], y [B,ny], s [B,N].
Var outer3(const Var& x, const Var& y, const Var& s);

/// Transposed placement of kernels at every grid cell, weighted by sl.
/// sl [B,nx,ny,N], bank [N,kx,ky] -> [B, nx+kx-1, ny+ky-1] with
/// out[b, i+a, j+c] = sum_k sl[b,i,j,k] * bank[k,a,c].
Var stamp_render(const Var& sl, const Var& bank);

/// stamp_render(outer3(x, y, s), bank) without forming the SL tensor: the
/// stamps are mixed by s, then spread along x by x and along y by y.
Var stamp_render_factored(const Var& x, const Var& y, const Var& s, const Var& bank);

/// In-place clamp used as a projection on parameters (no gradient).
void clamp_in_place(Tensor& t, double lo, double hi);

}  // namespace stampnet
