#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stampnet/tape.hpp"

namespace stampnet {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment estimates, one pair per parameter, plus the
/// number of steps taken (for bias correction).
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState for_parameters(std::span<Parameter* const> params);
};

/// One bias-corrected Adam update of every parameter from its `grad`.
void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamConfig& config);

}  // namespace stampnet
