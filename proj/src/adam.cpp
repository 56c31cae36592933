#include "stampnet/adam.hpp"

#include <cmath>

namespace stampnet {

AdamState AdamState::for_parameters(std::span<Parameter* const> params) {
  AdamState state;
  for (const Parameter* p : params) {
    state.m.push_back(Tensor::zeros_like(p->value));
    state.v.push_back(Tensor::zeros_like(p->value));
  }
  return state;
}

void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state does not match the parameter list");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (m.shape() != p.value.shape() || v.shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
      throw DimensionError("adam_step: moment or gradient shape differs for " + p.name);
    }
    m.vec() = config.beta1 * m.vec() + (1.0 - config.beta1) * p.grad.vec();
    v.vec() = config.beta2 * v.vec() + (1.0 - config.beta2) * p.grad.vec().cwiseAbs2();
    p.value.vec().array() -=
        config.lr * (m.vec().array() / c1) / ((v.vec().array() / c2).sqrt() + config.epsilon);
  }
}

}  // namespace stampnet
