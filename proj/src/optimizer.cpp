#include "selmask/optimizer.hpp"

#include <cmath>

namespace selmask {

OptimizerState make_optimizer_state(const Parameters& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

void adam_update(Parameters& params, const Parameters& grads, OptimizerState& state, const AdamConfig& config) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto ga = g[i].tensor->array();
    auto ma = m[i].tensor->array();
    auto va = v[i].tensor->array();
    ma = config.beta1 * ma + (1.0 - config.beta1) * ga;
    va = config.beta2 * va + (1.0 - config.beta2) * ga.square();
    p[i].tensor->array() -= config.learning_rate * (ma / c1) / ((va / c2).sqrt() + config.eps);
  }
}

}  // namespace selmask
