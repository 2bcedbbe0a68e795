#pragma once

#include <cstdint>

#include "selmask/model.hpp"

namespace selmask {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates plus the update count.
struct OptimizerState {
  Parameters m;
  Parameters v;
  std::uint64_t step = 0;

  bool operator==(const OptimizerState&) const = default;
};

OptimizerState make_optimizer_state(const Parameters& params);

/// One bias-corrected Adam update; increments state.step.
void adam_update(Parameters& params, const Parameters& grads, OptimizerState& state, const AdamConfig& config);

}  // namespace selmask
