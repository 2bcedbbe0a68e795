#pragma once

#include <span>
#include <string>

#include "selmask/model.hpp"

namespace selmask {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  double tolerance = 0.0;

  bool passed() const { return max_relative_error <= tolerance; }
  /// One-line summary naming the worst parameter entry.
  std::string describe() const;
};

/// Relative error between an analytic and a numeric derivative:
/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from reporting finite-difference noise as relative error.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares backprop gradients of the summed loss over `batches` against
/// central finite differences on every scalar parameter. Dropout is off.
GradCheckResult grad_check(const Parameters& params, std::span<const Batch> batches, double tolerance,
                           double step = 1e-5);

}  // namespace selmask
