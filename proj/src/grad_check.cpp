#include "selmask/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace selmask {

namespace {

double total_loss(const Parameters& params, std::span<const Batch> batches, Parameters* grads) {
  double loss = 0.0;
  for (const auto& b : batches) loss += loss_and_gradient(params, b, {}, grads);
  return loss;
}

}  // namespace

std::string GradCheckResult::describe() const {
  std::ostringstream os;
  os << (passed() ? "ok" : "FAILED") << ": max relative error " << max_relative_error << " (tolerance " << tolerance
     << ") at " << worst_parameter << "[" << worst_index << "] analytic " << analytic << " numeric " << numeric
     << " over " << checked << " entries";
  return os.str();
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckResult grad_check(const Parameters& params, std::span<const Batch> batches, double tolerance, double step) {
  Parameters grads = params.zeros_like();
  total_loss(params, batches, &grads);

  GradCheckResult result;
  result.tolerance = tolerance;
  Parameters probe = params;
  auto probe_tensors = probe.tensors();
  auto grad_tensors = grads.tensors();
  for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
    Matrix& tensor = *probe_tensors[t].tensor;
    for (Eigen::Index i = 0; i < tensor.size(); ++i) {
      double& x = tensor.data()[i];
      const double saved = x;
      x = saved + step;
      const double up = total_loss(probe, batches, nullptr);
      x = saved - step;
      const double down = total_loss(probe, batches, nullptr);
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = grad_tensors[t].tensor->data()[i];
      const double err = relative_error(analytic, numeric);
      ++result.checked;
      if (err > result.max_relative_error || result.worst_parameter.empty()) {
        result.max_relative_error = err;
        result.worst_parameter = probe_tensors[t].name;
        result.worst_index = static_cast<std::size_t>(i);
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace selmask
