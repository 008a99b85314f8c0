#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace neuropipe {

struct NelderMeadOptions {
  int max_iterations = 200;
  // Stop when the objective spread across the simplex falls below this.
  double tolerance = 1e-6;
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  // Best objective value after each iteration; non-increasing.
  std::vector<double> best_trace;
};

/// Derivative-free simplex descent (reflection 1, expansion 2,
/// contraction 0.5, shrink 0.5). The initial simplex is x0 plus one
/// vertex per coordinate offset by steps[i]. The objective may return
/// +infinity to veto a point (e.g. bound constraints); x0 itself must be
/// feasible. Fully deterministic.
NelderMeadResult nelder_mead(
    const std::function<double(const Eigen::VectorXd&)>& objective,
    const Eigen::VectorXd& x0, const Eigen::VectorXd& steps,
    const NelderMeadOptions& opts = {});

} // namespace neuropipe
