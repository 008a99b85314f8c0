#include "neuropipe/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neuropipe/errors.hpp"

namespace neuropipe {

NelderMeadResult nelder_mead(
    const std::function<double(const Eigen::VectorXd&)>& objective,
    const Eigen::VectorXd& x0, const Eigen::VectorXd& steps,
    const NelderMeadOptions& opts) {
  const int n = static_cast<int>(x0.size());
  if (n < 1)
    throw UsageError("nelder_mead requires at least one parameter");
  if (steps.size() != n)
    throw UsageError("nelder_mead steps must match the parameter count");

  std::vector<Eigen::VectorXd> xs(n + 1, x0);
  std::vector<double> fs(n + 1);
  for (int i = 1; i <= n; ++i)
    xs[i][i - 1] += steps[i - 1];
  for (int i = 0; i <= n; ++i)
    fs[i] = objective(xs[i]);
  if (!std::isfinite(fs[0]))
    throw UsageError("nelder_mead initial point is infeasible");

  // order[0] is best, order[n] worst; ties keep the lower vertex index so
  // the run is deterministic.
  std::vector<int> order(n + 1);
  std::iota(order.begin(), order.end(), 0);
  const auto sort_order = [&] {
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return fs[a] < fs[b]; });
  };
  sort_order();

  NelderMeadResult result;
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    const int best = order[0], worst = order[n];
    double spread = fs[worst] - fs[best];
    if (!(spread > opts.tolerance) && std::isfinite(fs[worst])) {
      result.converged = true;
      break;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (int i = 0; i <= n; ++i)
      if (i != worst)
        centroid += xs[i];
    centroid /= n;

    const Eigen::VectorXd reflected = centroid + (centroid - xs[worst]);
    const double fr = objective(reflected);
    if (fr < fs[best]) {
      const Eigen::VectorXd expanded = centroid + 2.0 * (centroid - xs[worst]);
      const double fe = objective(expanded);
      if (fe < fr) {
        xs[worst] = expanded;
        fs[worst] = fe;
      } else {
        xs[worst] = reflected;
        fs[worst] = fr;
      }
    } else if (fr < fs[order[n - 1]]) {
      xs[worst] = reflected;
      fs[worst] = fr;
    } else {
      const bool outside = fr < fs[worst];
      Eigen::VectorXd contracted;
      if (outside)
        contracted = centroid + 0.5 * (reflected - centroid);
      else
        contracted = centroid - 0.5 * (centroid - xs[worst]);
      const double fc = objective(contracted);
      if (fc < (outside ? fr : fs[worst])) {
        xs[worst] = contracted;
        fs[worst] = fc;
      } else {
        for (int i = 0; i <= n; ++i) {
          if (i == best)
            continue;
          xs[i] = xs[best] + 0.5 * (xs[i] - xs[best]);
          fs[i] = objective(xs[i]);
        }
      }
    }
    sort_order();
    result.best_trace.push_back(fs[order[0]]);
  }

  result.x = xs[order[0]];
  result.value = fs[order[0]];
  result.iterations = it;
  return result;
}

} // namespace neuropipe
