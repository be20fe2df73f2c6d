#include "levenberg_marquardt.hpp"

#include <algorithm>
#include <cmath>

namespace prethermal::detail {

LmResult levenberg_marquardt(const LmEvaluate& evaluate, Eigen::VectorXd p0, const LmOptions& options,
                             const LmProject& project) {
  LmResult result;
  if (project) project(p0);
  result.params = std::move(p0);
  evaluate(result.params, result.residual, &result.jacobian);
  double cost = result.residual.squaredNorm();

  double lambda = -1.0;
  Eigen::VectorXd trial_residual;
  Eigen::MatrixXd trial_jacobian;
  for (result.iterations = 1; result.iterations <= options.max_iterations; ++result.iterations) {
    const Eigen::MatrixXd& jac = result.jacobian;
    const Eigen::MatrixXd normal = jac.transpose() * jac;
    const Eigen::VectorXd gradient = jac.transpose() * result.residual;
    Eigen::VectorXd scale = normal.diagonal();
    const double floor = std::max(1e-300, 1e-12 * scale.maxCoeff());
    for (Eigen::Index i = 0; i < scale.size(); ++i) scale(i) = std::max(scale(i), floor);
    if (lambda < 0.0) lambda = 1e-3;

    Eigen::MatrixXd damped = normal;
    damped.diagonal() += lambda * scale;
    Eigen::VectorXd step = damped.ldlt().solve(-gradient);
    if (!step.allFinite()) step = damped.colPivHouseholderQr().solve(-gradient);

    Eigen::VectorXd trial = result.params + step;
    if (project) project(trial);
    const Eigen::VectorXd applied = trial - result.params;
    bool small = true;
    for (Eigen::Index i = 0; i < applied.size(); ++i) {
      if (std::abs(applied(i)) > options.relative_tolerance * (std::abs(result.params(i)) + options.relative_tolerance)) {
        small = false;
      }
    }

    evaluate(trial, trial_residual, &trial_jacobian);
    const double trial_cost = trial_residual.allFinite() ? trial_residual.squaredNorm() : HUGE_VAL;
    if (trial_cost <= cost) {
      result.params = std::move(trial);
      std::swap(result.residual, trial_residual);
      std::swap(result.jacobian, trial_jacobian);
      cost = trial_cost;
      lambda = std::max(lambda / 3.0, 1e-12);
      if (small) {
        result.converged = true;
        return result;
      }
    } else {
      lambda *= 4.0;
      if (small || lambda > 1e16) {
        result.converged = true;
        return result;
      }
    }
  }
  result.iterations = options.max_iterations;
  return result;
}

}  // namespace prethermal::detail
