#pragma once

#include <functional>

#include <Eigen/Dense>

namespace prethermal::detail {

struct LmOptions {
  int max_iterations = 200;
  double relative_tolerance = 1e-8;
};

struct LmResult {
  Eigen::VectorXd params;
  Eigen::VectorXd residual;
  Eigen::MatrixXd jacobian;
  int iterations = 0;
  bool converged = false;
};

/// Fills residual (model - data) and, when non-null, the Jacobian at p.
using LmEvaluate = std::function<void(const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd* j)>;
/// Maps a trial point back into the feasible set.
using LmProject = std::function<void(Eigen::VectorXd& p)>;

LmResult levenberg_marquardt(const LmEvaluate& evaluate, Eigen::VectorXd p0, const LmOptions& options,
                             const LmProject& project = {});

}  // namespace prethermal::detail
