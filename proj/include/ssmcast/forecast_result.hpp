#pragma once

#include <Eigen/Dense>

namespace ssmcast {

// Joint forecast of both series over a horizon. Row h describes grid step
// origin + h + 1; variances are per-channel (diagonal).
struct ForecastResult {
  Eigen::Index origin = 0;  // t*, number of conditioned grid steps
  Eigen::MatrixXd obs_mean;  // H x O
  Eigen::MatrixXd obs_var;   // H x O
  Eigen::MatrixXd int_mean;  // H x I
  Eigen::MatrixXd int_var;   // H x I

  Eigen::Index horizon() const { return obs_mean.rows(); }
};

}  // namespace ssmcast
