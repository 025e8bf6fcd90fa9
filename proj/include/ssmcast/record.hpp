#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace ssmcast::data {

using BoolGrid = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// One patient on a regular time grid. Row t holds grid step t+1 (the first
// step is index 0); masks flag cells that were originally observed rather
// than imputed.
struct PatientRecord {
  std::string patient_id;
  double grid_step_h = 1.0;
  std::vector<std::string> obs_channels;
  std::vector<std::string> int_channels;
  Eigen::MatrixXd x;  // T x O
  Eigen::MatrixXd u;  // T x I
  BoolGrid x_mask;    // T x O
  BoolGrid u_mask;    // T x I

  Eigen::Index steps() const { return x.rows(); }
  Eigen::Index obs_dim() const { return x.cols(); }
  Eigen::Index int_dim() const { return u.cols(); }

  bool fully_finite() const;
  // First t grid steps, masks included.
  PatientRecord prefix(Eigen::Index t) const;
  // Throws std::invalid_argument on inconsistent shapes.
  void validate() const;
};

}  // namespace ssmcast::data
