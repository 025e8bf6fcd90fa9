#include "ssmcast/record.hpp"

#include <cmath>
#include <stdexcept>

namespace ssmcast::data {

bool PatientRecord::fully_finite() const {
  return x.allFinite() && u.allFinite();
}

PatientRecord PatientRecord::prefix(Eigen::Index t) const {
  if (t < 0 || t > steps()) {
    throw std::invalid_argument("prefix: step count " + std::to_string(t) +
                                " outside record of length " +
                                std::to_string(steps()));
  }
  PatientRecord out;
  out.patient_id = patient_id;
  out.grid_step_h = grid_step_h;
  out.obs_channels = obs_channels;
  out.int_channels = int_channels;
  out.x = x.topRows(t);
  out.u = u.topRows(t);
  out.x_mask = x_mask.topRows(t);
  out.u_mask = u_mask.topRows(t);
  return out;
}

void PatientRecord::validate() const {
  const auto fail = [this](const std::string& what) {
    throw std::invalid_argument("record '" + patient_id + "': " + what);
  };
  if (grid_step_h <= 0.0 || !std::isfinite(grid_step_h)) {
    fail("grid step must be positive");
  }
  if (x.rows() != u.rows()) fail("x and u disagree on step count");
  if (x_mask.rows() != x.rows() || x_mask.cols() != x.cols()) {
    fail("x_mask shape does not match x");
  }
  if (u_mask.rows() != u.rows() || u_mask.cols() != u.cols()) {
    fail("u_mask shape does not match u");
  }
  if (!obs_channels.empty() &&
      static_cast<Eigen::Index>(obs_channels.size()) != x.cols()) {
    fail("obs channel names do not match x columns");
  }
  if (!int_channels.empty() &&
      static_cast<Eigen::Index>(int_channels.size()) != u.cols()) {
    fail("int channel names do not match u columns");
  }
}

}  // namespace ssmcast::data
