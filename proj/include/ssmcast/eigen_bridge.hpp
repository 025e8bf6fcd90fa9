#pragma once

#include <Eigen/Dense>
#include <vector>

#include "ssmcast/tensor.hpp"

namespace ssmcast::diffmath {

inline Tensor to_tensor(const Eigen::MatrixXd& m) {
  std::vector<double> vals(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      vals[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
    }
  }
  return Tensor::matrix(static_cast<std::size_t>(m.rows()),
                        static_cast<std::size_t>(m.cols()), std::move(vals));
}

inline Tensor to_tensor(const Eigen::VectorXd& v) {
  return Tensor::vector(std::vector<double>(v.data(), v.data() + v.size()));
}

// Rank-1 tensors come back as a column.
inline Eigen::MatrixXd to_matrix(const Tensor& t) {
  const Eigen::Index rows = static_cast<Eigen::Index>(t.rows());
  const Eigen::Index cols = t.rank() == 1 ? 1 : static_cast<Eigen::Index>(t.cols());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = t[static_cast<std::size_t>(r * cols + c)];
    }
  }
  return m;
}

inline Eigen::VectorXd to_vector(const Tensor& t) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(t.size()));
  for (std::size_t k = 0; k < t.size(); ++k) {
    v[static_cast<Eigen::Index>(k)] = t[k];
  }
  return v;
}

}  // namespace ssmcast::diffmath
