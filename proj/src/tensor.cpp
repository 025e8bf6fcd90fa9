#include "ssmcast/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ssmcast::diffmath {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const std::vector<std::size_t>& shape, std::size_t n) {
  if (shape.empty() || shape.size() > 2) {
    throw std::invalid_argument("tensor rank must be 1 or 2");
  }
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
  }
  if (shape_product(shape) != n) {
    throw std::invalid_argument("tensor value count does not match shape");
  }
}

void check_finite(const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("tensor input contains a non-finite value");
    }
  }
}

}  // namespace

Tensor::Tensor(Unchecked, std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {}

Tensor Tensor::vector(std::vector<double> values) {
  check_finite(values);
  std::vector<std::size_t> shape{values.size()};
  check_shape(shape, values.size());
  return Tensor(Unchecked{}, std::move(shape), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  check_finite(values);
  std::vector<std::size_t> shape{rows, cols};
  check_shape(shape, values.size());
  return Tensor(Unchecked{}, std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double v) { return vector({v}); }

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) {
  return Tensor(Unchecked{}, {rows, cols}, std::vector<double>(rows * cols, 0.0));
}

Tensor Tensor::zeros_vec(std::size_t n) {
  return Tensor(Unchecked{}, {n}, std::vector<double>(n, 0.0));
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor(Unchecked{}, {n, n}, std::move(v));
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

}  // namespace ssmcast::diffmath
