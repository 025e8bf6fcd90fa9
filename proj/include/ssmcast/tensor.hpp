#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ssmcast::diffmath {

// Dense row-major tensor of 64-bit floats. Rank 1 (vector) or 2 (matrix);
// scalars are rank-1 tensors of length 1. Values supplied from outside the
// library are rejected if non-finite; values produced by tape computation are
// checked by the tape itself so the offending primitive can be named.
class Tensor {
 public:
  Tensor() = default;

  // Checked constructors for user-supplied data.
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor zeros_vec(std::size_t n);
  static Tensor identity(std::size_t n);

  // Unchecked construction for engine internals.
  struct Unchecked {};
  Tensor(Unchecked, std::vector<std::size_t> shape, std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() > 1 ? shape_[1] : 1; }
  bool is_scalar() const { return values_.size() == 1 && rank() == 1; }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }

  std::span<const double> data() const { return values_; }
  std::span<double> data() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  std::string shape_str() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

}  // namespace ssmcast::diffmath
