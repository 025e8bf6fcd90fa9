#include "ssmcast/gaussian.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ssmcast::diffmath {

namespace {

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": size mismatch (" +
                                std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}

void require_positive(std::span<const double> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0)) {
      throw std::domain_error(std::string(what) + ": variance element " +
                              std::to_string(i) + " is not positive (" +
                              std::to_string(v[i]) + ")");
    }
  }
}

}  // namespace

double gaussian_diag_logpdf(std::span<const double> x, std::span<const double> mean,
                            std::span<const double> var) {
  require_same_size(x.size(), mean.size(), "gaussian_diag_logpdf");
  require_same_size(x.size(), var.size(), "gaussian_diag_logpdf");
  require_positive(var, "gaussian_diag_logpdf");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean[i];
    acc += kLog2Pi + std::log(var[i]) + d * d / var[i];
  }
  return -0.5 * acc;
}

double gaussian_diag_logpdf(const Tensor& x, const Tensor& mean, const Tensor& var) {
  return gaussian_diag_logpdf(x.data(), mean.data(), var.data());
}

double kl_diag_gaussian(std::span<const double> m1, std::span<const double> v1,
                        std::span<const double> m2, std::span<const double> v2) {
  require_same_size(m1.size(), v1.size(), "kl_diag_gaussian");
  require_same_size(m1.size(), m2.size(), "kl_diag_gaussian");
  require_same_size(m1.size(), v2.size(), "kl_diag_gaussian");
  require_positive(v1, "kl_diag_gaussian");
  require_positive(v2, "kl_diag_gaussian");
  double acc = 0.0;
  for (std::size_t i = 0; i < m1.size(); ++i) {
    const double d = m1[i] - m2[i];
    acc += std::log(v2[i]) - std::log(v1[i]) + (v1[i] + d * d) / v2[i] - 1.0;
  }
  return 0.5 * acc;
}

double kl_diag_gaussian(const Tensor& m1, const Tensor& v1, const Tensor& m2,
                        const Tensor& v2) {
  return kl_diag_gaussian(m1.data(), v1.data(), m2.data(), v2.data());
}

std::vector<double> reparam_sample(std::span<const double> mean,
                                   std::span<const double> var,
                                   std::span<const double> noise) {
  require_same_size(mean.size(), var.size(), "reparam_sample");
  require_same_size(mean.size(), noise.size(), "reparam_sample");
  std::vector<double> out(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!(var[i] >= 0.0)) {
      throw std::domain_error("reparam_sample: variance element " +
                              std::to_string(i) + " is negative (" +
                              std::to_string(var[i]) + ")");
    }
    out[i] = mean[i] + std::sqrt(var[i]) * noise[i];
  }
  return out;
}

Tensor reparam_sample(const Tensor& mean, const Tensor& var, const Tensor& noise) {
  auto vals = reparam_sample(mean.data(), var.data(), noise.data());
  return Tensor(Tensor::Unchecked{}, mean.shape(), std::move(vals));
}

ValueId gaussian_diag_logpdf(Tape& t, ValueId x, ValueId mean, ValueId var) {
  const std::int64_t n = t.result_len(x);
  const ValueId d = t.sub(x, mean);
  const ValueId quad = t.sum(t.div_positive(t.mul(d, d), var));
  const ValueId logdet = t.sum(t.log(var));
  const ValueId norm = t.constant_scalar(static_cast<double>(n) * kLog2Pi);
  return t.scale(t.add(t.add(quad, logdet), norm), -0.5);
}

ValueId kl_diag_gaussian(Tape& t, ValueId m1, ValueId v1, ValueId m2, ValueId v2) {
  const std::int64_t n = t.result_len(m1);
  const ValueId dlog = t.sub(t.log(v2), t.log(v1));
  const ValueId d = t.sub(m1, m2);
  const ValueId ratio = t.div_positive(t.add(v1, t.mul(d, d)), v2);
  const ValueId s = t.sum(t.add(dlog, ratio));
  const ValueId shift = t.constant_scalar(-static_cast<double>(n));
  return t.scale(t.add(s, shift), 0.5);
}

ValueId reparam_sample(Tape& t, ValueId mean, ValueId var,
                       std::span<const double> noise) {
  if (static_cast<std::int64_t>(noise.size()) != t.result_len(mean)) {
    throw std::invalid_argument("reparam_sample: noise length does not match mean");
  }
  const ValueId eps = t.constant(
      Tensor(Tensor::Unchecked{}, {noise.size()},
             std::vector<double>(noise.begin(), noise.end())));
  return t.add(mean, t.mul(t.sqrt_positive(var), eps));
}

}  // namespace ssmcast::diffmath
