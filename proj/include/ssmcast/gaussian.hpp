#pragma once

#include <span>
#include <vector>

#include "ssmcast/tape.hpp"
#include "ssmcast/tensor.hpp"

namespace ssmcast::diffmath {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

// Log density of a diagonal Gaussian at x. Requires var > 0 elementwise.
double gaussian_diag_logpdf(std::span<const double> x, std::span<const double> mean,
                            std::span<const double> var);
double gaussian_diag_logpdf(const Tensor& x, const Tensor& mean, const Tensor& var);

// KL(N(m1, diag v1) || N(m2, diag v2)). Requires v1, v2 > 0 elementwise.
double kl_diag_gaussian(std::span<const double> m1, std::span<const double> v1,
                        std::span<const double> m2, std::span<const double> v2);
double kl_diag_gaussian(const Tensor& m1, const Tensor& v1, const Tensor& m2,
                        const Tensor& v2);

// mean + sqrt(var) * noise. Requires var >= 0 elementwise; var == 0 collapses
// to the mean regardless of noise.
std::vector<double> reparam_sample(std::span<const double> mean,
                                   std::span<const double> var,
                                   std::span<const double> noise);
Tensor reparam_sample(const Tensor& mean, const Tensor& var, const Tensor& noise);

// Tape-recorded variants; x may be any recorded value (typically a constant),
// var must be strictly positive when evaluated.
ValueId gaussian_diag_logpdf(Tape& t, ValueId x, ValueId mean, ValueId var);
ValueId kl_diag_gaussian(Tape& t, ValueId m1, ValueId v1, ValueId m2, ValueId v2);
ValueId reparam_sample(Tape& t, ValueId mean, ValueId var,
                       std::span<const double> noise);

}  // namespace ssmcast::diffmath
