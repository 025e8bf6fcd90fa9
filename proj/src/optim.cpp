#include "ssmcast/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ssmcast::diffmath {

void axpy(ParameterSet& params, const ParameterSet& grads, double alpha) {
  for (auto& [name, tensor] : params) {
    const Tensor& g = grads.at(name);
    if (!g.same_shape(tensor)) {
      throw std::invalid_argument("axpy: shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < tensor.size(); ++i) tensor[i] += alpha * g[i];
  }
}

void accumulate(ParameterSet& into, const ParameterSet& from) {
  axpy(into, from, 1.0);
}

void scale_params(ParameterSet& params, double factor) {
  for (auto& [name, tensor] : params) {
    for (std::size_t i = 0; i < tensor.size(); ++i) tensor[i] *= factor;
  }
}

double grad_max_abs(const ParameterSet& grads) {
  double worst = 0.0;
  for (const auto& [name, tensor] : grads) {
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      worst = std::max(worst, std::abs(tensor[i]));
    }
  }
  return worst;
}

void Adam::step(ParameterSet& params, const ParameterSet& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (auto& [name, tensor] : params) {
    const Tensor& g = grads.at(name);
    if (!g.same_shape(tensor)) {
      throw std::invalid_argument("Adam: shape mismatch for '" + name + "'");
    }
    Moments& mom = moments_[name];
    if (mom.m.empty()) {
      mom.m.assign(tensor.size(), 0.0);
      mom.v.assign(tensor.size(), 0.0);
    }
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g[i];
      mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      tensor[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace ssmcast::diffmath
