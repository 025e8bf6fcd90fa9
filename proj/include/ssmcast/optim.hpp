#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "ssmcast/autodiff.hpp"

namespace ssmcast::diffmath {

// params += alpha * grads, matched by name.
void axpy(ParameterSet& params, const ParameterSet& grads, double alpha);

// Element-wise accumulate: into += from (same names and shapes).
void accumulate(ParameterSet& into, const ParameterSet& from);

// Scales every tensor in place.
void scale_params(ParameterSet& params, double factor);

double grad_max_abs(const ParameterSet& grads);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction; state keyed by parameter name, created
// on first use. step() descends, so pass the gradient of the loss.
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  void step(ParameterSet& params, const ParameterSet& grads);
  void reset() { t_ = 0; moments_.clear(); }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamConfig config_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace ssmcast::diffmath
