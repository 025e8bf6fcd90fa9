#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ssmcast/tape.hpp"
#include "ssmcast/tensor.hpp"

namespace ssmcast::diffmath {

// Named tensors with deterministic lexicographic iteration order.
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor>;
  using const_iterator = Map::const_iterator;
  using iterator = Map::iterator;

  ParameterSet() = default;

  void set(const std::string& name, Tensor value);
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return items_.count(name) != 0; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::vector<std::string> names() const;

  const_iterator begin() const { return items_.begin(); }
  const_iterator end() const { return items_.end(); }
  iterator begin() { return items_.begin(); }
  iterator end() { return items_.end(); }

 private:
  Map items_;
};

// A differentiable scalar function expressed against the tape: given a tape
// and the ids of the registered parameters, record the computation and return
// the id of the scalar result.
using DiffFunction =
    std::function<ValueId(Tape&, const std::map<std::string, ValueId>&)>;

struct ValueAndGradient {
  double value = 0.0;
  // Same names and shapes as the evaluated parameters; parameters the output
  // does not depend on get zero gradients.
  ParameterSet gradients;
};

double evaluate(const DiffFunction& f, const ParameterSet& params);

ValueAndGradient value_and_gradient(const DiffFunction& f,
                                    const ParameterSet& params);

struct FdReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    bool pass = true;
  };
  std::vector<Entry> entries;
  double epsilon = 0.0;
  double tolerance = 0.0;
  bool pass = true;
  std::vector<std::string> failed_names() const;
};

// Central-difference check of the reverse-mode gradient, coordinate by
// coordinate. Relative error per coordinate is |a - n| / max(1, |n|).
// `analytic_override` substitutes an externally supplied gradient (used for
// fault-injection checks of the checker itself).
FdReport finite_difference_check(const DiffFunction& f, const ParameterSet& params,
                                 double epsilon = 1e-5, double tolerance = 1e-4,
                                 const ParameterSet* analytic_override = nullptr);

}  // namespace ssmcast::diffmath
