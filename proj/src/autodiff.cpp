#include "ssmcast/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace ssmcast::diffmath {

void ParameterSet::set(const std::string& name, Tensor value) {
  items_.insert_or_assign(name, std::move(value));
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) {
    throw std::out_of_range("parameter '" + name + "' is not in the set");
  }
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = items_.find(name);
  if (it == items_.end()) {
    throw std::out_of_range("parameter '" + name + "' is not in the set");
  }
  return it->second;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& [name, _] : items_) out.push_back(name);
  return out;
}

namespace {

ValueId record(const DiffFunction& f, const ParameterSet& params, Tape& tape,
               std::map<std::string, ValueId>& ids) {
  for (const auto& [name, value] : params) {
    ids.emplace(name, tape.input(value, name));
  }
  const ValueId root = f(tape, ids);
  if (tape.result_len(root) != 1) {
    throw std::invalid_argument("differentiable function must return a scalar");
  }
  return root;
}

}  // namespace

double evaluate(const DiffFunction& f, const ParameterSet& params) {
  Tape tape;
  std::map<std::string, ValueId> ids;
  const ValueId root = record(f, params, tape, ids);
  return tape.scalar_value(root);
}

ValueAndGradient value_and_gradient(const DiffFunction& f,
                                    const ParameterSet& params) {
  Tape tape;
  std::map<std::string, ValueId> ids;
  const ValueId root = record(f, params, tape, ids);
  tape.backward(root);
  ValueAndGradient out;
  out.value = tape.scalar_value(root);
  for (const auto& [name, id] : ids) {
    out.gradients.set(name, tape.grad(id));
  }
  return out;
}

std::vector<std::string> FdReport::failed_names() const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (!e.pass) out.push_back(e.name);
  }
  return out;
}

FdReport finite_difference_check(const DiffFunction& f, const ParameterSet& params,
                                 double epsilon, double tolerance,
                                 const ParameterSet* analytic_override) {
  if (!(epsilon > 0.0) || !(tolerance > 0.0)) {
    throw std::invalid_argument("finite_difference_check: epsilon and tolerance must be positive");
  }
  const ParameterSet analytic = analytic_override
                                    ? *analytic_override
                                    : value_and_gradient(f, params).gradients;
  FdReport report;
  report.epsilon = epsilon;
  report.tolerance = tolerance;
  ParameterSet work = params;
  for (const auto& [name, tensor] : params) {
    FdReport::Entry entry;
    entry.name = name;
    const Tensor& grad = analytic.at(name);
    if (!grad.same_shape(tensor)) {
      throw std::invalid_argument("finite_difference_check: gradient shape for '" +
                                  name + "' does not match the parameter");
    }
    Tensor& slot = work.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = slot[i];
      slot[i] = saved + epsilon;
      const double fp = evaluate(f, work);
      slot[i] = saved - epsilon;
      const double fm = evaluate(f, work);
      slot[i] = saved;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double a = grad[i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > entry.max_rel_err || i == 0) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
        entry.analytic_at_worst = a;
        entry.numeric_at_worst = numeric;
      }
    }
    entry.pass = entry.max_rel_err <= tolerance;
    report.entries.push_back(entry);
    report.pass = report.pass && entry.pass;
  }
  return report;
}

}  // namespace ssmcast::diffmath
