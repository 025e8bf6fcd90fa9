#include "ssmcast/tape.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace ssmcast::diffmath {

namespace {

double softplus_stable(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid_stable(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSum: return "sum";
    case OpKind::kSlice: return "slice";
    case OpKind::kConcat: return "concat";
    case OpKind::kBroadcast: return "broadcast";
  }
  return "?";
}

void Tape::reset() {
  nodes_.clear();
  vals_.clear();
  grads_.clear();
  aux_.clear();
  input_names_.clear();
  fill_cache_.clear();
  has_grads_ = false;
}

ValueId Tape::push_node(Node n, std::int64_t len) {
  n.val_off = static_cast<std::int64_t>(vals_.size());
  nodes_.push_back(n);
  vals_.resize(vals_.size() + static_cast<std::size_t>(len));
  has_grads_ = false;
  return static_cast<ValueId>(nodes_.size() - 1);
}

void Tape::fail(std::size_t idx, const std::string& what) const {
  throw std::runtime_error("tape node " + std::to_string(idx) + " (" +
                           op_name(nodes_[idx].kind) + "): " + what);
}

void Tape::check_result(std::size_t idx) {
  const Node& n = nodes_[idx];
  const double* p = vals_.data() + n.val_off;
  const std::int64_t len = len_of(n);
  for (std::int64_t i = 0; i < len; ++i) {
    if (!std::isfinite(p[i])) {
      fail(idx, "produced a non-finite value");
    }
  }
}

void Tape::check_positive(ValueId src, std::size_t idx) const {
  const Node& s = nodes_[src];
  const double* p = vals_.data() + s.val_off;
  const std::int64_t len = len_of(s);
  for (std::int64_t i = 0; i < len; ++i) {
    if (!(p[i] > 0.0)) {
      throw std::domain_error("tape node " + std::to_string(idx) +
                              " (log): input element " + std::to_string(i) +
                              " is not positive (" + std::to_string(p[i]) + ")");
    }
  }
}

ValueId Tape::input(const Tensor& value, std::string name) {
  if (!value.all_finite()) {
    throw std::invalid_argument("tape input '" + name + "' has non-finite values");
  }
  Node n;
  n.kind = OpKind::kInput;
  n.rows = static_cast<std::int32_t>(value.rows());
  n.cols = value.rank() == 1 ? 0 : static_cast<std::int32_t>(value.cols());
  const ValueId id = push_node(n, static_cast<std::int64_t>(value.size()));
  std::memcpy(vals_.data() + nodes_[id].val_off, value.values().data(),
              value.size() * sizeof(double));
  input_names_.emplace_back(id, std::move(name));
  return id;
}

ValueId Tape::constant(const Tensor& value) {
  if (!value.all_finite()) {
    throw std::invalid_argument("tape constant has non-finite values");
  }
  Node n;
  n.kind = OpKind::kConstant;
  n.rows = static_cast<std::int32_t>(value.rows());
  n.cols = value.rank() == 1 ? 0 : static_cast<std::int32_t>(value.cols());
  const ValueId id = push_node(n, static_cast<std::int64_t>(value.size()));
  std::memcpy(vals_.data() + nodes_[id].val_off, value.values().data(),
              value.size() * sizeof(double));
  return id;
}

ValueId Tape::constant_fill(double v, std::int32_t rows, std::int32_t cols) {
  if (!std::isfinite(v) || rows < 1 || cols < 0) {
    throw std::invalid_argument("constant_fill: bad value or shape");
  }
  const auto key = std::make_tuple(v, rows, cols);
  if (auto it = fill_cache_.find(key); it != fill_cache_.end()) {
    return it->second;
  }
  Node n;
  n.kind = OpKind::kConstant;
  n.rows = rows;
  n.cols = cols;
  const std::int64_t len = cols == 0 ? rows : static_cast<std::int64_t>(rows) * cols;
  const ValueId id = push_node(n, len);
  double* p = vals_.data() + nodes_[id].val_off;
  for (std::int64_t i = 0; i < len; ++i) p[i] = v;
  fill_cache_.emplace(key, id);
  return id;
}

ValueId Tape::matmul(ValueId a, ValueId b, bool trans_a, bool trans_b) {
  const Node& na = nodes_[a];
  const Node& nb = nodes_[b];
  const bool a_vec = na.cols == 0;
  const bool b_vec = nb.cols == 0;
  if ((a_vec && trans_a) || (b_vec && trans_b)) {
    throw std::invalid_argument("matmul: transpose flag on a rank-1 operand");
  }
  // Rank-1 left operands act as row vectors, rank-1 right operands as columns.
  const std::int32_t m = a_vec ? 1 : (trans_a ? na.cols : na.rows);
  const std::int32_t ka = a_vec ? na.rows : (trans_a ? na.rows : na.cols);
  const std::int32_t kb = b_vec ? nb.rows : (trans_b ? nb.cols : nb.rows);
  const std::int32_t nn = b_vec ? 1 : (trans_b ? nb.rows : nb.cols);
  if (ka != kb) {
    throw std::invalid_argument("matmul: inner dimensions differ (" +
                                std::to_string(ka) + " vs " + std::to_string(kb) + ")");
  }
  Node n;
  n.kind = OpKind::kMatMul;
  n.flags = static_cast<std::uint8_t>((trans_a ? 1 : 0) | (trans_b ? 2 : 0));
  n.a = a;
  n.b = b;
  n.mid = ka;
  if (a_vec && b_vec) {
    n.rows = 1;
    n.cols = 0;
  } else if (a_vec) {
    n.rows = nn;
    n.cols = 0;
  } else if (b_vec) {
    n.rows = m;
    n.cols = 0;
  } else {
    n.rows = m;
    n.cols = nn;
  }
  const ValueId id = push_node(n, len_of(n));
  exec_node(static_cast<std::size_t>(id), vals_.data());
  check_result(static_cast<std::size_t>(id));
  return id;
}

ValueId Tape::add(ValueId a, ValueId b) {
  const Node& na = nodes_[a];
  const Node& nb = nodes_[b];
  if (na.rows != nb.rows || na.cols != nb.cols) {
    throw std::invalid_argument("add: shape mismatch");
  }
  Node n;
  n.kind = OpKind::kAdd;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = na.cols;
  const ValueId id = push_node(n, len_of(n));
  exec_node(static_cast<std::size_t>(id), vals_.data());
  check_result(static_cast<std::size_t>(id));
  return id;
}

ValueId Tape::mul(ValueId a, ValueId b) {
  const Node& na = nodes_[a];
  const Node& nb = nodes_[b];
  if (na.rows != nb.rows || na.cols != nb.cols) {
    throw std::invalid_argument("mul: shape mismatch");
  }
  Node n;
  n.kind = OpKind::kMul;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = na.cols;
  const ValueId id = push_node(n, len_of(n));
  exec_node(static_cast<std::size_t>(id), vals_.data());
  check_result(static_cast<std::size_t>(id));
  return id;
}

ValueId Tape::tanh(ValueId a) {
  Node n;
  n.kind = OpKind::kTanh;
  n.a = a;
  n.rows = nodes_[a].rows;
  n.cols = nodes_[a].cols;
  const ValueId id = push_node(n, len_of(n));
  exec_node(static_cast<std::size_t>(id), vals_.data());
  check_result(static_cast<std::size_t>(id));
  return id;
}

ValueId Tape::softplus(ValueId a) {
  Node n;
  n.kind = OpKind::kSoftplus;
  n.a = a;
  n.rows = nodes_[a].rows;
  n.cols = nodes_[a].cols;
  const ValueId id = push_node(n, len_of(n));
  exec_node(static_cast<std::size_t>(id), vals_.data());
  check_result(static_cast<std::size_t>(id));
  return id;
}

ValueId Tape::exp(ValueId a) {
  Node n;
  n.kind = OpKind::kExp;
  n.a = a;
  n.rows = nodes_[a].rows;
  n.cols = nodes_[a].cols;
  const ValueId id = push_node(n, len_of(n));
  exec_node(static_cast<std::size_t>(id), vals_.data());
  check_result(static_cast<std::size_t>(id));
  return id;
}

ValueId Tape::log(ValueId a) {
  Node n;
  n.kind = OpKind::kLog;
  n.a = a;
  n.rows = nodes_[a].rows;
  n.cols = nodes_[a].cols;
  const ValueId id = push_node(n, len_of(n));
  check_positive(a, static_cast<std::size_t>(id));
  exec_node(static_cast<std::size_t>(id), vals_.data());
  check_result(static_cast<std::size_t>(id));
  return id;
}

ValueId Tape::sum(ValueId a) {
  Node n;
  n.kind = OpKind::kSum;
  n.a = a;
  n.rows = 1;
  n.cols = 0;
  const ValueId id = push_node(n, 1);
  exec_node(static_cast<std::size_t>(id), vals_.data());
  check_result(static_cast<std::size_t>(id));
  return id;
}

ValueId Tape::slice(ValueId a, std::int64_t start, std::int64_t len) {
  const std::int64_t src_len = len_of(nodes_[a]);
  if (start < 0 || len < 1 || start + len > src_len) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) +
                                ") outside source of length " +
                                std::to_string(src_len));
  }
  Node n;
  n.kind = OpKind::kSlice;
  n.a = a;
  n.src_start = start;
  n.rows = static_cast<std::int32_t>(len);
  n.cols = 0;
  const ValueId id = push_node(n, len);
  exec_node(static_cast<std::size_t>(id), vals_.data());
  return id;
}

ValueId Tape::concat(std::span<const ValueId> parts, std::int32_t rows,
                     std::int32_t cols) {
  if (parts.empty() || rows < 1 || cols < 0) {
    throw std::invalid_argument("concat: empty part list or bad shape");
  }
  std::int64_t total = 0;
  for (ValueId p : parts) total += len_of(nodes_[p]);
  const std::int64_t want = cols == 0 ? rows : static_cast<std::int64_t>(rows) * cols;
  if (total != want) {
    throw std::invalid_argument("concat: parts hold " + std::to_string(total) +
                                " values but declared shape needs " +
                                std::to_string(want));
  }
  Node n;
  n.kind = OpKind::kConcat;
  n.aux_off = static_cast<std::int32_t>(aux_.size());
  n.aux_len = static_cast<std::int32_t>(parts.size());
  n.rows = rows;
  n.cols = cols;
  aux_.insert(aux_.end(), parts.begin(), parts.end());
  const ValueId id = push_node(n, total);
  exec_node(static_cast<std::size_t>(id), vals_.data());
  return id;
}

ValueId Tape::broadcast(ValueId scalar, std::int32_t rows, std::int32_t cols) {
  if (len_of(nodes_[scalar]) != 1) {
    throw std::invalid_argument("broadcast: source must have exactly one value");
  }
  if (rows < 1 || cols < 0) {
    throw std::invalid_argument("broadcast: bad target shape");
  }
  Node n;
  n.kind = OpKind::kBroadcast;
  n.a = scalar;
  n.rows = rows;
  n.cols = cols;
  const ValueId id = push_node(n, len_of(n));
  exec_node(static_cast<std::size_t>(id), vals_.data());
  return id;
}

ValueId Tape::neg(ValueId a) {
  return mul(a, constant_fill(-1.0, nodes_[a].rows, nodes_[a].cols));
}

ValueId Tape::sub(ValueId a, ValueId b) { return add(a, neg(b)); }

ValueId Tape::scale(ValueId a, double c) {
  return mul(a, constant_fill(c, nodes_[a].rows, nodes_[a].cols));
}

ValueId Tape::add_scalar(ValueId a, double c) {
  return add(a, constant_fill(c, nodes_[a].rows, nodes_[a].cols));
}

ValueId Tape::recip_positive(ValueId a) { return exp(neg(log(a))); }

ValueId Tape::div_positive(ValueId a, ValueId b) { return mul(a, recip_positive(b)); }

ValueId Tape::sqrt_positive(ValueId a) { return exp(scale(log(a), 0.5)); }

ValueId Tape::sigmoid(ValueId a) { return exp(neg(softplus(neg(a)))); }

ValueId Tape::dot(ValueId a, ValueId b) {
  if (nodes_[a].cols != 0 || nodes_[b].cols != 0) {
    throw std::invalid_argument("dot: both operands must be rank-1");
  }
  return matmul(a, b);
}

ValueId Tape::affine(ValueId w, ValueId x, ValueId b) {
  return add(matmul(w, x), b);
}

ValueId Tape::concat2(ValueId a, ValueId b) {
  if (nodes_[a].cols != 0 || nodes_[b].cols != 0) {
    throw std::invalid_argument("concat2: both operands must be rank-1");
  }
  const ValueId parts[2] = {a, b};
  return concat(std::span<const ValueId>(parts, 2),
                nodes_[a].rows + nodes_[b].rows, 0);
}

void Tape::exec_node(std::size_t idx, double* base) const {
  const Node& n = nodes_[idx];
  double* out = base + n.val_off;
  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kConstant:
      break;  // leaf values are already in place
    case OpKind::kMatMul: {
      const Node& na = nodes_[n.a];
      const Node& nb = nodes_[n.b];
      const double* pa = base + na.val_off;
      const double* pb = base + nb.val_off;
      const bool a_vec = na.cols == 0;
      const bool b_vec = nb.cols == 0;
      const bool ta = (n.flags & 1) != 0;
      const bool tb = (n.flags & 2) != 0;
      const std::int32_t m = a_vec ? 1 : (ta ? na.cols : na.rows);
      const std::int32_t k = n.mid;
      const std::int32_t nn = b_vec ? 1 : (tb ? nb.rows : nb.cols);
      const std::int32_t ac = na.cols;
      const std::int32_t bc = nb.cols;
      auto a_at = [&](std::int32_t i, std::int32_t l) {
        return a_vec ? pa[l] : (ta ? pa[static_cast<std::int64_t>(l) * ac + i]
                                   : pa[static_cast<std::int64_t>(i) * ac + l]);
      };
      auto b_at = [&](std::int32_t l, std::int32_t j) {
        return b_vec ? pb[l] : (tb ? pb[static_cast<std::int64_t>(j) * bc + l]
                                   : pb[static_cast<std::int64_t>(l) * bc + j]);
      };
      for (std::int32_t i = 0; i < m; ++i) {
        for (std::int32_t j = 0; j < nn; ++j) {
          double acc = 0.0;
          for (std::int32_t l = 0; l < k; ++l) acc += a_at(i, l) * b_at(l, j);
          out[static_cast<std::int64_t>(i) * nn + j] = acc;
        }
      }
      break;
    }
    case OpKind::kAdd: {
      const double* pa = base + nodes_[n.a].val_off;
      const double* pb = base + nodes_[n.b].val_off;
      const std::int64_t len = len_of(n);
      for (std::int64_t i = 0; i < len; ++i) out[i] = pa[i] + pb[i];
      break;
    }
    case OpKind::kMul: {
      const double* pa = base + nodes_[n.a].val_off;
      const double* pb = base + nodes_[n.b].val_off;
      const std::int64_t len = len_of(n);
      for (std::int64_t i = 0; i < len; ++i) out[i] = pa[i] * pb[i];
      break;
    }
    case OpKind::kTanh: {
      const double* pa = base + nodes_[n.a].val_off;
      const std::int64_t len = len_of(n);
      for (std::int64_t i = 0; i < len; ++i) out[i] = std::tanh(pa[i]);
      break;
    }
    case OpKind::kSoftplus: {
      const double* pa = base + nodes_[n.a].val_off;
      const std::int64_t len = len_of(n);
      for (std::int64_t i = 0; i < len; ++i) out[i] = softplus_stable(pa[i]);
      break;
    }
    case OpKind::kExp: {
      const double* pa = base + nodes_[n.a].val_off;
      const std::int64_t len = len_of(n);
      for (std::int64_t i = 0; i < len; ++i) out[i] = std::exp(pa[i]);
      break;
    }
    case OpKind::kLog: {
      const double* pa = base + nodes_[n.a].val_off;
      const std::int64_t len = len_of(n);
      for (std::int64_t i = 0; i < len; ++i) out[i] = std::log(pa[i]);
      break;
    }
    case OpKind::kSum: {
      const double* pa = base + nodes_[n.a].val_off;
      const std::int64_t len = len_of(nodes_[n.a]);
      double acc = 0.0;
      for (std::int64_t i = 0; i < len; ++i) acc += pa[i];
      out[0] = acc;
      break;
    }
    case OpKind::kSlice: {
      const double* pa = base + nodes_[n.a].val_off + n.src_start;
      std::memcpy(out, pa, static_cast<std::size_t>(len_of(n)) * sizeof(double));
      break;
    }
    case OpKind::kConcat: {
      std::int64_t pos = 0;
      for (std::int32_t p = 0; p < n.aux_len; ++p) {
        const Node& part = nodes_[aux_[n.aux_off + p]];
        const std::int64_t plen = len_of(part);
        std::memcpy(out + pos, base + part.val_off,
                    static_cast<std::size_t>(plen) * sizeof(double));
        pos += plen;
      }
      break;
    }
    case OpKind::kBroadcast: {
      const double v = base[nodes_[n.a].val_off];
      const std::int64_t len = len_of(n);
      for (std::int64_t i = 0; i < len; ++i) out[i] = v;
      break;
    }
  }
}

Tensor Tape::value(ValueId id) const {
  const Node& n = nodes_[id];
  std::span<const double> s(vals_.data() + n.val_off,
                            static_cast<std::size_t>(len_of(n)));
  if (n.cols == 0) {
    return Tensor(Tensor::Unchecked{}, {static_cast<std::size_t>(n.rows)},
                  std::vector<double>(s.begin(), s.end()));
  }
  return Tensor(Tensor::Unchecked{},
                {static_cast<std::size_t>(n.rows), static_cast<std::size_t>(n.cols)},
                std::vector<double>(s.begin(), s.end()));
}

double Tape::scalar_value(ValueId id) const {
  if (len_of(nodes_[id]) != 1) {
    throw std::invalid_argument("scalar_value: node is not a scalar");
  }
  return vals_[static_cast<std::size_t>(nodes_[id].val_off)];
}

std::span<const double> Tape::value_span(ValueId id) const {
  const Node& n = nodes_[id];
  return {vals_.data() + n.val_off, static_cast<std::size_t>(len_of(n))};
}

void Tape::backward(ValueId root) {
  if (len_of(nodes_[root]) != 1) {
    throw std::invalid_argument("backward: root must be a scalar value");
  }
  grads_.assign(vals_.size(), 0.0);
  grads_[static_cast<std::size_t>(nodes_[root].val_off)] = 1.0;
  for (std::int64_t idx = root; idx >= 0; --idx) {
    const Node& n = nodes_[static_cast<std::size_t>(idx)];
    const double* gy = grads_.data() + n.val_off;
    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kConstant:
        break;
      case OpKind::kMatMul: {
        const Node& na = nodes_[n.a];
        const Node& nb = nodes_[n.b];
        const double* pa = vals_.data() + na.val_off;
        const double* pb = vals_.data() + nb.val_off;
        double* ga = grads_.data() + na.val_off;
        double* gb = grads_.data() + nb.val_off;
        const bool a_vec = na.cols == 0;
        const bool b_vec = nb.cols == 0;
        const bool ta = (n.flags & 1) != 0;
        const bool tb = (n.flags & 2) != 0;
        const std::int32_t m = a_vec ? 1 : (ta ? na.cols : na.rows);
        const std::int32_t k = n.mid;
        const std::int32_t nn = b_vec ? 1 : (tb ? nb.rows : nb.cols);
        const std::int32_t ac = na.cols;
        const std::int32_t bc = nb.cols;
        auto a_idx = [&](std::int32_t i, std::int32_t l) -> std::int64_t {
          return a_vec ? l
                       : (ta ? static_cast<std::int64_t>(l) * ac + i
                             : static_cast<std::int64_t>(i) * ac + l);
        };
        auto b_idx = [&](std::int32_t l, std::int32_t j) -> std::int64_t {
          return b_vec ? l
                       : (tb ? static_cast<std::int64_t>(j) * bc + l
                             : static_cast<std::int64_t>(l) * bc + j);
        };
        for (std::int32_t i = 0; i < m; ++i) {
          for (std::int32_t j = 0; j < nn; ++j) {
            const double g = gy[static_cast<std::int64_t>(i) * nn + j];
            if (g == 0.0) continue;
            for (std::int32_t l = 0; l < k; ++l) {
              ga[a_idx(i, l)] += g * pb[b_idx(l, j)];
              gb[b_idx(l, j)] += g * pa[a_idx(i, l)];
            }
          }
        }
        break;
      }
      case OpKind::kAdd: {
        double* ga = grads_.data() + nodes_[n.a].val_off;
        double* gb = grads_.data() + nodes_[n.b].val_off;
        const std::int64_t len = len_of(n);
        for (std::int64_t i = 0; i < len; ++i) {
          ga[i] += gy[i];
          gb[i] += gy[i];
        }
        break;
      }
      case OpKind::kMul: {
        const double* pa = vals_.data() + nodes_[n.a].val_off;
        const double* pb = vals_.data() + nodes_[n.b].val_off;
        double* ga = grads_.data() + nodes_[n.a].val_off;
        double* gb = grads_.data() + nodes_[n.b].val_off;
        const std::int64_t len = len_of(n);
        for (std::int64_t i = 0; i < len; ++i) {
          ga[i] += gy[i] * pb[i];
          gb[i] += gy[i] * pa[i];
        }
        break;
      }
      case OpKind::kTanh: {
        const double* py = vals_.data() + n.val_off;
        double* ga = grads_.data() + nodes_[n.a].val_off;
        const std::int64_t len = len_of(n);
        for (std::int64_t i = 0; i < len; ++i) {
          ga[i] += gy[i] * (1.0 - py[i] * py[i]);
        }
        break;
      }
      case OpKind::kSoftplus: {
        const double* px = vals_.data() + nodes_[n.a].val_off;
        double* ga = grads_.data() + nodes_[n.a].val_off;
        const std::int64_t len = len_of(n);
        for (std::int64_t i = 0; i < len; ++i) {
          ga[i] += gy[i] * sigmoid_stable(px[i]);
        }
        break;
      }
      case OpKind::kExp: {
        const double* py = vals_.data() + n.val_off;
        double* ga = grads_.data() + nodes_[n.a].val_off;
        const std::int64_t len = len_of(n);
        for (std::int64_t i = 0; i < len; ++i) {
          ga[i] += gy[i] * py[i];
        }
        break;
      }
      case OpKind::kLog: {
        const double* px = vals_.data() + nodes_[n.a].val_off;
        double* ga = grads_.data() + nodes_[n.a].val_off;
        const std::int64_t len = len_of(n);
        for (std::int64_t i = 0; i < len; ++i) {
          ga[i] += gy[i] / px[i];
        }
        break;
      }
      case OpKind::kSum: {
        double* ga = grads_.data() + nodes_[n.a].val_off;
        const std::int64_t len = len_of(nodes_[n.a]);
        const double g = gy[0];
        for (std::int64_t i = 0; i < len; ++i) ga[i] += g;
        break;
      }
      case OpKind::kSlice: {
        double* ga = grads_.data() + nodes_[n.a].val_off + n.src_start;
        const std::int64_t len = len_of(n);
        for (std::int64_t i = 0; i < len; ++i) ga[i] += gy[i];
        break;
      }
      case OpKind::kConcat: {
        std::int64_t pos = 0;
        for (std::int32_t p = 0; p < n.aux_len; ++p) {
          const Node& part = nodes_[aux_[n.aux_off + p]];
          double* ga = grads_.data() + part.val_off;
          const std::int64_t plen = len_of(part);
          for (std::int64_t i = 0; i < plen; ++i) ga[i] += gy[pos + i];
          pos += plen;
        }
        break;
      }
      case OpKind::kBroadcast: {
        double* ga = grads_.data() + nodes_[n.a].val_off;
        const std::int64_t len = len_of(n);
        double acc = 0.0;
        for (std::int64_t i = 0; i < len; ++i) acc += gy[i];
        ga[0] += acc;
        break;
      }
    }
  }
  has_grads_ = true;
}

Tensor Tape::grad(ValueId id) const {
  if (!has_grads_) {
    throw std::logic_error("grad: backward() has not been run on this tape");
  }
  const Node& n = nodes_[id];
  std::span<const double> s(grads_.data() + n.val_off,
                            static_cast<std::size_t>(len_of(n)));
  if (n.cols == 0) {
    return Tensor(Tensor::Unchecked{}, {static_cast<std::size_t>(n.rows)},
                  std::vector<double>(s.begin(), s.end()));
  }
  return Tensor(Tensor::Unchecked{},
                {static_cast<std::size_t>(n.rows), static_cast<std::size_t>(n.cols)},
                std::vector<double>(s.begin(), s.end()));
}

std::span<const double> Tape::grad_span(ValueId id) const {
  if (!has_grads_) {
    throw std::logic_error("grad_span: backward() has not been run on this tape");
  }
  const Node& n = nodes_[id];
  return {grads_.data() + n.val_off, static_cast<std::size_t>(len_of(n))};
}

bool Tape::verify_replay() const {
  std::vector<double> redo(vals_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::kInput || n.kind == OpKind::kConstant) {
      std::memcpy(redo.data() + n.val_off, vals_.data() + n.val_off,
                  static_cast<std::size_t>(len_of(n)) * sizeof(double));
    } else {
      exec_node(i, redo.data());
    }
  }
  return vals_.empty() ||
         std::memcmp(redo.data(), vals_.data(), vals_.size() * sizeof(double)) == 0;
}

}  // namespace ssmcast::diffmath
