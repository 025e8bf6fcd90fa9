#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "ssmcast/tensor.hpp"

namespace ssmcast::diffmath {

using ValueId = std::int32_t;

// Closed primitive set. Everything differentiable in this library is composed
// from these operations; the reverse sweep visits them in exact reverse
// recording order.
enum class OpKind : std::uint8_t {
  kInput,
  kConstant,
  kMatMul,
  kAdd,
  kMul,
  kTanh,
  kSoftplus,
  kExp,
  kLog,
  kSum,
  kSlice,
  kConcat,
  kBroadcast,
};

const char* op_name(OpKind kind);

// Recording tape for reverse-mode differentiation. Values live in a single
// contiguous arena so that recording millions of small operations (for example
// a Kalman recursion unrolled over time) stays cheap. A tape is confined to
// one thread while recording; separate tapes may run concurrently.
class Tape {
 public:
  Tape() = default;

  // Clears all recorded state but keeps arena capacity for reuse.
  void reset();

  // --- Leaf nodes -----------------------------------------------------------
  ValueId input(const Tensor& value, std::string name);
  ValueId constant(const Tensor& value);
  // Deduplicated fills like all-ones or all(-1); shapes follow (rows, cols)
  // with cols == 0 meaning a rank-1 value of length rows.
  ValueId constant_fill(double v, std::int32_t rows, std::int32_t cols);
  ValueId constant_scalar(double v) { return constant_fill(v, 1, 0); }

  // --- Primitives -----------------------------------------------------------
  ValueId matmul(ValueId a, ValueId b, bool trans_a = false, bool trans_b = false);
  ValueId add(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  ValueId tanh(ValueId a);
  ValueId softplus(ValueId a);
  ValueId exp(ValueId a);
  ValueId log(ValueId a);
  ValueId sum(ValueId a);
  ValueId slice(ValueId a, std::int64_t start, std::int64_t len);
  ValueId concat(std::span<const ValueId> parts, std::int32_t rows, std::int32_t cols);
  ValueId broadcast(ValueId scalar, std::int32_t rows, std::int32_t cols);

  // --- Sugar (expands to recorded primitives only) --------------------------
  ValueId neg(ValueId a);
  ValueId sub(ValueId a, ValueId b);
  ValueId scale(ValueId a, double c);
  ValueId add_scalar(ValueId a, double c);
  ValueId recip_positive(ValueId a);
  ValueId div_positive(ValueId a, ValueId b);
  ValueId sqrt_positive(ValueId a);
  ValueId sigmoid(ValueId a);
  ValueId dot(ValueId a, ValueId b);
  // W x + b with rank-1 x and b.
  ValueId affine(ValueId w, ValueId x, ValueId b);
  ValueId concat2(ValueId a, ValueId b);

  // --- Introspection --------------------------------------------------------
  std::size_t node_count() const { return nodes_.size(); }
  Tensor value(ValueId id) const;
  double scalar_value(ValueId id) const;
  std::span<const double> value_span(ValueId id) const;
  std::int32_t result_rows(ValueId id) const { return nodes_[id].rows; }
  std::int32_t result_cols(ValueId id) const { return nodes_[id].cols; }
  std::int64_t result_len(ValueId id) const { return len_of(nodes_[id]); }

  // --- Reverse sweep --------------------------------------------------------
  // Root must be a scalar (length-1) value. Fills gradient storage for every
  // node; gradients of inputs are then read with grad().
  void backward(ValueId root);
  Tensor grad(ValueId id) const;
  std::span<const double> grad_span(ValueId id) const;

  // Re-executes the recorded forward trace from the recorded leaf values and
  // reports whether every recomputed value is bit-identical to the original.
  bool verify_replay() const;

 private:
  struct Node {
    OpKind kind;
    std::uint8_t flags = 0;  // matmul: bit0 trans_a, bit1 trans_b
    ValueId a = -1;
    ValueId b = -1;
    std::int32_t aux_off = 0;  // concat: offset into aux pool; slice: unused
    std::int32_t aux_len = 0;  // concat: part count
    std::int64_t src_start = 0;  // slice: flat start in source
    std::int64_t val_off = 0;
    std::int32_t rows = 0;  // result dims; cols == 0 encodes rank-1
    std::int32_t cols = 0;
    std::int32_t mid = 0;  // matmul inner dimension
  };

  static std::int64_t len_of(const Node& n) {
    return n.cols == 0 ? n.rows : static_cast<std::int64_t>(n.rows) * n.cols;
  }

  ValueId push_node(Node n, std::int64_t len);
  void exec_node(std::size_t idx, double* base) const;
  void check_result(std::size_t idx);
  void check_positive(ValueId src, std::size_t idx) const;
  [[noreturn]] void fail(std::size_t idx, const std::string& what) const;

  std::vector<Node> nodes_;
  std::vector<double> vals_;
  std::vector<double> grads_;
  std::vector<ValueId> aux_;
  std::vector<std::pair<ValueId, std::string>> input_names_;
  std::map<std::tuple<double, std::int32_t, std::int32_t>, ValueId> fill_cache_;
  bool has_grads_ = false;
};

}  // namespace ssmcast::diffmath
