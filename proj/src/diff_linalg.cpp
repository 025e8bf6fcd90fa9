#include "ssmcast/diff_linalg.hpp"

#include <stdexcept>

#include "ssmcast/gaussian.hpp"
#include "ssmcast/tensor.hpp"

namespace ssmcast::diffmath {

namespace {

std::int32_t square_dim(const Tape& t, ValueId m, const char* what) {
  const std::int32_t r = t.result_rows(m);
  const std::int32_t c = t.result_cols(m);
  if (c == 0 || r != c) {
    throw std::invalid_argument(std::string(what) + ": value is not a square matrix");
  }
  return r;
}

// Forward substitution over scalar ids: solves L y = b.
std::vector<ValueId> forward_scalars(Tape& t, const TapeChol& c, ValueId b) {
  std::vector<ValueId> y(c.n);
  for (std::int32_t i = 0; i < c.n; ++i) {
    ValueId acc = t.slice(b, i, 1);
    for (std::int32_t k = 0; k < i; ++k) {
      acc = t.sub(acc, t.mul(c.elems[i * c.n + k], y[k]));
    }
    y[i] = t.mul(acc, c.recip_diag[i]);
  }
  return y;
}

// Back substitution over scalar ids: solves L^T x = y.
std::vector<ValueId> back_scalars(Tape& t, const TapeChol& c,
                                  const std::vector<ValueId>& y) {
  std::vector<ValueId> x(c.n);
  for (std::int32_t i = c.n - 1; i >= 0; --i) {
    ValueId acc = y[i];
    for (std::int32_t k = i + 1; k < c.n; ++k) {
      acc = t.sub(acc, t.mul(c.elems[k * c.n + i], x[k]));
    }
    x[i] = t.mul(acc, c.recip_diag[i]);
  }
  return x;
}

ValueId assemble_vec(Tape& t, const std::vector<ValueId>& parts) {
  return t.concat(std::span<const ValueId>(parts.data(), parts.size()),
                  static_cast<std::int32_t>(parts.size()), 0);
}

}  // namespace

ValueId transpose(Tape& t, ValueId m) {
  const std::int32_t c = t.result_cols(m);
  if (c == 0) {
    throw std::invalid_argument("transpose: value is not rank-2");
  }
  return t.matmul(t.constant(Tensor::identity(static_cast<std::size_t>(c))), m,
                  false, true);
}

ValueId diag_matrix(Tape& t, ValueId v) {
  if (t.result_cols(v) != 0) {
    throw std::invalid_argument("diag_matrix: value is not rank-1");
  }
  const std::int32_t n = t.result_rows(v);
  const ValueId zero = t.constant_scalar(0.0);
  std::vector<ValueId> parts(static_cast<std::size_t>(n) * n, zero);
  for (std::int32_t i = 0; i < n; ++i) {
    parts[i * n + i] = t.slice(v, i, 1);
  }
  return t.concat(std::span<const ValueId>(parts.data(), parts.size()), n, n);
}

TapeChol chol_lower(Tape& t, ValueId a, double jitter) {
  const std::int32_t n = square_dim(t, a, "chol_lower");
  TapeChol c;
  c.n = n;
  const ValueId zero = t.constant_scalar(0.0);
  c.elems.assign(static_cast<std::size_t>(n) * n, zero);
  c.recip_diag.resize(n);
  ValueId half_log_det = -1;
  for (std::int32_t j = 0; j < n; ++j) {
    ValueId s = t.slice(a, static_cast<std::int64_t>(j) * n + j, 1);
    if (jitter > 0.0) {
      s = t.add(s, t.constant_scalar(jitter));
    }
    for (std::int32_t k = 0; k < j; ++k) {
      const ValueId ljk = c.elems[j * n + k];
      s = t.sub(s, t.mul(ljk, ljk));
    }
    const ValueId half_log = t.scale(t.log(s), 0.5);  // log L_jj
    const ValueId diag = t.exp(half_log);
    c.elems[j * n + j] = diag;
    c.recip_diag[j] = t.exp(t.neg(half_log));
    half_log_det = j == 0 ? half_log : t.add(half_log_det, half_log);
    for (std::int32_t i = j + 1; i < n; ++i) {
      ValueId acc = t.slice(a, static_cast<std::int64_t>(i) * n + j, 1);
      for (std::int32_t k = 0; k < j; ++k) {
        acc = t.sub(acc, t.mul(c.elems[i * n + k], c.elems[j * n + k]));
      }
      c.elems[i * n + j] = t.mul(acc, c.recip_diag[j]);
    }
  }
  c.half_log_det = half_log_det;
  c.matrix = t.concat(std::span<const ValueId>(c.elems.data(), c.elems.size()), n, n);
  return c;
}

ValueId tri_lower_solve(Tape& t, const TapeChol& c, ValueId b) {
  if (t.result_cols(b) != 0 || t.result_rows(b) != c.n) {
    throw std::invalid_argument("tri_lower_solve: rhs shape mismatch");
  }
  return assemble_vec(t, forward_scalars(t, c, b));
}

ValueId chol_solve_vec(Tape& t, const TapeChol& c, ValueId b) {
  if (t.result_cols(b) != 0 || t.result_rows(b) != c.n) {
    throw std::invalid_argument("chol_solve_vec: rhs shape mismatch");
  }
  return assemble_vec(t, back_scalars(t, c, forward_scalars(t, c, b)));
}

ValueId chol_solve_transposed_rhs(Tape& t, const TapeChol& c, ValueId bt) {
  if (t.result_cols(bt) != c.n) {
    throw std::invalid_argument("chol_solve_transposed_rhs: rhs shape mismatch");
  }
  const std::int32_t nrhs = t.result_rows(bt);
  std::vector<ValueId> parts;
  parts.reserve(static_cast<std::size_t>(nrhs) * c.n);
  for (std::int32_t r = 0; r < nrhs; ++r) {
    const ValueId b = t.slice(bt, static_cast<std::int64_t>(r) * c.n, c.n);
    const auto x = back_scalars(t, c, forward_scalars(t, c, b));
    parts.insert(parts.end(), x.begin(), x.end());
  }
  return t.concat(std::span<const ValueId>(parts.data(), parts.size()), nrhs, c.n);
}

ValueId mvn_logpdf(Tape& t, ValueId x, ValueId mean, const TapeChol& c) {
  const ValueId d = t.sub(x, mean);
  const ValueId y = assemble_vec(t, forward_scalars(t, c, d));
  const ValueId quad = t.dot(y, y);
  const ValueId norm = t.constant_scalar(-0.5 * c.n * kLog2Pi);
  return t.sub(t.sub(norm, c.half_log_det), t.scale(quad, 0.5));
}

}  // namespace ssmcast::diffmath
