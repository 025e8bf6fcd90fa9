#pragma once

#include <vector>

#include "ssmcast/tape.hpp"

namespace ssmcast::diffmath {

// Dense-matrix helpers recorded on the tape, built only from the closed
// primitive set. Matrices here are small (state and channel dimensions), so
// scalar-by-scalar composition is affordable and keeps every step exactly
// differentiable.

// Transpose of a rank-2 value.
ValueId transpose(Tape& t, ValueId m);

// Diagonal matrix from a rank-1 value.
ValueId diag_matrix(Tape& t, ValueId v);

// Lower Cholesky factor of a symmetric positive definite value, held both as
// an assembled matrix and as per-element scalars for substitution.
struct TapeChol {
  std::int32_t n = 0;
  ValueId matrix = -1;               // (n, n) lower triangular
  std::vector<ValueId> elems;        // scalar ids, row-major, upper part zero
  std::vector<ValueId> recip_diag;   // 1 / L_jj
  ValueId half_log_det = -1;         // sum_j log L_jj
};

// Factors a + jitter * I. A non-positive pivot raises std::domain_error from
// the underlying log, which is how indefinite inputs surface.
TapeChol chol_lower(Tape& t, ValueId a, double jitter = 0.0);

// Solves L y = b by forward substitution (rank-1 b of length n).
ValueId tri_lower_solve(Tape& t, const TapeChol& c, ValueId b);

// Solves (L L^T) x = b.
ValueId chol_solve_vec(Tape& t, const TapeChol& c, ValueId b);

// Solves (L L^T) X = B where bt holds B transposed, one right-hand side per
// row. Returns X transposed, so row r of the result is the solution for row r
// of bt.
ValueId chol_solve_transposed_rhs(Tape& t, const TapeChol& c, ValueId bt);

// Log density of N(mean, Sigma) at x, with Sigma supplied through its
// Cholesky factor.
ValueId mvn_logpdf(Tape& t, ValueId x, ValueId mean, const TapeChol& c);

}  // namespace ssmcast::diffmath
