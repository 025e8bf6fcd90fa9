#include "ssmcast/lgssm.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "ssmcast/gaussian.hpp"

namespace ssmcast::lgssm {

namespace {

// Factorization with the jitter ladder: 1e-9 * I added on first failure, then
// two retries at ten times the previous jitter.
Eigen::LLT<Eigen::MatrixXd> chol_ladder(const Eigen::MatrixXd& m,
                                        const std::string& context) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) return llt;
  double jitter = 1e-9;
  for (int attempt = 0; attempt < 3; ++attempt, jitter *= 10.0) {
    llt.compute(m + jitter * Eigen::MatrixXd::Identity(m.rows(), m.cols()));
    if (llt.info() == Eigen::Success) return llt;
  }
  throw std::runtime_error(context + ": matrix is not positive definite even after jitter");
}

double mvn_logpdf_llt(const Eigen::VectorXd& diff,
                      const Eigen::LLT<Eigen::MatrixXd>& llt) {
  const Eigen::MatrixXd l = llt.matrixL();
  const double logdet = 2.0 * l.diagonal().array().log().sum();
  const double quad = diff.dot(llt.solve(diff));
  return -0.5 * (diff.size() * diffmath::kLog2Pi + logdet + quad);
}

// Conditions the belief on y ~ N(H z, noise); returns the log-likelihood of y
// under the pre-update predictive.
UpdateResult observe(const GaussianBelief& belief, const Eigen::MatrixXd& h,
                     const Eigen::MatrixXd& noise, const Eigen::VectorXd& y,
                     const std::string& context) {
  const Eigen::MatrixXd s = h * belief.cov * h.transpose() + noise;
  const auto llt = chol_ladder(s, context);
  const Eigen::VectorXd innov = y - h * belief.mean;
  UpdateResult out;
  out.loglik = mvn_logpdf_llt(innov, llt);
  const Eigen::MatrixXd hp = h * belief.cov;          // rows are h-projected cov
  const Eigen::MatrixXd k = llt.solve(hp).transpose();  // P H^T S^{-1}
  out.belief.mean = belief.mean + k * innov;
  Eigen::MatrixXd cov = belief.cov - k * hp;
  out.belief.cov = 0.5 * (cov + cov.transpose());
  return out;
}

// L with L L^T = m for PSD m, tolerating eigenvalues down to -1e-9.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const std::string& context) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) {
    throw std::runtime_error(context + ": eigendecomposition failed");
  }
  Eigen::VectorXd eigs = es.eigenvalues();
  for (Eigen::Index j = 0; j < eigs.size(); ++j) {
    if (eigs[j] < -1e-9) {
      throw std::runtime_error(context + ": matrix has eigenvalue " +
                               std::to_string(eigs[j]));
    }
    eigs[j] = std::sqrt(std::max(eigs[j], 0.0));
  }
  return es.eigenvectors() * eigs.asDiagonal();
}

void check_record_dims(const data::PatientRecord& record, const LgssmParams& p,
                       const char* what) {
  if (record.obs_dim() != p.o_dim() || record.int_dim() != p.i_dim()) {
    throw std::invalid_argument(std::string(what) +
                                ": record dimensions do not match the model");
  }
  if (!record.fully_finite()) {
    throw std::invalid_argument(std::string(what) +
                                ": record has non-finite entries; impute first");
  }
}

}  // namespace

void LgssmParams::validate() const {
  const Eigen::Index z = z_dim(), o = o_dim(), i = i_dim();
  const auto fail = [](const std::string& what) {
    throw std::invalid_argument("LgssmParams: " + what);
  };
  if (z < 1 || o < 1 || i < 1) fail("dimensions must be at least 1");
  if (a.cols() != z) fail("A must be square");
  if (b.rows() != z || b.cols() != i) fail("B must be z x i");
  if (c.cols() != z) fail("C must be o x z");
  if (d.cols() != z) fail("D must be i x z");
  if (q.rows() != z || q.cols() != z) fail("Q must be z x z");
  if (r.rows() != o || r.cols() != o) fail("R must be o x o");
  if (u.rows() != i || u.cols() != i) fail("U must be i x i");
  if (m0.size() != z) fail("m0 must be a z-vector");
  if (p0.rows() != z || p0.cols() != z) fail("P0 must be z x z");
}

GaussianBelief kf_step_predict(const GaussianBelief& belief,
                               const Eigen::VectorXd& u, const LgssmParams& p) {
  if (belief.mean.size() != p.z_dim() || u.size() != p.i_dim()) {
    throw std::invalid_argument("kf_step_predict: dimension mismatch");
  }
  GaussianBelief out;
  out.mean = p.a * belief.mean + p.b * u;
  Eigen::MatrixXd cov = p.a * belief.cov * p.a.transpose() + p.q;
  out.cov = 0.5 * (cov + cov.transpose());
  return out;
}

UpdateResult kf_step_update(const GaussianBelief& prior, const Eigen::VectorXd& x,
                            const LgssmParams& p) {
  if (prior.mean.size() != p.z_dim() || x.size() != p.o_dim()) {
    throw std::invalid_argument("kf_step_update: dimension mismatch");
  }
  return observe(prior, p.c, p.r, x, "innovation covariance");
}

FilterResult kf_filter(const data::PatientRecord& record, const LgssmParams& p,
                       bool include_interventions) {
  check_record_dims(record, p, "kf_filter");
  const Eigen::Index T = record.steps();
  FilterResult out;
  out.beliefs.reserve(T);
  GaussianBelief belief{p.m0, p.p0};
  for (Eigen::Index t = 0; t < T; ++t) {
    const std::string step = "step " + std::to_string(t + 1);
    if (t > 0) {
      const Eigen::VectorXd u_t = record.u.row(t).transpose();
      if (include_interventions) {
        UpdateResult ur =
            observe(belief, p.d, p.u, u_t, "intervention covariance at " + step);
        out.total_loglik += ur.loglik;
        belief = std::move(ur.belief);
      }
      belief = kf_step_predict(belief, u_t, p);
    }
    UpdateResult xr = observe(belief, p.c, p.r, record.x.row(t).transpose(),
                              "innovation covariance at " + step);
    out.total_loglik += xr.loglik;
    belief = std::move(xr.belief);
    out.beliefs.push_back(belief);
  }
  return out;
}

JointGaussian brute_force_joint(const LgssmParams& p, Eigen::Index T) {
  p.validate();
  if (T < 1 || T > 6) {
    throw std::invalid_argument("brute_force_joint: T must be in [1, 6]");
  }
  const Eigen::Index z = p.z_dim(), o = p.o_dim(), i = p.i_dim();
  // Columns index independent standard-normal sources: the initial state,
  // then per step t >= 2 an intervention noise and a process noise block,
  // then one observation noise block per step.
  const Eigen::Index n_cols = z + (T - 1) * (i + z) + T * o;
  const Eigen::Index v_base = z + (T - 1) * (i + z);
  const Eigen::MatrixXd lq = psd_sqrt(p.q, "brute_force_joint Q");
  const Eigen::MatrixXd lr = psd_sqrt(p.r, "brute_force_joint R");
  const Eigen::MatrixXd lu = psd_sqrt(p.u, "brute_force_joint U");
  const Eigen::MatrixXd lp0 = psd_sqrt(p.p0, "brute_force_joint P0");

  JointGaussian joint;
  joint.T = T;
  joint.o = o;
  joint.i = i;
  const Eigen::Index dim = T * o + (T - 1) * i;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(dim, n_cols);
  joint.mean.resize(dim);

  Eigen::MatrixXd zw = Eigen::MatrixXd::Zero(z, n_cols);
  zw.block(0, 0, z, z) = lp0;
  Eigen::VectorXd zb = p.m0;
  for (Eigen::Index t = 1; t <= T; ++t) {
    if (t >= 2) {
      const Eigen::Index noise_off = z + (t - 2) * (i + z);
      Eigen::MatrixXd uw = p.d * zw;
      uw.block(0, noise_off, i, i) += lu;
      const Eigen::VectorXd ub = p.d * zb;
      w.block(joint.u_offset(t - 1), 0, i, n_cols) = uw;
      joint.mean.segment(joint.u_offset(t - 1), i) = ub;
      zw = p.a * zw + p.b * uw;
      zw.block(0, noise_off + i, z, z) += lq;
      zb = p.a * zb + p.b * ub;
    }
    Eigen::MatrixXd xw = p.c * zw;
    xw.block(0, v_base + (t - 1) * o, o, o) += lr;
    w.block(joint.x_offset(t - 1), 0, o, n_cols) = xw;
    joint.mean.segment(joint.x_offset(t - 1), o) = p.c * zb;
  }
  joint.cov = w * w.transpose();
  return joint;
}

double JointGaussian::logpdf(const Eigen::VectorXd& value) const {
  if (value.size() != dim()) {
    throw std::invalid_argument("JointGaussian::logpdf: value has wrong length");
  }
  const auto llt = chol_ladder(cov, "joint covariance");
  return mvn_logpdf_llt(value - mean, llt);
}

Eigen::VectorXd stack_record(const data::PatientRecord& record) {
  const Eigen::Index T = record.steps(), o = record.obs_dim(), i = record.int_dim();
  Eigen::VectorXd out(T * o + (T - 1) * i);
  for (Eigen::Index t = 0; t < T; ++t) {
    out.segment(t * o, o) = record.x.row(t).transpose();
  }
  for (Eigen::Index t = 1; t < T; ++t) {
    out.segment(T * o + (t - 1) * i, i) = record.u.row(t).transpose();
  }
  return out;
}

ConditionedGaussian condition_gaussian(const Eigen::VectorXd& mean,
                                       const Eigen::MatrixXd& cov,
                                       const std::vector<Eigen::Index>& kept,
                                       const std::vector<Eigen::Index>& given,
                                       const Eigen::VectorXd& given_values) {
  if (static_cast<Eigen::Index>(given.size()) != given_values.size()) {
    throw std::invalid_argument("condition_gaussian: value count mismatch");
  }
  const Eigen::Index na = static_cast<Eigen::Index>(kept.size());
  const Eigen::Index nb = static_cast<Eigen::Index>(given.size());
  Eigen::VectorXd mu_a(na), mu_b(nb);
  Eigen::MatrixXd s_aa(na, na), s_ab(na, nb), s_bb(nb, nb);
  for (Eigen::Index r = 0; r < na; ++r) {
    mu_a[r] = mean[kept[r]];
    for (Eigen::Index c2 = 0; c2 < na; ++c2) s_aa(r, c2) = cov(kept[r], kept[c2]);
    for (Eigen::Index c2 = 0; c2 < nb; ++c2) s_ab(r, c2) = cov(kept[r], given[c2]);
  }
  for (Eigen::Index r = 0; r < nb; ++r) {
    mu_b[r] = mean[given[r]];
    for (Eigen::Index c2 = 0; c2 < nb; ++c2) s_bb(r, c2) = cov(given[r], given[c2]);
  }
  const auto llt = chol_ladder(s_bb, "conditioning covariance");
  ConditionedGaussian out;
  out.mean = mu_a + s_ab * llt.solve(given_values - mu_b);
  Eigen::MatrixXd cc = s_aa - s_ab * llt.solve(s_ab.transpose());
  out.cov = 0.5 * (cc + cc.transpose());
  return out;
}

ForecastResult kf_forecast(const data::PatientRecord& record, Eigen::Index t_star,
                           Eigen::Index horizon, const LgssmParams& p) {
  if (t_star < 1 || t_star > record.steps()) {
    throw std::invalid_argument("kf_forecast: t_star outside the record");
  }
  if (horizon < 0) {
    throw std::invalid_argument("kf_forecast: negative horizon");
  }
  const FilterResult filtered =
      kf_filter(record.prefix(t_star), p, /*include_interventions=*/true);
  GaussianBelief belief = filtered.beliefs.back();

  const Eigen::Index o = p.o_dim(), i = p.i_dim();
  ForecastResult out;
  out.origin = t_star;
  out.obs_mean.resize(horizon, o);
  out.obs_var.resize(horizon, o);
  out.int_mean.resize(horizon, i);
  out.int_var.resize(horizon, i);
  const Eigen::MatrixXd abd = p.a + p.b * p.d;
  for (Eigen::Index h = 0; h < horizon; ++h) {
    // Intervention at the next step, from the current state belief.
    const Eigen::MatrixXd s_u = p.d * belief.cov * p.d.transpose() + p.u;
    out.int_mean.row(h) = (p.d * belief.mean).transpose();
    out.int_var.row(h) = s_u.diagonal().transpose();
    // Exact state propagation with the intervention integrated out:
    // z' = (A + B D) z + B n_u + w.
    const Eigen::VectorXd mean = abd * belief.mean;
    Eigen::MatrixXd cov = abd * belief.cov * abd.transpose() +
                          p.b * p.u * p.b.transpose() + p.q;
    belief.mean = mean;
    belief.cov = 0.5 * (cov + cov.transpose());
    const Eigen::MatrixXd s_x = p.c * belief.cov * p.c.transpose() + p.r;
    out.obs_mean.row(h) = (p.c * belief.mean).transpose();
    out.obs_var.row(h) = s_x.diagonal().transpose();
  }
  return out;
}

}  // namespace ssmcast::lgssm
