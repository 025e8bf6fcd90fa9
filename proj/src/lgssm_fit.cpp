#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>

#include "ssmcast/diff_linalg.hpp"
#include "ssmcast/eigen_bridge.hpp"
#include "ssmcast/lgssm.hpp"
#include "ssmcast/optim.hpp"
#include "ssmcast/parallel.hpp"
#include "ssmcast/rng.hpp"

namespace ssmcast::lgssm {

namespace diff = ssmcast::diffmath;

namespace {

using diff::to_tensor;

// Factor F with F F^T = max(m - floor * I, 0) in the PSD order.
Eigen::MatrixXd cov_factor(const Eigen::MatrixXd& m, double floor) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      0.5 * (m + m.transpose()) -
      floor * Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  Eigen::VectorXd eigs = es.eigenvalues();
  for (Eigen::Index j = 0; j < eigs.size(); ++j) {
    eigs[j] = std::sqrt(std::max(eigs[j], 0.0));
  }
  return es.eigenvectors() * eigs.asDiagonal();
}

// u-vector or x-row as a tape constant.
diff::ValueId row_const(diff::Tape& t, const Eigen::MatrixXd& m, Eigen::Index row) {
  std::vector<double> v(m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) v[c] = m(row, c);
  return t.constant(diff::Tensor::vector(std::move(v)));
}

struct TapeBelief {
  diff::ValueId mean = -1;  // rank-1 z
  diff::ValueId cov = -1;   // z x z
};

// Conditions the belief on y ~ N(H z, noise) and returns the predictive
// log-likelihood id; mirrors the dense filter's update exactly.
diff::ValueId tape_observe(diff::Tape& t, TapeBelief& belief, diff::ValueId h,
                           diff::ValueId noise, diff::ValueId y,
                           diff::ValueId eye_z) {
  const diff::ValueId hp = t.matmul(h, belief.cov);            // od x z
  const diff::ValueId s =
      t.add(t.matmul(hp, h, false, true), noise);              // od x od
  const diff::TapeChol chol = diff::chol_lower(t, s, 1e-9);
  const diff::ValueId mean_y = t.matmul(h, belief.mean);
  const diff::ValueId ll = diff::mvn_logpdf(t, y, mean_y, chol);
  const diff::ValueId bt = t.matmul(belief.cov, h, false, true);  // z x od
  const diff::ValueId k = diff::chol_solve_transposed_rhs(t, chol, bt);
  const diff::ValueId innov = t.sub(y, mean_y);
  belief.mean = t.add(belief.mean, t.matmul(k, innov));
  // Joseph form keeps the covariance symmetric PSD under roundoff.
  const diff::ValueId ikh = t.sub(eye_z, t.matmul(k, h));
  const diff::ValueId left = t.matmul(t.matmul(ikh, belief.cov), ikh, false, true);
  const diff::ValueId right = t.matmul(t.matmul(k, noise), k, false, true);
  belief.cov = t.add(left, right);
  return ll;
}

}  // namespace

diff::ParameterSet to_parameter_set(const LgssmParams& p, double floor) {
  p.validate();
  diff::ParameterSet ps;
  ps.set("A", to_tensor(p.a));
  ps.set("B", to_tensor(p.b));
  ps.set("C", to_tensor(p.c));
  ps.set("D", to_tensor(p.d));
  ps.set("Fq", to_tensor(cov_factor(p.q, floor)));
  ps.set("Fr", to_tensor(cov_factor(p.r, floor)));
  ps.set("Fu", to_tensor(cov_factor(p.u, floor)));
  ps.set("Fp0", to_tensor(cov_factor(p.p0, floor)));
  ps.set("m0", to_tensor(p.m0));
  return ps;
}

LgssmParams from_parameter_set(const diff::ParameterSet& ps, double floor) {
  LgssmParams p;
  p.a = diff::to_matrix(ps.at("A"));
  p.b = diff::to_matrix(ps.at("B"));
  p.c = diff::to_matrix(ps.at("C"));
  p.d = diff::to_matrix(ps.at("D"));
  const auto expand = [floor](const diff::Tensor& f) {
    const Eigen::MatrixXd fe = diff::to_matrix(f);
    return (fe * fe.transpose() +
            floor * Eigen::MatrixXd::Identity(fe.rows(), fe.rows()))
        .eval();
  };
  p.q = expand(ps.at("Fq"));
  p.r = expand(ps.at("Fr"));
  p.u = expand(ps.at("Fu"));
  p.p0 = expand(ps.at("Fp0"));
  p.m0 = diff::to_matrix(ps.at("m0"));
  p.validate();
  return p;
}

diff::ValueId record_joint_loglik(
    diff::Tape& t, const std::map<std::string, diff::ValueId>& ids,
    const data::PatientRecord& record, bool include_interventions, double floor) {
  if (!record.fully_finite()) {
    throw std::invalid_argument("record '" + record.patient_id +
                                "' has non-finite entries; impute first");
  }
  const auto id = [&](const char* name) { return ids.at(name); };
  const std::int32_t z = t.result_rows(id("A"));
  const std::int32_t o = t.result_rows(id("C"));
  const std::int32_t i = t.result_rows(id("D"));
  if (record.obs_dim() != o || record.int_dim() != i) {
    throw std::invalid_argument("record dimensions do not match the model");
  }
  const auto cov_full = [&](const char* factor, std::int32_t n) {
    const diff::ValueId f = id(factor);
    const diff::ValueId gram = t.matmul(f, f, false, true);
    const Eigen::MatrixXd floor_eye = floor * Eigen::MatrixXd::Identity(n, n);
    return t.add(gram, t.constant(to_tensor(floor_eye)));
  };
  const diff::ValueId q_full = cov_full("Fq", z);
  const diff::ValueId r_full = cov_full("Fr", o);
  const diff::ValueId u_full = cov_full("Fu", i);
  const diff::ValueId eye_z = t.constant(diff::Tensor::identity(z));

  TapeBelief belief{id("m0"), cov_full("Fp0", z)};
  diff::ValueId total = -1;
  const Eigen::Index T = record.steps();
  for (Eigen::Index step = 0; step < T; ++step) {
    if (step > 0) {
      const diff::ValueId u_t = row_const(t, record.u, step);
      if (include_interventions) {
        const diff::ValueId ll =
            tape_observe(t, belief, id("D"), u_full, u_t, eye_z);
        total = total < 0 ? ll : t.add(total, ll);
      }
      belief.mean =
          t.add(t.matmul(id("A"), belief.mean), t.matmul(id("B"), u_t));
      belief.cov = t.add(
          t.matmul(t.matmul(id("A"), belief.cov), id("A"), false, true), q_full);
    }
    const diff::ValueId ll = tape_observe(t, belief, id("C"), r_full,
                                          row_const(t, record.x, step), eye_z);
    total = total < 0 ? ll : t.add(total, ll);
  }
  return total;
}

LgssmParams fit_lgssm(const std::vector<data::PatientRecord>& dataset,
                      const FitConfig& config, const LgssmParams* init,
                      std::vector<double>* loss_history) {
  if (dataset.empty()) {
    throw std::invalid_argument("fit_lgssm: empty dataset");
  }
  const Eigen::Index o = dataset.front().obs_dim();
  const Eigen::Index i = dataset.front().int_dim();
  for (const auto& rec : dataset) {
    if (rec.obs_dim() != o || rec.int_dim() != i || rec.steps() < 1) {
      throw std::invalid_argument("fit_lgssm: inconsistent record shapes");
    }
    if (!rec.fully_finite()) {
      throw std::invalid_argument("fit_lgssm: record '" + rec.patient_id +
                                  "' has non-finite entries");
    }
  }
  const double floor = config.variance_floor;

  diff::ParameterSet params;
  if (init) {
    params = to_parameter_set(*init, floor);
  } else {
    // Stable default: slow identity dynamics, small random couplings so the
    // gradients break symmetry deterministically.
    const Eigen::Index z = std::min<Eigen::Index>(std::max<Eigen::Index>(o, 1), 8);
    Rng rng(mix_seed(config.seed, fnv1a64("lgssm-init")));
    const auto rand_mat = [&](Eigen::Index r2, Eigen::Index c2, double s) {
      Eigen::MatrixXd m(r2, c2);
      for (Eigen::Index a2 = 0; a2 < r2; ++a2) {
        for (Eigen::Index b2 = 0; b2 < c2; ++b2) m(a2, b2) = s * rng.normal();
      }
      return m;
    };
    LgssmParams start;
    start.a = 0.9 * Eigen::MatrixXd::Identity(z, z);
    start.b = rand_mat(z, i, 0.1);
    start.c = rand_mat(o, z, 0.3);
    start.d = rand_mat(i, z, 0.1);
    start.q = 0.1 * Eigen::MatrixXd::Identity(z, z);
    start.r = 0.5 * Eigen::MatrixXd::Identity(o, o);
    start.u = 0.5 * Eigen::MatrixXd::Identity(i, i);
    start.m0 = Eigen::VectorXd::Zero(z);
    start.p0 = Eigen::MatrixXd::Identity(z, z);
    params = to_parameter_set(start, floor);
  }

  const int threads = resolve_thread_count(config.threads);
  struct RecordGrad {
    double loss = 0.0;
    diff::ParameterSet grads;
  };
  // Loss per record: negative joint log-likelihood, averaged over the batch.
  const auto eval_batch = [&](const diff::ParameterSet& at,
                              const std::vector<std::size_t>& batch,
                              bool want_grads) {
    auto results = parallel_map_n<RecordGrad>(
        batch.size(),
        [&](std::size_t bi) {
          thread_local diff::Tape tape;
          tape.reset();
          std::map<std::string, diff::ValueId> ids;
          for (const auto& [name, value] : at) {
            ids.emplace(name, tape.input(value, name));
          }
          const diff::ValueId ll = record_joint_loglik(
              tape, ids, dataset[batch[bi]], config.include_interventions, floor);
          RecordGrad out;
          out.loss = -tape.scalar_value(ll);
          if (want_grads) {
            tape.backward(ll);
            for (const auto& [name, vid] : ids) {
              diff::Tensor g = tape.grad(vid);
              for (std::size_t e = 0; e < g.size(); ++e) g[e] = -g[e];
              out.grads.set(name, std::move(g));
            }
          }
          return out;
        },
        threads);
    RecordGrad sum;
    sum.loss = 0.0;
    for (std::size_t k = 0; k < results.size(); ++k) {
      sum.loss += results[k].loss;
      if (want_grads) {
        if (sum.grads.empty()) {
          sum.grads = std::move(results[k].grads);
        } else {
          diff::accumulate(sum.grads, results[k].grads);
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    sum.loss *= inv;
    if (want_grads) diff::scale_params(sum.grads, inv);
    return sum;
  };

  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), 0);

  if (config.backtracking) {
    double lr = config.learning_rate;
    RecordGrad cur = eval_batch(params, all, true);
    if (loss_history) loss_history->push_back(cur.loss);
    for (int iter = 0; iter < config.max_iters && lr > 1e-12; ++iter) {
      diff::ParameterSet trial = params;
      diff::axpy(trial, cur.grads, -lr);
      RecordGrad next = eval_batch(trial, all, false);
      int halvings = 0;
      while (next.loss > cur.loss && halvings < 30) {
        lr *= 0.5;
        trial = params;
        diff::axpy(trial, cur.grads, -lr);
        next = eval_batch(trial, all, false);
        ++halvings;
      }
      if (next.loss > cur.loss) break;  // no improving step at any scale
      params = std::move(trial);
      cur = eval_batch(params, all, true);
      if (loss_history) loss_history->push_back(cur.loss);
      if (config.verbose) {
        std::fprintf(stderr, "iter %d loss %.6f lr %.3g\n", iter, cur.loss, lr);
      }
    }
  } else {
    diff::Adam adam({config.learning_rate, 0.9, 0.999, 1e-8});
    Rng shuffle_rng(mix_seed(config.seed, fnv1a64("lgssm-batches")));
    const std::size_t bs = config.batch_size > 0
                               ? std::min<std::size_t>(config.batch_size, all.size())
                               : all.size();
    for (int iter = 0; iter < config.max_iters; ++iter) {
      std::vector<std::size_t> order = all;
      for (std::size_t k = order.size(); k > 1; --k) {
        std::swap(order[k - 1], order[shuffle_rng.below(k)]);
      }
      double epoch_loss = 0.0;
      std::size_t seen = 0;
      for (std::size_t start = 0; start < order.size(); start += bs) {
        const std::size_t stop = std::min(order.size(), start + bs);
        const std::vector<std::size_t> batch(order.begin() + start,
                                             order.begin() + stop);
        RecordGrad res = eval_batch(params, batch, true);
        adam.step(params, res.grads);
        epoch_loss += res.loss * static_cast<double>(batch.size());
        seen += batch.size();
      }
      epoch_loss /= static_cast<double>(seen);
      if (!std::isfinite(epoch_loss)) {
        throw std::runtime_error("fit_lgssm: loss became non-finite at epoch " +
                                 std::to_string(iter));
      }
      if (loss_history) loss_history->push_back(epoch_loss);
      if (config.verbose) {
        std::fprintf(stderr, "epoch %d loss %.6f\n", iter, epoch_loss);
      }
    }
  }
  return from_parameter_set(params, floor);
}

}  // namespace ssmcast::lgssm
