#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <vector>

#include "ssmcast/autodiff.hpp"
#include "ssmcast/forecast_result.hpp"
#include "ssmcast/record.hpp"

namespace ssmcast::lgssm {

// Linear-Gaussian state space model over latent z with controlled dynamics,
// observation emission and intervention feedback:
//   z_t ~ N(A z_{t-1} + B u_t, Q)     z_1 ~ N(m0, P0)
//   x_t ~ N(C z_t, R)
//   u_t ~ N(D z_{t-1}, U)             u_1 fixed to zero
struct LgssmParams {
  Eigen::MatrixXd a;   // z x z
  Eigen::MatrixXd b;   // z x i
  Eigen::MatrixXd c;   // o x z
  Eigen::MatrixXd d;   // i x z
  Eigen::MatrixXd q;   // z x z
  Eigen::MatrixXd r;   // o x o
  Eigen::MatrixXd u;   // i x i
  Eigen::VectorXd m0;  // z
  Eigen::MatrixXd p0;  // z x z

  Eigen::Index z_dim() const { return a.rows(); }
  Eigen::Index o_dim() const { return c.rows(); }
  Eigen::Index i_dim() const { return d.rows(); }
  void validate() const;  // dimension consistency; covariances square
};

struct GaussianBelief {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

GaussianBelief kf_step_predict(const GaussianBelief& belief,
                               const Eigen::VectorXd& u, const LgssmParams& p);

struct UpdateResult {
  GaussianBelief belief;
  double loglik = 0.0;
};

UpdateResult kf_step_update(const GaussianBelief& prior, const Eigen::VectorXd& x,
                            const LgssmParams& p);

struct FilterResult {
  std::vector<GaussianBelief> beliefs;  // one per grid step, after the x update
  double total_loglik = 0.0;
};

// Runs the filter over a fully imputed record. With include_interventions the
// total is the exact joint log-likelihood of (x_{1:T}, u_{2:T}) and each
// belief additionally conditions on the interventions through D; without it
// the interventions act as exogenous controls and the total is the
// log-likelihood of the observations given them. The first intervention row
// is never read.
FilterResult kf_filter(const data::PatientRecord& record, const LgssmParams& p,
                       bool include_interventions);

// Exact joint Gaussian of the stacked vector [x_1..x_T, u_2..u_T], assembled
// by unrolling the model linearly over all noise sources. Cost grows with
// (T(o+i))^3; refuses T > 6.
struct JointGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  Eigen::Index T = 0, o = 0, i = 0;

  Eigen::Index x_offset(Eigen::Index t) const { return t * o; }            // 0-based step
  Eigen::Index u_offset(Eigen::Index t) const { return T * o + (t - 1) * i; }  // t >= 1
  Eigen::Index dim() const { return T * o + (T - 1) * i; }
  double logpdf(const Eigen::VectorXd& value) const;
};

JointGaussian brute_force_joint(const LgssmParams& p, Eigen::Index T);

// Flattens a record into the brute-force stacking order [x rows, u rows 2..T].
Eigen::VectorXd stack_record(const data::PatientRecord& record);

struct ConditionedGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Gaussian conditioning: distribution of the `kept` coordinates given exact
// values for the `given` coordinates.
ConditionedGaussian condition_gaussian(const Eigen::VectorXd& mean,
                                       const Eigen::MatrixXd& cov,
                                       const std::vector<Eigen::Index>& kept,
                                       const std::vector<Eigen::Index>& given,
                                       const Eigen::VectorXd& given_values);

// Filters the first t_star steps, then rolls the belief forward H steps,
// emitting the intervention distribution from the current belief and folding
// its uncertainty into the state through B (exact augmented-Gaussian update).
ForecastResult kf_forecast(const data::PatientRecord& record, Eigen::Index t_star,
                           Eigen::Index horizon, const LgssmParams& p);

struct FitConfig {
  int max_iters = 60;
  double learning_rate = 0.05;
  int batch_size = 0;             // 0 = full batch
  std::uint64_t seed = 0;         // batch shuffling
  bool include_interventions = true;
  bool backtracking = false;      // full-batch descent with step halving
  double variance_floor = 1e-6;
  int threads = 1;
  bool verbose = false;
};

// Maximum-likelihood fit by gradient ascent through the filter recursions;
// covariances are parameterized as F F^T + floor * I so they stay PSD.
LgssmParams fit_lgssm(const std::vector<data::PatientRecord>& dataset,
                      const FitConfig& config,
                      const LgssmParams* init = nullptr,
                      std::vector<double>* loss_history = nullptr);

// Trainable representation used by fit_lgssm and the checkpoint format:
// matrices A, B, C, D and m0 verbatim, covariances as unconstrained factors
// F* with cov = F F^T + floor * I.
diffmath::ParameterSet to_parameter_set(const LgssmParams& p, double floor);
LgssmParams from_parameter_set(const diffmath::ParameterSet& ps, double floor);

// Records the exact filter log-likelihood of one record on the tape, using
// the trainable representation ids. The same recursion the dense filter runs,
// so gradients flow through every step.
diffmath::ValueId record_joint_loglik(
    diffmath::Tape& tape, const std::map<std::string, diffmath::ValueId>& ids,
    const data::PatientRecord& record, bool include_interventions, double floor);

}  // namespace ssmcast::lgssm
