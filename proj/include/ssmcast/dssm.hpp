#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ssmcast/autodiff.hpp"
#include "ssmcast/forecast_result.hpp"
#include "ssmcast/lgssm.hpp"
#include "ssmcast/nets.hpp"
#include "ssmcast/record.hpp"
#include "ssmcast/tape.hpp"

namespace ssmcast::dssm {

// Effective variances are exp(log-variance) + this floor, so every density
// and Cholesky stays well posed no matter where the optimizer wanders.
inline constexpr double kVarianceFloor = 1e-6;

struct DiagGaussian {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

// Generative model: networks for the transition A, control B, emission C and
// intervention emission D, diagonal noise as log-variances, and the initial
// state prior (m0, logP0).
struct DeepSsmParams {
  Mlp transition;    // z -> z
  Mlp control;       // i -> z
  Mlp emission;      // z -> o
  Mlp intervention;  // z -> i
  Eigen::VectorXd log_q;   // z
  Eigen::VectorXd log_r;   // o
  Eigen::VectorXd log_u;   // i
  Eigen::VectorXd m0;      // z
  Eigen::VectorXd log_p0;  // z

  Eigen::Index z_dim() const { return m0.size(); }
  Eigen::Index o_dim() const { return log_r.size(); }
  Eigen::Index i_dim() const { return log_u.size(); }
  void validate() const;
};

// Filtering-style recurrent encoder: one forward LSTM over (x_t, u_t), then a
// combiner network mapping (h_t, z_{t-1}) to the posterior mean and
// log-variance (2z outputs, mean first).
struct EncoderParams {
  LstmCell cell;
  Mlp combiner;

  Eigen::Index hidden_dim() const { return cell.hidden_dim(); }
  Eigen::Index z_dim() const { return combiner.out_dim() / 2; }
  void validate() const;
};

// One evidence-bound evaluation, split into its three sums. The identity
// elbo = obs_recon + int_recon - kl holds by construction. Per-step layout:
// system identification fills obs (T), int (T-1, term t scores u_{t+1}) and
// kl (T, index 0 is the initial-state term); the forecast bound fills obs and
// int with the horizon terms and kl over every conditioned plus rolled-out
// step, where rollout entries are zero by construction.
struct ElboBreakdown {
  double obs_recon = 0.0;
  double int_recon = 0.0;
  double kl = 0.0;
  double elbo = 0.0;
  std::vector<double> per_step_obs;
  std::vector<double> per_step_int;
  std::vector<double> per_step_kl;
};

// Pre-drawn standard normals: a z-vector per (sample, step) for state noise
// and an i-vector per (sample, step) for sampled intervention forecasts.
// Rebuilding with the same arguments reproduces the draws bit for bit.
struct NoisePlan {
  std::size_t n_samples = 0;
  std::size_t steps = 0;
  Eigen::Index z_dim = 0;
  Eigen::Index i_dim = 0;
  std::vector<double> state;
  std::vector<double> control;

  static NoisePlan make(std::size_t n_samples, std::size_t steps,
                        Eigen::Index z_dim, Eigen::Index i_dim,
                        std::uint64_t seed);
  static NoisePlan zeros(std::size_t n_samples, std::size_t steps,
                         Eigen::Index z_dim, Eigen::Index i_dim);

  std::span<const double> state_at(std::size_t sample, std::size_t step) const;
  std::span<const double> control_at(std::size_t sample, std::size_t step) const;
};

// Hidden states h_1..h_{t_end} of the encoder LSTM run over the first t_end
// grid steps (concatenated observation and intervention rows).
std::vector<Eigen::VectorXd> encode(const data::PatientRecord& record,
                                    Eigen::Index t_end,
                                    const EncoderParams& enc);

// q(z_t | h_t, z_{t-1}); pass z_prev = m0 at the first step.
DiagGaussian posterior_step(const Eigen::VectorXd& h,
                            const Eigen::VectorXd& z_prev,
                            const EncoderParams& enc);

// p(z_t | z_{t-1}, u_t); t is 1-based and t == 1 returns the initial prior
// N(m0, exp(logP0)) regardless of the inputs.
DiagGaussian prior_step(const Eigen::VectorXd& z_prev,
                        const Eigen::VectorXd& u_t, const DeepSsmParams& params,
                        Eigen::Index t);

DiagGaussian emit_observation(const Eigen::VectorXd& z,
                              const DeepSsmParams& params);
DiagGaussian emit_intervention(const Eigen::VectorXd& z,
                               const DeepSsmParams& params);

// Evidence bound for the whole record: observation terms over t = 1..T,
// intervention terms scoring u_{t+1} over t = 1..T-1, analytic KL between the
// posterior and prior steps over t = 2..T, plus the initial-state KL unless
// include_initial_kl is false.
ElboBreakdown elbo_system_id(const data::PatientRecord& record,
                             const DeepSsmParams& params,
                             const EncoderParams& enc, const NoisePlan& noise,
                             int n_samples, bool include_initial_kl = true);

// Forecast bound: the encoder conditions on steps 1..t_star only, states
// beyond roll out through the prior with sampled intervention forecasts, and
// reconstruction scores the recorded future over t_star+1..t_star+horizon.
ElboBreakdown elbo_forecast(const data::PatientRecord& record,
                            Eigen::Index t_star, Eigen::Index horizon,
                            const DeepSsmParams& params,
                            const EncoderParams& enc, const NoisePlan& noise,
                            int n_samples, bool include_initial_kl = true);

// Monte-Carlo predictive distribution: n_paths rollouts of the forecast
// bound's generative branch. Reported variance is the spread of the per-path
// emission means plus the emission variance (law of total variance for an
// equally weighted mixture). zero_noise propagates means exactly instead of
// sampling, which collapses the mixture for linear networks.
ForecastResult forecast(const data::PatientRecord& record, Eigen::Index t_star,
                        Eigen::Index horizon, const DeepSsmParams& params,
                        const EncoderParams& enc, int n_paths,
                        std::uint64_t seed, bool zero_noise = false);

// Trainable flat views. Generative names: A.*, B.*, C.*, D.*, logQ, logR,
// logU, m0, logP0; encoder names: enc.* for the cell, post.* for the
// combiner. The two name spaces are disjoint, so one merged set can carry a
// full model.
diffmath::ParameterSet to_parameter_set(const DeepSsmParams& params);
DeepSsmParams deep_from_parameter_set(const diffmath::ParameterSet& ps);
diffmath::ParameterSet to_parameter_set(const EncoderParams& enc);
EncoderParams encoder_from_parameter_set(const diffmath::ParameterSet& ps);

// Value ids of one recorded bound; elbo is the differentiable root.
struct ElboIds {
  diffmath::ValueId obs_recon = -1;
  diffmath::ValueId int_recon = -1;
  diffmath::ValueId kl = -1;
  diffmath::ValueId elbo = -1;
  std::vector<diffmath::ValueId> per_step_obs;
  std::vector<diffmath::ValueId> per_step_int;
  std::vector<diffmath::ValueId> per_step_kl;
};

// Tape-recorded bounds over registered parameter ids (both name spaces in one
// map); these carry the gradients for training.
ElboIds record_elbo_system_id(diffmath::Tape& t,
                              const std::map<std::string, diffmath::ValueId>& ids,
                              const data::PatientRecord& record,
                              const NoisePlan& noise, int n_samples,
                              bool include_initial_kl = true);
ElboIds record_elbo_forecast(diffmath::Tape& t,
                             const std::map<std::string, diffmath::ValueId>& ids,
                             const data::PatientRecord& record,
                             Eigen::Index t_star, Eigen::Index horizon,
                             const NoisePlan& noise, int n_samples,
                             bool include_initial_kl = true);

// Fresh models. Defaults follow the reference configuration: 3-layer MLPs of
// 32 units and an LSTM with 50 hidden units.
DeepSsmParams make_deep_ssm(Eigen::Index z, Eigen::Index o, Eigen::Index i,
                            std::uint64_t seed, Eigen::Index hidden = 32,
                            std::size_t layers = 3);
EncoderParams make_encoder(Eigen::Index z, Eigen::Index o, Eigen::Index i,
                           std::uint64_t seed, Eigen::Index lstm_hidden = 50,
                           Eigen::Index comb_hidden = 32,
                           std::size_t comb_layers = 3);

// Single-layer linear networks copying a linear-Gaussian model with diagonal
// covariances; off-diagonal entries must be zero.
DeepSsmParams deep_from_linear(const lgssm::LgssmParams& p);

}  // namespace ssmcast::dssm
