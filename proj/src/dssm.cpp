#include "ssmcast/dssm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "ssmcast/eigen_bridge.hpp"
#include "ssmcast/gaussian.hpp"
#include "ssmcast/rng.hpp"

namespace ssmcast::dssm {

namespace diff = ssmcast::diffmath;

void DeepSsmParams::validate() const {
  transition.validate();
  control.validate();
  emission.validate();
  intervention.validate();
  const Eigen::Index z = z_dim(), o = o_dim(), i = i_dim();
  if (z < 1 || o < 1 || i < 1) {
    throw std::invalid_argument("DeepSsmParams: dimensions must be positive");
  }
  if (transition.in_dim() != z || transition.out_dim() != z ||
      control.in_dim() != i || control.out_dim() != z ||
      emission.in_dim() != z || emission.out_dim() != o ||
      intervention.in_dim() != z || intervention.out_dim() != i) {
    throw std::invalid_argument("DeepSsmParams: network shapes disagree with "
                                "the declared dimensions");
  }
  if (log_q.size() != z || log_p0.size() != z) {
    throw std::invalid_argument("DeepSsmParams: state noise sizes must match z");
  }
  if (!log_q.allFinite() || !log_r.allFinite() || !log_u.allFinite() ||
      !m0.allFinite() || !log_p0.allFinite()) {
    throw std::invalid_argument("DeepSsmParams: non-finite noise parameters");
  }
}

void EncoderParams::validate() const {
  cell.validate();
  combiner.validate();
  if (combiner.out_dim() % 2 != 0) {
    throw std::invalid_argument("EncoderParams: combiner must emit mean and "
                                "log-variance pairs");
  }
  if (combiner.in_dim() != cell.hidden_dim() + z_dim()) {
    throw std::invalid_argument("EncoderParams: combiner input must be the "
                                "hidden state next to the previous latent");
  }
}

NoisePlan NoisePlan::make(std::size_t n_samples, std::size_t steps,
                          Eigen::Index z_dim, Eigen::Index i_dim,
                          std::uint64_t seed) {
  if (n_samples < 1 || z_dim < 1 || i_dim < 1) {
    throw std::invalid_argument("NoisePlan: need at least one sample and "
                                "positive dimensions");
  }
  NoisePlan plan;
  plan.n_samples = n_samples;
  plan.steps = steps;
  plan.z_dim = z_dim;
  plan.i_dim = i_dim;
  Rng rng(mix_seed(seed, fnv1a64("noise-plan")));
  plan.state.resize(n_samples * steps * static_cast<std::size_t>(z_dim));
  for (double& v : plan.state) v = rng.normal();
  plan.control.resize(n_samples * steps * static_cast<std::size_t>(i_dim));
  for (double& v : plan.control) v = rng.normal();
  return plan;
}

NoisePlan NoisePlan::zeros(std::size_t n_samples, std::size_t steps,
                           Eigen::Index z_dim, Eigen::Index i_dim) {
  NoisePlan plan = make(n_samples, steps, z_dim, i_dim, 0);
  std::fill(plan.state.begin(), plan.state.end(), 0.0);
  std::fill(plan.control.begin(), plan.control.end(), 0.0);
  return plan;
}

std::span<const double> NoisePlan::state_at(std::size_t sample,
                                            std::size_t step) const {
  if (sample >= n_samples || step >= steps) {
    throw std::out_of_range("NoisePlan: draw index out of range");
  }
  const std::size_t z = static_cast<std::size_t>(z_dim);
  return {state.data() + (sample * steps + step) * z, z};
}

std::span<const double> NoisePlan::control_at(std::size_t sample,
                                              std::size_t step) const {
  if (sample >= n_samples || step >= steps) {
    throw std::out_of_range("NoisePlan: draw index out of range");
  }
  const std::size_t i = static_cast<std::size_t>(i_dim);
  return {control.data() + (sample * steps + step) * i, i};
}

namespace {

Eigen::VectorXd floored_var(const Eigen::VectorXd& log_var) {
  return (log_var.array().exp() + kVarianceFloor).matrix();
}

Eigen::VectorXd apply_noise(const DiagGaussian& g, std::span<const double> eps) {
  Eigen::VectorXd out(g.mean.size());
  for (Eigen::Index j = 0; j < out.size(); ++j) {
    out[j] = g.mean[j] + std::sqrt(g.var[j]) * eps[static_cast<std::size_t>(j)];
  }
  return out;
}

void check_history(const data::PatientRecord& record, Eigen::Index t_end,
                   const char* who) {
  if (t_end < 1 || t_end > record.steps()) {
    throw std::invalid_argument(std::string(who) +
                                ": step range outside the record");
  }
  if (!record.prefix(t_end).fully_finite()) {
    throw std::invalid_argument(std::string(who) + ": record '" +
                                record.patient_id +
                                "' has non-finite entries; impute first");
  }
}

}  // namespace

std::vector<Eigen::VectorXd> encode(const data::PatientRecord& record,
                                    Eigen::Index t_end,
                                    const EncoderParams& enc) {
  enc.validate();
  check_history(record, t_end, "encode");
  if (enc.cell.in_dim() != record.obs_dim() + record.int_dim()) {
    throw std::invalid_argument("encode: cell input size does not match the "
                                "record channels");
  }
  std::vector<Eigen::VectorXd> hiddens;
  hiddens.reserve(static_cast<std::size_t>(t_end));
  LstmState st = LstmState::zero(enc.hidden_dim());
  Eigen::VectorXd in(enc.cell.in_dim());
  for (Eigen::Index t = 0; t < t_end; ++t) {
    in << record.x.row(t).transpose(), record.u.row(t).transpose();
    st = lstm_step(enc.cell, in, st);
    hiddens.push_back(st.h);
  }
  return hiddens;
}

DiagGaussian posterior_step(const Eigen::VectorXd& h,
                            const Eigen::VectorXd& z_prev,
                            const EncoderParams& enc) {
  const Eigen::Index z = enc.z_dim();
  if (h.size() != enc.hidden_dim() || z_prev.size() != z) {
    throw std::invalid_argument("posterior_step: size mismatch");
  }
  Eigen::VectorXd in(h.size() + z);
  in << h, z_prev;
  const Eigen::VectorXd out = mlp_forward(enc.combiner, in);
  return {out.head(z), floored_var(out.tail(z))};
}

DiagGaussian prior_step(const Eigen::VectorXd& z_prev,
                        const Eigen::VectorXd& u_t, const DeepSsmParams& params,
                        Eigen::Index t) {
  if (t < 1) {
    throw std::invalid_argument("prior_step: steps are 1-based");
  }
  if (t == 1) {
    return {params.m0, floored_var(params.log_p0)};
  }
  if (z_prev.size() != params.z_dim() || u_t.size() != params.i_dim()) {
    throw std::invalid_argument("prior_step: size mismatch");
  }
  return {mlp_forward(params.transition, z_prev) +
              mlp_forward(params.control, u_t),
          floored_var(params.log_q)};
}

DiagGaussian emit_observation(const Eigen::VectorXd& z,
                              const DeepSsmParams& params) {
  if (z.size() != params.z_dim()) {
    throw std::invalid_argument("emit_observation: latent size mismatch");
  }
  return {mlp_forward(params.emission, z), floored_var(params.log_r)};
}

DiagGaussian emit_intervention(const Eigen::VectorXd& z,
                               const DeepSsmParams& params) {
  if (z.size() != params.z_dim()) {
    throw std::invalid_argument("emit_intervention: latent size mismatch");
  }
  return {mlp_forward(params.intervention, z), floored_var(params.log_u)};
}

namespace {

// Bound parameter ids plus the derived effective-variance nodes.
struct TapedModel {
  MlpIds a, b, c, d, comb;
  LstmIds cell;
  diff::ValueId m0 = -1;
  diff::ValueId q_var = -1, r_var = -1, u_var = -1, p0_var = -1;
  std::int32_t z = 0, o = 0, i = 0;
};

TapedModel bind_model(diff::Tape& t,
                      const std::map<std::string, diff::ValueId>& ids) {
  TapedModel m;
  m.a = bind_mlp(ids, "A");
  m.b = bind_mlp(ids, "B");
  m.c = bind_mlp(ids, "C");
  m.d = bind_mlp(ids, "D");
  m.cell = bind_lstm(ids, "enc");
  m.comb = bind_mlp(ids, "post");
  const auto var_of = [&](const char* name) {
    return t.add_scalar(t.exp(ids.at(name)), kVarianceFloor);
  };
  m.q_var = var_of("logQ");
  m.r_var = var_of("logR");
  m.u_var = var_of("logU");
  m.p0_var = var_of("logP0");
  m.m0 = ids.at("m0");
  m.z = t.result_rows(m.m0);
  m.o = t.result_rows(ids.at("logR"));
  m.i = t.result_rows(ids.at("logU"));
  return m;
}

diff::ValueId row_const(diff::Tape& t, const Eigen::MatrixXd& m,
                        Eigen::Index row) {
  std::vector<double> v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    v[static_cast<std::size_t>(c)] = m(row, c);
  }
  return t.constant(diff::Tensor::vector(std::move(v)));
}

std::vector<diff::ValueId> taped_encode(diff::Tape& t, const TapedModel& m,
                                        const data::PatientRecord& record,
                                        Eigen::Index t_end) {
  const std::int32_t hidden = t.result_cols(m.cell.wh);
  LstmStateIds st{t.constant(diff::Tensor::zeros_vec(hidden)),
                  t.constant(diff::Tensor::zeros_vec(hidden))};
  std::vector<diff::ValueId> hiddens;
  hiddens.reserve(static_cast<std::size_t>(t_end));
  for (Eigen::Index step = 0; step < t_end; ++step) {
    const diff::ValueId in =
        t.concat2(row_const(t, record.x, step), row_const(t, record.u, step));
    st = lstm_step(t, m.cell, in, st);
    hiddens.push_back(st.h);
  }
  return hiddens;
}

// One posterior step on the tape: parameters of q(z_t | .) and the sample.
struct TapedPosterior {
  diff::ValueId mean = -1;
  diff::ValueId var = -1;
  diff::ValueId sample = -1;
};

TapedPosterior taped_posterior(diff::Tape& t, const TapedModel& m,
                               diff::ValueId h, diff::ValueId z_prev,
                               std::span<const double> eps) {
  const diff::ValueId out = mlp_forward(t, m.comb, t.concat2(h, z_prev));
  TapedPosterior q;
  q.mean = t.slice(out, 0, m.z);
  q.var = t.add_scalar(t.exp(t.slice(out, m.z, m.z)), kVarianceFloor);
  q.sample = diff::reparam_sample(t, q.mean, q.var, eps);
  return q;
}

diff::ValueId average_terms(diff::Tape& t, const std::vector<diff::ValueId>& v,
                            int n) {
  if (v.empty()) return t.constant_scalar(0.0);
  diff::ValueId s = v.front();
  for (std::size_t k = 1; k < v.size(); ++k) s = t.add(s, v[k]);
  return t.scale(s, 1.0 / static_cast<double>(n));
}

diff::ValueId total_of(diff::Tape& t, const std::vector<diff::ValueId>& v) {
  if (v.empty()) return t.constant_scalar(0.0);
  diff::ValueId s = v.front();
  for (std::size_t k = 1; k < v.size(); ++k) s = t.add(s, v[k]);
  return s;
}

void check_plan(const NoisePlan& noise, int n_samples, Eigen::Index steps,
                Eigen::Index z, Eigen::Index i) {
  if (n_samples < 1) {
    throw std::invalid_argument("evidence bound: n_samples must be positive");
  }
  if (static_cast<std::size_t>(n_samples) > noise.n_samples ||
      static_cast<std::size_t>(steps) > noise.steps) {
    throw std::invalid_argument("evidence bound: noise plan is too small");
  }
  if (noise.z_dim != z || noise.i_dim != i) {
    throw std::invalid_argument("evidence bound: noise plan dimensions do not "
                                "match the model");
  }
}

ElboIds assemble(diff::Tape& t,
                 const std::vector<std::vector<diff::ValueId>>& obs_acc,
                 const std::vector<std::vector<diff::ValueId>>& int_acc,
                 const std::vector<std::vector<diff::ValueId>>& kl_acc,
                 int n_samples) {
  ElboIds out;
  for (const auto& terms : obs_acc) {
    out.per_step_obs.push_back(average_terms(t, terms, n_samples));
  }
  for (const auto& terms : int_acc) {
    out.per_step_int.push_back(average_terms(t, terms, n_samples));
  }
  for (const auto& terms : kl_acc) {
    out.per_step_kl.push_back(average_terms(t, terms, n_samples));
  }
  out.obs_recon = total_of(t, out.per_step_obs);
  out.int_recon = total_of(t, out.per_step_int);
  out.kl = total_of(t, out.per_step_kl);
  out.elbo = t.sub(t.add(out.obs_recon, out.int_recon), out.kl);
  return out;
}

[[noreturn]] void rethrow_with_step(Eigen::Index step, const std::exception& e) {
  throw std::runtime_error("evidence bound at time step " +
                           std::to_string(step) + ": " + e.what());
}

}  // namespace

ElboIds record_elbo_system_id(diff::Tape& t,
                              const std::map<std::string, diff::ValueId>& ids,
                              const data::PatientRecord& record,
                              const NoisePlan& noise, int n_samples,
                              bool include_initial_kl) {
  const TapedModel m = bind_model(t, ids);
  const Eigen::Index T = record.steps();
  check_history(record, T, "evidence bound");
  if (record.obs_dim() != m.o || record.int_dim() != m.i) {
    throw std::invalid_argument("evidence bound: record channels do not match "
                                "the model");
  }
  check_plan(noise, n_samples, T, m.z, m.i);

  const std::vector<diff::ValueId> hiddens = taped_encode(t, m, record, T);
  std::vector<std::vector<diff::ValueId>> obs_acc(static_cast<std::size_t>(T));
  std::vector<std::vector<diff::ValueId>> int_acc(
      static_cast<std::size_t>(T > 1 ? T - 1 : 0));
  std::vector<std::vector<diff::ValueId>> kl_acc(static_cast<std::size_t>(T));

  for (int s = 0; s < n_samples; ++s) {
    diff::ValueId z_prev = m.m0;
    for (Eigen::Index step = 1; step <= T; ++step) {
      const std::size_t idx = static_cast<std::size_t>(step - 1);
      try {
        const TapedPosterior q =
            taped_posterior(t, m, hiddens[idx], z_prev,
                            noise.state_at(static_cast<std::size_t>(s), idx));
        obs_acc[idx].push_back(diff::gaussian_diag_logpdf(
            t, row_const(t, record.x, step - 1),
            mlp_forward(t, m.c, q.sample), m.r_var));
        if (step < T) {
          int_acc[idx].push_back(diff::gaussian_diag_logpdf(
              t, row_const(t, record.u, step),
              mlp_forward(t, m.d, q.sample), m.u_var));
        }
        if (step == 1) {
          if (include_initial_kl) {
            kl_acc[idx].push_back(
                diff::kl_diag_gaussian(t, q.mean, q.var, m.m0, m.p0_var));
          }
        } else {
          const diff::ValueId prior_mean =
              t.add(mlp_forward(t, m.a, z_prev),
                    mlp_forward(t, m.b, row_const(t, record.u, step - 1)));
          kl_acc[idx].push_back(
              diff::kl_diag_gaussian(t, q.mean, q.var, prior_mean, m.q_var));
        }
        z_prev = q.sample;
      } catch (const std::invalid_argument&) {
        throw;
      } catch (const std::exception& e) {
        rethrow_with_step(step, e);
      }
    }
  }
  return assemble(t, obs_acc, int_acc, kl_acc, n_samples);
}

ElboIds record_elbo_forecast(diff::Tape& t,
                             const std::map<std::string, diff::ValueId>& ids,
                             const data::PatientRecord& record,
                             Eigen::Index t_star, Eigen::Index horizon,
                             const NoisePlan& noise, int n_samples,
                             bool include_initial_kl) {
  const TapedModel m = bind_model(t, ids);
  if (horizon < 0 || t_star + horizon > record.steps()) {
    throw std::invalid_argument("forecast bound: horizon runs past the record");
  }
  check_history(record, t_star + horizon, "forecast bound");
  if (record.obs_dim() != m.o || record.int_dim() != m.i) {
    throw std::invalid_argument("forecast bound: record channels do not match "
                                "the model");
  }
  check_plan(noise, n_samples, t_star + horizon, m.z, m.i);

  const std::vector<diff::ValueId> hiddens = taped_encode(t, m, record, t_star);
  std::vector<std::vector<diff::ValueId>> obs_acc(
      static_cast<std::size_t>(horizon));
  std::vector<std::vector<diff::ValueId>> int_acc(
      static_cast<std::size_t>(horizon));
  std::vector<std::vector<diff::ValueId>> kl_acc(
      static_cast<std::size_t>(t_star + horizon));

  for (int s = 0; s < n_samples; ++s) {
    const std::size_t sample = static_cast<std::size_t>(s);
    diff::ValueId z_prev = m.m0;
    for (Eigen::Index step = 1; step <= t_star; ++step) {
      const std::size_t idx = static_cast<std::size_t>(step - 1);
      try {
        const TapedPosterior q =
            taped_posterior(t, m, hiddens[idx], z_prev,
                            noise.state_at(sample, idx));
        if (step == 1) {
          if (include_initial_kl) {
            kl_acc[idx].push_back(
                diff::kl_diag_gaussian(t, q.mean, q.var, m.m0, m.p0_var));
          }
        } else {
          const diff::ValueId prior_mean =
              t.add(mlp_forward(t, m.a, z_prev),
                    mlp_forward(t, m.b, row_const(t, record.u, step - 1)));
          kl_acc[idx].push_back(
              diff::kl_diag_gaussian(t, q.mean, q.var, prior_mean, m.q_var));
        }
        z_prev = q.sample;
      } catch (const std::invalid_argument&) {
        throw;
      } catch (const std::exception& e) {
        rethrow_with_step(step, e);
      }
    }
    // Rollout: the proposal equals the prior here, so no KL terms accrue.
    for (Eigen::Index step = t_star + 1; step <= t_star + horizon; ++step) {
      const std::size_t idx = static_cast<std::size_t>(step - 1);
      const std::size_t hor = static_cast<std::size_t>(step - t_star - 1);
      try {
        const diff::ValueId d_mean = mlp_forward(t, m.d, z_prev);
        int_acc[hor].push_back(diff::gaussian_diag_logpdf(
            t, row_const(t, record.u, step - 1), d_mean, m.u_var));
        const diff::ValueId u_hat =
            diff::reparam_sample(t, d_mean, m.u_var,
                                 noise.control_at(sample, idx));
        const diff::ValueId prior_mean = t.add(mlp_forward(t, m.a, z_prev),
                                               mlp_forward(t, m.b, u_hat));
        const diff::ValueId z_t = diff::reparam_sample(
            t, prior_mean, m.q_var, noise.state_at(sample, idx));
        obs_acc[hor].push_back(diff::gaussian_diag_logpdf(
            t, row_const(t, record.x, step - 1), mlp_forward(t, m.c, z_t),
            m.r_var));
        z_prev = z_t;
      } catch (const std::invalid_argument&) {
        throw;
      } catch (const std::exception& e) {
        rethrow_with_step(step, e);
      }
    }
  }
  return assemble(t, obs_acc, int_acc, kl_acc, n_samples);
}

namespace {

std::map<std::string, diff::ValueId> register_model(
    diff::Tape& t, const DeepSsmParams& params, const EncoderParams& enc) {
  params.validate();
  enc.validate();
  if (enc.z_dim() != params.z_dim()) {
    throw std::invalid_argument("encoder and generative model disagree on the "
                                "latent dimension");
  }
  std::map<std::string, diff::ValueId> ids;
  for (const diff::ParameterSet& ps :
       {to_parameter_set(params), to_parameter_set(enc)}) {
    for (const auto& [name, value] : ps) {
      ids.emplace(name, t.input(value, name));
    }
  }
  return ids;
}

ElboBreakdown read_breakdown(const diff::Tape& t, const ElboIds& ids) {
  ElboBreakdown b;
  b.obs_recon = t.scalar_value(ids.obs_recon);
  b.int_recon = t.scalar_value(ids.int_recon);
  b.kl = t.scalar_value(ids.kl);
  b.elbo = t.scalar_value(ids.elbo);
  for (const diff::ValueId id : ids.per_step_obs) {
    b.per_step_obs.push_back(t.scalar_value(id));
  }
  for (const diff::ValueId id : ids.per_step_int) {
    b.per_step_int.push_back(t.scalar_value(id));
  }
  for (const diff::ValueId id : ids.per_step_kl) {
    b.per_step_kl.push_back(t.scalar_value(id));
  }
  return b;
}

}  // namespace

ElboBreakdown elbo_system_id(const data::PatientRecord& record,
                             const DeepSsmParams& params,
                             const EncoderParams& enc, const NoisePlan& noise,
                             int n_samples, bool include_initial_kl) {
  diff::Tape tape;
  const auto ids = register_model(tape, params, enc);
  return read_breakdown(tape, record_elbo_system_id(tape, ids, record, noise,
                                                    n_samples,
                                                    include_initial_kl));
}

ElboBreakdown elbo_forecast(const data::PatientRecord& record,
                            Eigen::Index t_star, Eigen::Index horizon,
                            const DeepSsmParams& params,
                            const EncoderParams& enc, const NoisePlan& noise,
                            int n_samples, bool include_initial_kl) {
  diff::Tape tape;
  const auto ids = register_model(tape, params, enc);
  return read_breakdown(tape,
                        record_elbo_forecast(tape, ids, record, t_star, horizon,
                                             noise, n_samples,
                                             include_initial_kl));
}

ForecastResult forecast(const data::PatientRecord& record, Eigen::Index t_star,
                        Eigen::Index horizon, const DeepSsmParams& params,
                        const EncoderParams& enc, int n_paths,
                        std::uint64_t seed, bool zero_noise) {
  params.validate();
  enc.validate();
  if (n_paths < 1) {
    throw std::invalid_argument("forecast: n_paths must be positive");
  }
  if (horizon < 0) {
    throw std::invalid_argument("forecast: negative horizon");
  }
  if (enc.z_dim() != params.z_dim()) {
    throw std::invalid_argument("encoder and generative model disagree on the "
                                "latent dimension");
  }
  check_history(record, t_star, "forecast");
  const Eigen::Index z = params.z_dim(), o = params.o_dim(), i = params.i_dim();
  if (record.obs_dim() != o || record.int_dim() != i) {
    throw std::invalid_argument("forecast: record channels do not match the "
                                "model");
  }
  const std::size_t total_steps = static_cast<std::size_t>(t_star + horizon);
  const NoisePlan plan =
      zero_noise
          ? NoisePlan::zeros(static_cast<std::size_t>(n_paths), total_steps, z, i)
          : NoisePlan::make(static_cast<std::size_t>(n_paths), total_steps, z, i,
                            mix_seed(seed, fnv1a64("forecast-noise")));

  const std::vector<Eigen::VectorXd> hiddens = encode(record, t_star, enc);
  ForecastResult out;
  out.origin = t_star;
  out.obs_mean = Eigen::MatrixXd::Zero(horizon, o);
  out.obs_var = Eigen::MatrixXd::Zero(horizon, o);
  out.int_mean = Eigen::MatrixXd::Zero(horizon, i);
  out.int_var = Eigen::MatrixXd::Zero(horizon, i);
  Eigen::MatrixXd obs_sq = Eigen::MatrixXd::Zero(horizon, o);
  Eigen::MatrixXd int_sq = Eigen::MatrixXd::Zero(horizon, i);

  for (int path = 0; path < n_paths; ++path) {
    const std::size_t s = static_cast<std::size_t>(path);
    Eigen::VectorXd z_prev = params.m0;
    for (Eigen::Index step = 0; step < t_star; ++step) {
      const DiagGaussian q =
          posterior_step(hiddens[static_cast<std::size_t>(step)], z_prev, enc);
      z_prev = apply_noise(q, plan.state_at(s, static_cast<std::size_t>(step)));
    }
    for (Eigen::Index h = 0; h < horizon; ++h) {
      const std::size_t idx = static_cast<std::size_t>(t_star + h);
      const DiagGaussian du = emit_intervention(z_prev, params);
      out.int_mean.row(h) += du.mean.transpose();
      int_sq.row(h) += du.mean.array().square().matrix().transpose();
      const Eigen::VectorXd u_hat = apply_noise(du, plan.control_at(s, idx));
      const DiagGaussian pr = prior_step(z_prev, u_hat, params, t_star + h + 1);
      const Eigen::VectorXd z_t = apply_noise(pr, plan.state_at(s, idx));
      const DiagGaussian dx = emit_observation(z_t, params);
      out.obs_mean.row(h) += dx.mean.transpose();
      obs_sq.row(h) += dx.mean.array().square().matrix().transpose();
      z_prev = z_t;
    }
  }

  const double inv = 1.0 / static_cast<double>(n_paths);
  out.obs_mean *= inv;
  out.int_mean *= inv;
  const Eigen::RowVectorXd r_var = floored_var(params.log_r).transpose();
  const Eigen::RowVectorXd u_var = floored_var(params.log_u).transpose();
  for (Eigen::Index h = 0; h < horizon; ++h) {
    out.obs_var.row(h) =
        (obs_sq.row(h) * inv - out.obs_mean.row(h).cwiseAbs2()).cwiseMax(0.0) +
        r_var;
    out.int_var.row(h) =
        (int_sq.row(h) * inv - out.int_mean.row(h).cwiseAbs2()).cwiseMax(0.0) +
        u_var;
  }
  return out;
}

diff::ParameterSet to_parameter_set(const DeepSsmParams& params) {
  params.validate();
  diff::ParameterSet ps;
  mlp_to_params(ps, "A", params.transition);
  mlp_to_params(ps, "B", params.control);
  mlp_to_params(ps, "C", params.emission);
  mlp_to_params(ps, "D", params.intervention);
  ps.set("logQ", diff::to_tensor(params.log_q));
  ps.set("logR", diff::to_tensor(params.log_r));
  ps.set("logU", diff::to_tensor(params.log_u));
  ps.set("m0", diff::to_tensor(params.m0));
  ps.set("logP0", diff::to_tensor(params.log_p0));
  return ps;
}

DeepSsmParams deep_from_parameter_set(const diff::ParameterSet& ps) {
  DeepSsmParams params;
  params.transition = mlp_from_params(ps, "A");
  params.control = mlp_from_params(ps, "B");
  params.emission = mlp_from_params(ps, "C");
  params.intervention = mlp_from_params(ps, "D");
  params.log_q = diff::to_vector(ps.at("logQ"));
  params.log_r = diff::to_vector(ps.at("logR"));
  params.log_u = diff::to_vector(ps.at("logU"));
  params.m0 = diff::to_vector(ps.at("m0"));
  params.log_p0 = diff::to_vector(ps.at("logP0"));
  params.validate();
  return params;
}

diff::ParameterSet to_parameter_set(const EncoderParams& enc) {
  enc.validate();
  diff::ParameterSet ps;
  lstm_to_params(ps, "enc", enc.cell);
  mlp_to_params(ps, "post", enc.combiner);
  return ps;
}

EncoderParams encoder_from_parameter_set(const diff::ParameterSet& ps) {
  EncoderParams enc;
  enc.cell = lstm_from_params(ps, "enc");
  enc.combiner = mlp_from_params(ps, "post");
  enc.validate();
  return enc;
}

DeepSsmParams make_deep_ssm(Eigen::Index z, Eigen::Index o, Eigen::Index i,
                            std::uint64_t seed, Eigen::Index hidden,
                            std::size_t layers) {
  Rng rng(mix_seed(seed, fnv1a64("deep-ssm-init")));
  DeepSsmParams params;
  params.transition = make_mlp(z, z, hidden, layers, rng);
  params.control = make_mlp(i, z, hidden, layers, rng);
  params.emission = make_mlp(z, o, hidden, layers, rng);
  params.intervention = make_mlp(z, i, hidden, layers, rng);
  params.log_q = Eigen::VectorXd::Constant(z, std::log(0.1));
  params.log_r = Eigen::VectorXd::Constant(o, std::log(0.1));
  params.log_u = Eigen::VectorXd::Constant(i, std::log(0.1));
  params.m0 = Eigen::VectorXd::Zero(z);
  params.log_p0 = Eigen::VectorXd::Zero(z);
  params.validate();
  return params;
}

EncoderParams make_encoder(Eigen::Index z, Eigen::Index o, Eigen::Index i,
                           std::uint64_t seed, Eigen::Index lstm_hidden,
                           Eigen::Index comb_hidden, std::size_t comb_layers) {
  Rng rng(mix_seed(seed, fnv1a64("encoder-init")));
  EncoderParams enc;
  enc.cell = make_lstm(o + i, lstm_hidden, rng);
  enc.combiner = make_mlp(lstm_hidden + z, 2 * z, comb_hidden, comb_layers, rng);
  enc.validate();
  return enc;
}

DeepSsmParams deep_from_linear(const lgssm::LgssmParams& p) {
  p.validate();
  const auto diag_of = [](const Eigen::MatrixXd& m, const char* name) {
    Eigen::MatrixXd off = m;
    off.diagonal().setZero();
    if (off.cwiseAbs().maxCoeff() > 1e-12) {
      throw std::invalid_argument(std::string("deep_from_linear: ") + name +
                                  " must be diagonal");
    }
    Eigen::VectorXd logv(m.rows());
    for (Eigen::Index j = 0; j < m.rows(); ++j) {
      logv[j] = std::log(std::max(m(j, j) - kVarianceFloor, 1e-12));
    }
    return logv;
  };
  DeepSsmParams params;
  params.transition = linear_mlp(p.a);
  params.control = linear_mlp(p.b);
  params.emission = linear_mlp(p.c);
  params.intervention = linear_mlp(p.d);
  params.log_q = diag_of(p.q, "Q");
  params.log_r = diag_of(p.r, "R");
  params.log_u = diag_of(p.u, "U");
  params.m0 = p.m0;
  params.log_p0 = diag_of(p.p0, "P0");
  params.validate();
  return params;
}

}  // namespace ssmcast::dssm
