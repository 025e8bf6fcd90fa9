#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ssmcast/autodiff.hpp"
#include "ssmcast/dssm.hpp"
#include "ssmcast/events.hpp"
#include "ssmcast/forecast_result.hpp"
#include "ssmcast/lgssm.hpp"
#include "ssmcast/preprocess.hpp"
#include "ssmcast/record.hpp"

namespace ssmcast::pipelines {

// The four ways to fit a forecaster: evidence-bound pretraining then forecast
// fine-tuning, the forecast bound alone, the history-restricted bound, and
// the exact linear filter baseline.
enum class Strategy { kSiTf, kTf, kHr, kKf };

std::string strategy_name(Strategy s);  // "si+tf", "tf", "hr", "kf"
Strategy parse_strategy(const std::string& name);  // throws on unknown names

struct ModelShape {
  Eigen::Index z = 3;
  Eigen::Index hidden = 32;
  std::size_t layers = 3;
  Eigen::Index lstm_hidden = 50;
  Eigen::Index comb_hidden = 32;
  std::size_t comb_layers = 3;
};

struct TrainConfig {
  Strategy strategy = Strategy::kSiTf;
  ModelShape model;
  double learning_rate = 1e-3;
  int batch_size = 16;
  int epochs_si = 50;  // first phase; the only phase for tf/hr/kf
  int epochs_tf = 50;  // fine-tune phase (si+tf) or ignored
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 5.0;  // global gradient norm
  std::uint64_t seed = 0;
  double t_star_fraction = 0.5;   // prediction-time policy for tf/hr losses
  Eigen::Index t_star_fixed = -1;  // >= 1 overrides the fraction
  Eigen::Index tf_horizon = 72;    // forecast-loss horizon, truncated per record
  int n_samples = 1;       // bound samples per record during training
  int eval_samples = 8;    // bound samples for the early-stopping objective
  int patience = 10;       // epochs without eval improvement before a phase stops
  bool include_initial_kl = true;
  bool freeze_encoder_in_tf = false;  // fine-tune updates the encoder unless set
  int threads = 1;

  // Prediction time for a record of the given length, clamped to [1, T-1]
  // so a horizon can exist (a one-step record degenerates to 1).
  Eigen::Index resolve_t_star(Eigen::Index steps) const;
  void validate() const;
};

// Versioned model container. Tensors are stored verbatim (base64 float64), so
// a save/load round trip reproduces forecasts bit for bit. The config echo is
// serialized JSON describing the fully resolved training setup.
struct CheckpointEnvelope {
  int format_version = 1;
  Strategy strategy = Strategy::kKf;
  std::string model_kind;  // "lgssm" | "dssm"
  diffmath::ParameterSet tensors;
  data::NormalizationStats stats;
  std::vector<std::string> obs_channels;
  std::vector<std::string> int_channels;
  std::uint64_t seed = 0;
  std::string config_echo;
};

void save_checkpoint(const CheckpointEnvelope& env, const std::string& path);
void save_checkpoint(const CheckpointEnvelope& env, std::ostream& out);
// Throws on unknown format versions, corrupt base64 and shape mismatches,
// naming the offending tensor.
CheckpointEnvelope load_checkpoint(const std::string& path);
CheckpointEnvelope load_checkpoint(std::istream& in);

// Checkpoint tensors decoded back into model structs; `kind` selects which
// half is meaningful. Channel counts are checked against the tensor shapes.
struct LoadedModel {
  std::string kind;
  lgssm::LgssmParams linear;
  dssm::DeepSsmParams deep;
  dssm::EncoderParams encoder;
};

LoadedModel materialize(const CheckpointEnvelope& env);
CheckpointEnvelope envelope_of(const lgssm::LgssmParams& p);
CheckpointEnvelope envelope_of(const dssm::DeepSsmParams& deep,
                               const dssm::EncoderParams& enc);

// One predictive distribution per record: the exact filter rollout for the
// linear kind, the Monte-Carlo rollout (n_paths, seeded) for the deep kind.
ForecastResult forecast_with(const LoadedModel& model,
                             const data::PatientRecord& record,
                             Eigen::Index t_star, Eigen::Index horizon,
                             int n_paths, std::uint64_t seed);

struct CurvePoint {
  int epoch = 0;            // 1-based, continuous across phases
  std::string phase;        // "si", "tf", "hr", "kf-coarse", "kf-fine"
  double train_objective = 0.0;  // higher is better
  double eval_objective = 0.0;
};

struct TrainResult {
  CheckpointEnvelope checkpoint;  // best eval objective observed
  std::vector<CurvePoint> curve;
  double best_eval = 0.0;
  bool diverged = false;     // non-finite objective; checkpoint is the last good one
  std::string diagnostics;
};

// Fits per the configured strategy on pre-normalized records, early-stopping
// each phase on the eval objective (patience epochs without improvement) and
// returning the best-eval snapshot. `stats` and the channel lists ride into
// the checkpoint envelope. Deterministic for fixed (data, config), including
// across thread counts.
TrainResult train(const std::vector<data::PatientRecord>& train_records,
                  const std::vector<data::PatientRecord>& eval_records,
                  const data::NormalizationStats& stats,
                  const TrainConfig& config);

struct EvalPolicy {
  Eigen::Index t_star = 48;
  std::vector<Eigen::Index> horizons = {24, 48, 72};
  int n_paths = 128;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct HorizonMetric {
  Eigen::Index horizon = 0;
  double mae = 0.0;      // observations, grand mean over folds
  double sem = 0.0;      // std over fold means / sqrt(folds); 0 for one fold
  double int_mae = 0.0;  // interventions, reported separately
  double int_sem = 0.0;
  std::vector<double> fold_mae;
  std::vector<double> fold_int_mae;
  std::vector<std::size_t> fold_records;  // records long enough per fold
  std::vector<std::size_t> fold_excluded;
};

struct MetricsReport {
  std::string strategy;
  std::vector<HorizonMetric> horizons;
  double runtime_s = 0.0;  // measured, but serialized as 0 for determinism
  std::string config_echo;
};

// Sum of |forecast - recorded| over the first `horizon` rollout steps,
// pooled into the accumulators (observations and interventions separately).
struct MaeAccumulator {
  double abs_sum = 0.0;
  std::size_t cells = 0;

  double mean() const { return cells == 0 ? 0.0 : abs_sum / double(cells); }
};
void accumulate_mae(const ForecastResult& forecast,
                    const data::PatientRecord& record, Eigen::Index t_star,
                    Eigen::Index horizon, MaeAccumulator& obs,
                    MaeAccumulator& ints);

// Sample standard error of the mean: std(values, n-1 denominator) / sqrt(n).
double standard_error(const std::vector<double>& values);

// Forecast errors against the recorded future in the records' (normalized)
// units: for each record, predict from t_star and pool |error| over steps up
// to each horizon and all channels. Records shorter than t_star + h are
// excluded from that horizon and counted. Record order does not matter.
MetricsReport evaluate_mae(const CheckpointEnvelope& env,
                           const std::vector<data::PatientRecord>& test,
                           const EvalPolicy& policy);

// The whole protocol per fold: hash-split the streams, prepare, train,
// evaluate on the fold's test split, then aggregate fold means and their
// standard errors. Throws when a fold's eval or test split comes up empty.
MetricsReport cross_validate(const std::vector<data::EventStream>& streams,
                             double grid_step_h,
                             const std::vector<std::string>& obs_channels,
                             const std::vector<std::string>& int_channels,
                             const TrainConfig& config,
                             const EvalPolicy& policy, int n_folds = 10);

// Report serialization. The CSV carries one row per (strategy, fold, horizon)
// and one aggregate "all" row per (strategy, horizon); the JSON mirrors the
// full structure. Both embed the config echo and tool version; runtime_s is
// reported as 0 so identical runs stay byte-identical.
void write_metrics_csv(const MetricsReport& report, std::ostream& out);
void write_metrics_csv(const MetricsReport& report, const std::string& path);
std::string metrics_json(const MetricsReport& report);
void write_metrics_json(const MetricsReport& report, const std::string& path);

}  // namespace ssmcast::pipelines
