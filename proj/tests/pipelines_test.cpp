#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include "json.hpp"
#include <sstream>
#include <string>
#include <vector>

#include "ssmcast/dssm.hpp"
#include "ssmcast/pipelines.hpp"
#include "ssmcast/rng.hpp"
#include "ssmcast/synthetic.hpp"

using namespace ssmcast;
using namespace ssmcast::pipelines;
using json = nlohmann::json;

namespace {

template <class Fn>
std::string error_of(Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& text, const std::string& needle) {
  return text.find(needle) != std::string::npos;
}

std::string saved(const CheckpointEnvelope& env) {
  std::ostringstream out;
  save_checkpoint(env, out);
  return out.str();
}

CheckpointEnvelope loaded(const std::string& text) {
  std::istringstream in(text);
  return load_checkpoint(in);
}

// Fully observed copy: the grids stay, every cell counts as measured.
data::PatientRecord dense(const data::PatientRecord& rec) {
  data::PatientRecord out = rec;
  out.x_mask.setConstant(rec.steps(), rec.obs_dim(), true);
  out.u_mask.setConstant(rec.steps(), rec.int_dim(), true);
  return out;
}

std::vector<data::PatientRecord> dense_truth(const data::SyntheticDataset& ds) {
  std::vector<data::PatientRecord> out;
  out.reserve(ds.truth.size());
  for (const auto& rec : ds.truth) out.push_back(dense(rec));
  return out;
}

data::NormalizationStats neutral_stats(
    const std::vector<std::string>& obs_channels,
    const std::vector<std::string>& int_channels) {
  data::NormalizationStats stats;
  for (const auto& name : obs_channels) stats.obs[name] = {};
  for (const auto& name : int_channels) stats.ints[name] = {};
  return stats;
}

data::PatientRecord toy_record(const std::string& id, Eigen::Index steps,
                               Eigen::Index o, Eigen::Index i, Rng& rng) {
  data::PatientRecord rec;
  rec.patient_id = id;
  rec.grid_step_h = 1.0;
  rec.obs_channels = data::channel_names("obs", o);
  rec.int_channels = data::channel_names("int", i);
  rec.x.setZero(steps, o);
  rec.u.setZero(steps, i);
  for (Eigen::Index t = 0; t < steps; ++t) {
    for (Eigen::Index j = 0; j < o; ++j) rec.x(t, j) = 0.4 * rng.normal();
    if (t > 0) {
      for (Eigen::Index c = 0; c < i; ++c) {
        rec.u(t, c) = rng.uniform() < 0.3 ? 0.5 : 0.0;
      }
    }
  }
  rec.x_mask.setConstant(steps, o, true);
  rec.u_mask.setConstant(steps, i, true);
  return rec;
}

std::vector<data::PatientRecord> toy_set(int n, Eigen::Index steps,
                                         Eigen::Index o, Eigen::Index i,
                                         std::uint64_t seed) {
  Rng rng(seed);
  std::vector<data::PatientRecord> out;
  for (int k = 0; k < n; ++k) {
    out.push_back(toy_record("toy" + std::to_string(k), steps, o, i, rng));
  }
  return out;
}

TrainConfig small_deep_config(Strategy strategy) {
  TrainConfig cfg;
  cfg.strategy = strategy;
  cfg.model = {2, 8, 2, 8, 8, 2};
  cfg.batch_size = 4;
  cfg.epochs_si = 3;
  cfg.epochs_tf = 2;
  cfg.eval_samples = 2;
  cfg.tf_horizon = 4;
  cfg.seed = 11;
  return cfg;
}

// A unit system that holds its level exactly: forecasts repeat m0 forever.
lgssm::LgssmParams level_holder(double level) {
  lgssm::LgssmParams p;
  p.a = Eigen::MatrixXd::Identity(1, 1);
  p.b = Eigen::MatrixXd::Zero(1, 1);
  p.c = Eigen::MatrixXd::Identity(1, 1);
  p.d = Eigen::MatrixXd::Zero(1, 1);
  p.q = Eigen::MatrixXd::Constant(1, 1, 1e-8);
  p.r = Eigen::MatrixXd::Constant(1, 1, 1e-8);
  p.u = Eigen::MatrixXd::Constant(1, 1, 1e-8);
  p.m0 = Eigen::VectorXd::Constant(1, level);
  p.p0 = Eigen::MatrixXd::Constant(1, 1, 1e-8);
  return p;
}

CheckpointEnvelope level_checkpoint(double level) {
  CheckpointEnvelope env = envelope_of(level_holder(level));
  env.strategy = Strategy::kKf;
  env.obs_channels = {"hr"};
  env.int_channels = {"dose"};
  env.stats = neutral_stats(env.obs_channels, env.int_channels);
  return env;
}

data::PatientRecord level_record(const std::string& id, Eigen::Index steps,
                                 double level) {
  data::PatientRecord rec;
  rec.patient_id = id;
  rec.obs_channels = {"hr"};
  rec.int_channels = {"dose"};
  rec.x.setConstant(steps, 1, level);
  rec.u.setZero(steps, 1);
  rec.x_mask.setConstant(steps, 1, true);
  rec.u_mask.setConstant(steps, 1, true);
  return rec;
}

}  // namespace

TEST_CASE("strategy names round trip") {
  for (Strategy s :
       {Strategy::kSiTf, Strategy::kTf, Strategy::kHr, Strategy::kKf}) {
    CHECK(parse_strategy(strategy_name(s)) == s);
  }
  CHECK(strategy_name(Strategy::kSiTf) == "si+tf");
  CHECK(contains(error_of([] { parse_strategy("adam"); }), "adam"));
}

TEST_CASE("training configs validate their fields") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  TrainConfig bad = cfg;
  bad.learning_rate = 0.0;
  CHECK(contains(error_of([&] { bad.validate(); }), "learning rate"));
  bad = cfg;
  bad.batch_size = 0;
  CHECK(contains(error_of([&] { bad.validate(); }), "batch"));
  bad = cfg;
  bad.epochs_si = 0;
  bad.epochs_tf = 0;
  CHECK(contains(error_of([&] { bad.validate(); }), "epoch"));
  bad = cfg;
  bad.t_star_fraction = 1.5;
  CHECK(contains(error_of([&] { bad.validate(); }), "fraction"));
  bad.t_star_fixed = 48;  // a fixed index makes the fraction irrelevant
  CHECK_NOTHROW(bad.validate());
  bad = cfg;
  bad.grad_clip = -1.0;
  CHECK(contains(error_of([&] { bad.validate(); }), "clip"));
}

TEST_CASE("prediction times follow the fraction unless fixed") {
  TrainConfig cfg;
  cfg.t_star_fraction = 0.5;
  CHECK(cfg.resolve_t_star(96) == 48);
  CHECK(cfg.resolve_t_star(7) == 3);
  CHECK(cfg.resolve_t_star(2) == 1);
  CHECK(cfg.resolve_t_star(1) == 1);

  cfg.t_star_fixed = 48;
  CHECK(cfg.resolve_t_star(96) == 48);
  CHECK(cfg.resolve_t_star(30) == 29);  // clamped so a horizon can exist
  cfg.t_star_fixed = -1;
  cfg.t_star_fraction = 0.25;
  CHECK(cfg.resolve_t_star(96) == 24);
}

TEST_CASE("standard errors match the hand formula") {
  CHECK(standard_error({1.0, 2.0, 3.0}) == doctest::Approx(0.5773502691896258));
  CHECK(standard_error({2.0, 2.0, 2.0}) == 0.0);
  CHECK(standard_error({5.0}) == 0.0);
  CHECK(standard_error({}) == 0.0);
}

TEST_CASE("absolute errors pool over steps and channels") {
  data::PatientRecord rec = level_record("m", 6, 1.0);

  ForecastResult f;
  f.origin = 2;
  f.obs_mean.setConstant(2, 1, 1.0);
  f.obs_var.setConstant(2, 1, 0.1);
  f.int_mean.setZero(2, 1);
  f.int_var.setConstant(2, 1, 0.1);

  MaeAccumulator obs, ints;
  accumulate_mae(f, rec, 2, 2, obs, ints);
  CHECK(obs.mean() == 0.0);  // forecast matches the recorded future exactly
  CHECK(obs.cells == 2);
  CHECK(ints.mean() == 0.0);

  f.obs_mean(0, 0) = 0.0;
  f.obs_mean(1, 0) = 2.0;
  obs = {};
  ints = {};
  accumulate_mae(f, rec, 2, 2, obs, ints);
  CHECK(obs.mean() == 1.0);  // |0-1| and |2-1| average to one

  CHECK(contains(error_of([&] {
          MaeAccumulator a, b;
          accumulate_mae(f, rec, 5, 2, a, b);
        }),
        "past the record"));
}

TEST_CASE("checkpoints round trip models bit for bit") {
  const data::PatientRecord rec = [] {
    Rng rng(5);
    return toy_record("p", 9, 3, 2, rng);
  }();

  SUBCASE("deep model") {
    const dssm::DeepSsmParams deep = dssm::make_deep_ssm(2, 3, 2, 21, 8, 2);
    const dssm::EncoderParams enc = dssm::make_encoder(2, 3, 2, 21, 8, 8, 2);
    CheckpointEnvelope env = envelope_of(deep, enc);
    env.strategy = Strategy::kSiTf;
    env.obs_channels = rec.obs_channels;
    env.int_channels = rec.int_channels;
    env.stats = neutral_stats(env.obs_channels, env.int_channels);
    env.config_echo = json{{"note", "round-trip"}}.dump();

    const std::string text = saved(env);
    const CheckpointEnvelope back = loaded(text);
    CHECK(saved(back) == text);
    CHECK(back.strategy == Strategy::kSiTf);
    CHECK(back.model_kind == "dssm");
    CHECK(back.obs_channels == env.obs_channels);
    CHECK(back.stats.obs.count("obs00") == 1);
    for (const auto& [name, t] : env.tensors) {
      REQUIRE(back.tensors.contains(name));
      CHECK(back.tensors.at(name).values() == t.values());
    }

    const ForecastResult before =
        forecast_with(materialize(env), rec, 4, 3, 16, 77);
    const ForecastResult after =
        forecast_with(materialize(back), rec, 4, 3, 16, 77);
    CHECK((before.obs_mean.array() == after.obs_mean.array()).all());
    CHECK((before.obs_var.array() == after.obs_var.array()).all());
    CHECK((before.int_mean.array() == after.int_mean.array()).all());
    CHECK((before.int_var.array() == after.int_var.array()).all());
  }

  SUBCASE("linear model") {
    const data::SyntheticDataset ds = data::simulate({}, 31);
    CheckpointEnvelope env = envelope_of(ds.linear);
    env.strategy = Strategy::kKf;
    env.obs_channels = ds.truth.front().obs_channels;
    env.int_channels = ds.truth.front().int_channels;
    env.stats = neutral_stats(env.obs_channels, env.int_channels);

    const CheckpointEnvelope back = loaded(saved(env));
    const data::PatientRecord sample = dense(ds.truth.front());
    const Eigen::Index t_star = sample.steps() / 2;
    const ForecastResult before =
        forecast_with(materialize(env), sample, t_star, 3, 1, 0);
    const ForecastResult after =
        forecast_with(materialize(back), sample, t_star, 3, 1, 0);
    CHECK((before.obs_mean.array() == after.obs_mean.array()).all());
    CHECK((before.int_var.array() == after.int_var.array()).all());
  }
}

TEST_CASE("tampered checkpoints name the broken tensor") {
  const std::string text = saved(level_checkpoint(2.0));

  SUBCASE("future format versions are refused") {
    json j = json::parse(text);
    j["format_version"] = 2;
    const std::string err = error_of([&] { loaded(j.dump()); });
    CHECK(contains(err, "unsupported"));
    CHECK(contains(err, "2"));
  }

  SUBCASE("shape edits are caught") {
    json j = json::parse(text);
    j["tensors"]["m0"]["shape"] = {3};
    CHECK(contains(error_of([&] { loaded(j.dump()); }), "'m0'"));
  }

  SUBCASE("corrupt payloads are caught") {
    json j = json::parse(text);
    std::string data = j["tensors"]["A"]["data"].get<std::string>();
    data[0] = '!';
    j["tensors"]["A"]["data"] = data;
    const std::string err = error_of([&] { loaded(j.dump()); });
    CHECK(contains(err, "'A'"));
    CHECK(contains(err, "base64"));
  }

  SUBCASE("truncated payloads are caught") {
    json j = json::parse(text);
    std::string data = j["tensors"]["A"]["data"].get<std::string>();
    j["tensors"]["A"]["data"] = data.substr(0, data.size() - 1);
    CHECK(contains(error_of([&] { loaded(j.dump()); }), "'A'"));
  }

  SUBCASE("missing sections are named") {
    json j = json::parse(text);
    j.erase("normalization");
    CHECK(contains(error_of([&] { loaded(j.dump()); }), "normalization"));
  }

  SUBCASE("not json at all") {
    CHECK(contains(error_of([&] { loaded("{\"forma"); }), "JSON"));
  }
}

TEST_CASE("missing model tensors fail materialization") {
  CheckpointEnvelope env = level_checkpoint(1.0);
  CheckpointEnvelope broken = loaded(saved(env));
  json j = json::parse(saved(env));
  j["tensors"].erase("Q");
  broken = loaded(j.dump());
  CHECK(contains(error_of([&] { materialize(broken); }), "'Q'"));

  CheckpointEnvelope mismatched = env;
  mismatched.obs_channels = {"hr", "extra"};
  CHECK(contains(error_of([&] { materialize(mismatched); }), "channel"));
}

TEST_CASE("the exact filter strategy recovers the generator's likelihood") {
  data::SyntheticConfig gen;
  gen.n_patients = 66;
  gen.min_steps = 20;
  gen.max_steps = 28;
  gen.z_dim = 2;
  gen.o_dim = 3;
  gen.i_dim = 2;
  gen.params_seed = 12;
  gen.missing_rate = 0.0;
  // Always-on dosing: the linear params are then the exact law of the data,
  // so the fitted likelihood should land next to theirs.
  gen.intervention_sparsity = 0.0;
  const data::SyntheticDataset ds = data::simulate(gen, 120);

  std::vector<data::PatientRecord> records = dense_truth(ds);
  std::vector<data::PatientRecord> eval_set(records.begin(), records.begin() + 6);
  std::vector<data::PatientRecord> train_set(records.begin() + 6, records.end());

  TrainConfig cfg;
  cfg.strategy = Strategy::kKf;
  cfg.epochs_si = 150;
  cfg.epochs_tf = 150;
  cfg.seed = 3;
  cfg.threads = 4;
  const auto stats = neutral_stats(records.front().obs_channels,
                                   records.front().int_channels);
  const TrainResult result = train(train_set, eval_set, stats, cfg);
  REQUIRE_FALSE(result.diverged);
  REQUIRE(result.curve.size() == 2);
  CHECK(result.checkpoint.model_kind == "lgssm");

  double truth = 0.0;
  for (const auto& rec : eval_set) {
    truth += lgssm::kf_filter(rec, ds.linear, true).total_loglik;
  }
  truth /= static_cast<double>(eval_set.size());
  CAPTURE(truth);
  CAPTURE(result.best_eval);
  CHECK(std::abs(result.best_eval - truth) <= 0.02 * std::abs(truth));
}

TEST_CASE("the system-id phase climbs after smoothing") {
  data::SyntheticConfig gen;
  gen.n_patients = 26;
  gen.min_steps = 8;
  gen.max_steps = 10;
  gen.z_dim = 2;
  gen.o_dim = 3;
  gen.i_dim = 2;
  gen.params_seed = 5;
  gen.missing_rate = 0.0;
  const data::SyntheticDataset ds = data::simulate(gen, 900);
  std::vector<data::PatientRecord> records = dense_truth(ds);
  std::vector<data::PatientRecord> eval_set(records.begin(), records.begin() + 6);
  std::vector<data::PatientRecord> train_set(records.begin() + 6, records.end());

  TrainConfig cfg = small_deep_config(Strategy::kSiTf);
  cfg.epochs_si = 15;
  cfg.epochs_tf = 0;
  cfg.learning_rate = 3e-3;
  cfg.patience = 15;
  const auto stats = neutral_stats(records.front().obs_channels,
                                   records.front().int_channels);
  const TrainResult result = train(train_set, eval_set, stats, cfg);
  REQUIRE_FALSE(result.diverged);
  REQUIRE(result.curve.size() == 15);

  std::vector<double> smoothed;
  for (std::size_t k = 0; k + 5 <= result.curve.size(); ++k) {
    double sum = 0.0;
    for (std::size_t j = k; j < k + 5; ++j) {
      sum += result.curve[j].train_objective;
    }
    smoothed.push_back(sum / 5.0);
  }
  REQUIRE(smoothed.size() == 11);
  for (std::size_t k = 1; k < smoothed.size(); ++k) {
    CAPTURE(k);
    CHECK(smoothed[k] >= smoothed[k - 1] - 1e-9);
  }
  CHECK(smoothed.back() > smoothed.front());
}

TEST_CASE("history-restricted training differs from pretraining plus fine-tuning") {
  const auto records = toy_set(10, 10, 2, 1, 40);
  std::vector<data::PatientRecord> eval_set(records.begin(), records.begin() + 3);
  std::vector<data::PatientRecord> train_set(records.begin() + 3, records.end());
  const auto stats = neutral_stats(records.front().obs_channels,
                                   records.front().int_channels);

  TrainConfig cfg = small_deep_config(Strategy::kSiTf);
  cfg.epochs_si = 2;
  cfg.epochs_tf = 1;
  const TrainResult si_tf = train(train_set, eval_set, stats, cfg);

  cfg.strategy = Strategy::kHr;
  const TrainResult hr = train(train_set, eval_set, stats, cfg);

  REQUIRE_FALSE(si_tf.diverged);
  REQUIRE_FALSE(hr.diverged);
  CHECK(saved(si_tf.checkpoint) != saved(hr.checkpoint));
  CHECK(si_tf.curve.front().phase == "si");
  CHECK(si_tf.curve.back().phase == "tf");
  CHECK(hr.curve.front().phase == "hr");
}

TEST_CASE("history-restricted training ignores everything past the prediction time") {
  auto records = toy_set(9, 10, 2, 1, 41);
  std::vector<data::PatientRecord> eval_set(records.begin(), records.begin() + 3);
  std::vector<data::PatientRecord> train_set(records.begin() + 3, records.end());

  TrainConfig cfg = small_deep_config(Strategy::kHr);
  cfg.t_star_fixed = 5;
  cfg.epochs_si = 2;
  const auto stats = neutral_stats(records.front().obs_channels,
                                   records.front().int_channels);
  const TrainResult clean = train(train_set, eval_set, stats, cfg);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto poison = [&](std::vector<data::PatientRecord> set) {
    for (auto& rec : set) {
      for (Eigen::Index t = 5; t < rec.steps(); ++t) {
        for (Eigen::Index j = 0; j < rec.obs_dim(); ++j) rec.x(t, j) = nan;
        for (Eigen::Index c = 0; c < rec.int_dim(); ++c) rec.u(t, c) = nan;
      }
    }
    return set;
  };
  const TrainResult poisoned =
      train(poison(train_set), poison(eval_set), stats, cfg);

  REQUIRE_FALSE(clean.diverged);
  REQUIRE_FALSE(poisoned.diverged);
  CHECK(saved(clean.checkpoint) == saved(poisoned.checkpoint));
}

TEST_CASE("training is deterministic across worker counts") {
  const auto records = toy_set(9, 10, 2, 1, 42);
  std::vector<data::PatientRecord> eval_set(records.begin(), records.begin() + 3);
  std::vector<data::PatientRecord> train_set(records.begin() + 3, records.end());
  const auto stats = neutral_stats(records.front().obs_channels,
                                   records.front().int_channels);

  TrainConfig cfg = small_deep_config(Strategy::kTf);
  cfg.batch_size = 4;  // the last batch is ragged on purpose
  cfg.threads = 1;
  const TrainResult serial = train(train_set, eval_set, stats, cfg);
  cfg.threads = 4;
  const TrainResult parallel = train(train_set, eval_set, stats, cfg);
  cfg.threads = 1;
  const TrainResult again = train(train_set, eval_set, stats, cfg);

  CHECK(saved(serial.checkpoint) == saved(parallel.checkpoint));
  CHECK(saved(serial.checkpoint) == saved(again.checkpoint));
  REQUIRE(serial.curve.size() == parallel.curve.size());
  for (std::size_t k = 0; k < serial.curve.size(); ++k) {
    CHECK(serial.curve[k].train_objective == parallel.curve[k].train_objective);
    CHECK(serial.curve[k].eval_objective == parallel.curve[k].eval_objective);
  }
}

TEST_CASE("freezing the encoder pins its tensors during fine-tuning") {
  const auto records = toy_set(8, 10, 2, 1, 43);
  std::vector<data::PatientRecord> eval_set(records.begin(), records.begin() + 2);
  std::vector<data::PatientRecord> train_set(records.begin() + 2, records.end());
  const auto stats = neutral_stats(records.front().obs_channels,
                                   records.front().int_channels);

  TrainConfig cfg = small_deep_config(Strategy::kTf);
  cfg.epochs_si = 2;
  cfg.freeze_encoder_in_tf = true;
  const TrainResult frozen = train(train_set, eval_set, stats, cfg);
  cfg.freeze_encoder_in_tf = false;
  const TrainResult updated = train(train_set, eval_set, stats, cfg);

  const dssm::EncoderParams init = dssm::make_encoder(
      cfg.model.z, 2, 1, cfg.seed, cfg.model.lstm_hidden, cfg.model.comb_hidden,
      cfg.model.comb_layers);
  const auto init_tensors = dssm::to_parameter_set(init);
  bool any_moved = false;
  for (const auto& [name, t] : init_tensors) {
    CHECK(frozen.checkpoint.tensors.at(name).values() == t.values());
    if (updated.checkpoint.tensors.at(name).values() != t.values()) {
      any_moved = true;
    }
  }
  CHECK(any_moved);
}

TEST_CASE("early stopping returns the best checkpoint it saw") {
  const auto records = toy_set(8, 10, 2, 1, 44);
  std::vector<data::PatientRecord> eval_set(records.begin(), records.begin() + 3);
  std::vector<data::PatientRecord> train_set(records.begin() + 3, records.end());
  const auto stats = neutral_stats(records.front().obs_channels,
                                   records.front().int_channels);

  TrainConfig cfg = small_deep_config(Strategy::kTf);
  cfg.learning_rate = 0.05;  // deliberately jumpy so the curve is not monotone
  cfg.epochs_si = 6;
  cfg.patience = 6;
  const TrainResult result = train(train_set, eval_set, stats, cfg);
  REQUIRE_FALSE(result.diverged);

  for (const CurvePoint& point : result.curve) {
    CHECK(result.best_eval >= point.eval_objective);
  }

  // Rescoring the returned checkpoint reproduces the reported best exactly.
  const LoadedModel model = materialize(result.checkpoint);
  double rescored = 0.0;
  for (const auto& rec : eval_set) {
    std::uint64_t seed = mix_seed(cfg.seed, fnv1a64("eval-noise"));
    seed = mix_seed(seed, fnv1a64(rec.patient_id));
    seed = mix_seed(seed, 0);
    const dssm::NoisePlan plan = dssm::NoisePlan::make(
        static_cast<std::size_t>(cfg.eval_samples),
        static_cast<std::size_t>(rec.steps()), cfg.model.z, rec.int_dim(),
        seed);
    const Eigen::Index t_star = cfg.resolve_t_star(rec.steps());
    const Eigen::Index horizon =
        std::min<Eigen::Index>(cfg.tf_horizon, rec.steps() - t_star);
    rescored += dssm::elbo_forecast(rec, t_star, horizon, model.deep,
                                    model.encoder, plan, cfg.eval_samples,
                                    cfg.include_initial_kl)
                    .elbo;
  }
  rescored /= static_cast<double>(eval_set.size());
  CHECK(rescored == result.best_eval);
}

TEST_CASE("a blown-up record aborts training with diagnostics") {
  auto records = toy_set(8, 8, 2, 1, 45);
  std::vector<data::PatientRecord> eval_set(records.begin(), records.begin() + 3);
  std::vector<data::PatientRecord> train_set(records.begin() + 3, records.end());
  train_set[2].x.setConstant(1e160);

  TrainConfig cfg = small_deep_config(Strategy::kTf);
  const auto stats = neutral_stats(records.front().obs_channels,
                                   records.front().int_channels);
  const TrainResult result = train(train_set, eval_set, stats, cfg);

  CHECK(result.diverged);
  CHECK(contains(result.diagnostics, "epoch 1"));
  CHECK_FALSE(result.checkpoint.tensors.empty());
  CHECK_NOTHROW(materialize(result.checkpoint));
  CHECK(std::isfinite(result.best_eval));
}

TEST_CASE("mae evaluation excludes records that end too early") {
  const CheckpointEnvelope env = level_checkpoint(5.0);
  std::vector<data::PatientRecord> test;
  test.push_back(level_record("long", 10, 5.0));
  test.push_back(level_record("short", 6, 5.0));
  test.push_back(level_record("stub", 3, 5.0));

  EvalPolicy policy;
  policy.t_star = 4;
  policy.horizons = {2, 5};
  policy.n_paths = 1;

  const MetricsReport report = evaluate_mae(env, test, policy);
  REQUIRE(report.horizons.size() == 2);
  CHECK(report.strategy == "kf");

  const HorizonMetric& h2 = report.horizons[0];
  CHECK(h2.horizon == 2);
  CHECK(h2.fold_records == std::vector<std::size_t>{2});
  CHECK(h2.fold_excluded == std::vector<std::size_t>{1});
  CHECK(h2.mae == 0.0);  // the model holds the level the records follow

  const HorizonMetric& h5 = report.horizons[1];
  CHECK(h5.fold_records == std::vector<std::size_t>{1});
  CHECK(h5.fold_excluded == std::vector<std::size_t>{2});

  // Shift the recorded future by one unit: every pooled cell misses by one.
  test[0].x.bottomRows(6).setConstant(6.0);
  test[1].x.bottomRows(2).setConstant(6.0);
  const MetricsReport shifted = evaluate_mae(env, test, policy);
  CHECK(shifted.horizons[0].mae == 1.0);
  CHECK(shifted.horizons[1].mae == 1.0);
  CHECK(shifted.horizons[0].int_mae == 0.0);
}

TEST_CASE("evaluation does not care about record order") {
  const data::SyntheticDataset ds = data::simulate(
      [] {
        data::SyntheticConfig gen;
        gen.n_patients = 8;
        gen.min_steps = 12;
        gen.max_steps = 16;
        gen.z_dim = 2;
        gen.o_dim = 3;
        gen.i_dim = 2;
        gen.missing_rate = 0.0;
        return gen;
      }(),
      77);
  CheckpointEnvelope env = envelope_of(ds.linear);
  env.strategy = Strategy::kKf;
  env.obs_channels = ds.truth.front().obs_channels;
  env.int_channels = ds.truth.front().int_channels;
  env.stats = neutral_stats(env.obs_channels, env.int_channels);

  std::vector<data::PatientRecord> test = dense_truth(ds);
  EvalPolicy policy;
  policy.t_star = 6;
  policy.horizons = {2, 4};
  policy.n_paths = 1;
  policy.threads = 1;

  const std::string forward = metrics_json(evaluate_mae(env, test, policy));
  std::reverse(test.begin(), test.end());
  std::swap(test[1], test[4]);
  policy.threads = 3;
  const std::string scrambled = metrics_json(evaluate_mae(env, test, policy));
  CHECK(forward == scrambled);
}

TEST_CASE("cross validation aggregates fold means") {
  data::SyntheticConfig gen;
  gen.n_patients = 60;
  gen.min_steps = 12;
  gen.max_steps = 16;
  gen.z_dim = 2;
  gen.o_dim = 2;
  gen.i_dim = 1;
  gen.params_seed = 9;
  gen.missing_rate = 0.3;
  gen.intervention_sparsity = 0.6;
  const data::SyntheticDataset ds = data::simulate(gen, 500);

  TrainConfig cfg;
  cfg.strategy = Strategy::kKf;
  cfg.epochs_si = 25;
  cfg.epochs_tf = 25;
  cfg.seed = 2;

  EvalPolicy policy;
  policy.t_star = 6;
  policy.horizons = {3};
  policy.n_paths = 1;

  const auto obs = data::channel_names("obs", gen.o_dim);
  const auto ints = data::channel_names("int", gen.i_dim);
  const MetricsReport report =
      cross_validate(ds.events, gen.grid_step_h, obs, ints, cfg, policy, 2);

  REQUIRE(report.horizons.size() == 1);
  const HorizonMetric& metric = report.horizons.front();
  REQUIRE(metric.fold_mae.size() == 2);
  CHECK(metric.mae ==
        doctest::Approx((metric.fold_mae[0] + metric.fold_mae[1]) / 2.0));
  CHECK(metric.sem == doctest::Approx(standard_error(metric.fold_mae)));
  CHECK(metric.fold_records[0] > 0);
  CHECK(metric.fold_records[1] > 0);
  CHECK(std::isfinite(metric.mae));
  CHECK(std::isfinite(metric.int_mae));

  const MetricsReport again =
      cross_validate(ds.events, gen.grid_step_h, obs, ints, cfg, policy, 2);
  CHECK(metrics_json(report) == metrics_json(again));

  std::ostringstream csv;
  write_metrics_csv(report, csv);
  const std::string text = csv.str();
  CHECK(contains(text, "strategy,fold,horizon,mae,sem,n_records,runtime_s"));
  CHECK(contains(text, "kf,0,3,"));
  CHECK(contains(text, "kf,1,3,"));
  CHECK(contains(text, "kf,all,3,"));
  CHECK(contains(text, "# reference MAE@24h"));
}

TEST_CASE("fold splits that come up empty are an error") {
  // Ids picked so fold 0 has eval candidates but no test bucket at all.
  std::vector<data::EventStream> streams;
  int made = 0;
  for (int k = 0; made < 12 && k < 4000; ++k) {
    const std::string id = "cand" + std::to_string(k);
    const std::uint64_t bucket = fnv1a64(id) % 100;
    if (bucket < 10) continue;  // skip everything that would land in test
    data::EventStream s;
    s.patient_id = id;
    s.events.push_back({1.0, "hr", 80.0, data::EventKind::kObservation});
    s.events.push_back({2.0, "hr", 82.0, data::EventKind::kObservation});
    streams.push_back(std::move(s));
    ++made;
  }
  REQUIRE(made == 12);

  TrainConfig cfg;
  cfg.strategy = Strategy::kKf;
  const std::string err = error_of([&] {
    cross_validate(streams, 1.0, {"hr"}, {}, cfg, EvalPolicy{}, 1);
  });
  CHECK(contains(err, "empty"));
  CHECK(contains(err, "fold 0"));

  CHECK(contains(error_of([&] {
          cross_validate(streams, 1.0, {"hr"}, {}, cfg, EvalPolicy{}, 11);
        }),
        "n_folds"));
}

TEST_CASE("metrics serialize deterministically") {
  MetricsReport report;
  report.strategy = "tf";
  report.runtime_s = 123.456;  // measured time must not leak into the bytes
  HorizonMetric m;
  m.horizon = 24;
  m.mae = 0.5;
  m.sem = 0.01;
  m.int_mae = 0.25;
  m.fold_mae = {0.4, 0.6};
  m.fold_int_mae = {0.2, 0.3};
  m.fold_records = {7, 8};
  m.fold_excluded = {1, 0};
  report.horizons.push_back(m);

  const std::string once = metrics_json(report);
  report.runtime_s = 9.0;
  CHECK(metrics_json(report) == once);
  CHECK(contains(once, "\"runtime_s\": 0.0"));

  std::ostringstream csv;
  write_metrics_csv(report, csv);
  std::ostringstream csv2;
  write_metrics_csv(report, csv2);
  CHECK(csv.str() == csv2.str());
  CHECK(contains(csv.str(), "tf,all,24,0.5,0.01,15,0"));
}
