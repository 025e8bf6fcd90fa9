#include "ssmcast/cli.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssmcast/autodiff.hpp"
#include "ssmcast/dssm.hpp"
#include "ssmcast/events.hpp"
#include "ssmcast/parallel.hpp"
#include "ssmcast/pipelines.hpp"
#include "ssmcast/preprocess.hpp"
#include "ssmcast/record.hpp"
#include "ssmcast/rng.hpp"
#include "ssmcast/synthetic.hpp"
#include "ssmcast/version.hpp"

namespace ssmcast::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Contractual exit codes; nothing else leaves run_cli.
constexpr int kOk = 0;
constexpr int kUsage = 2;      // config schema, flags, unusable artifacts
constexpr int kDataError = 3;  // malformed events or records
constexpr int kDiverged = 4;   // non-finite training, broken gradients
constexpr int kEvalError = 5;  // evaluation constraint violations

struct CliError {
  int code;
  std::string message;
};

[[noreturn]] void fail(int code, const std::string& message) {
  throw CliError{code, message};
}

std::string tool_string() {
  return std::string(kToolName) + " " + kToolVersion;
}

// ---------------------------------------------------------------------------
// run config schema

// Everything a run can specify, fully defaulted. Flags override individual
// scalars after the file is parsed, so the echo reflects the effective run.
struct RunConfig {
  double grid_step_h = 1.0;
  std::vector<std::string> obs_channels;
  std::vector<std::string> int_channels;
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
  int fold = 0;
  data::SyntheticConfig synthetic;
  pipelines::TrainConfig train;
  pipelines::EvalPolicy eval;
  bool denormalize = false;
};

std::string joined(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

[[noreturn]] void bad_field(const std::string& path, const std::string& want) {
  fail(kUsage, "config: '" + path + "' " + want);
}

void require(bool ok, const std::string& path, const std::string& want) {
  if (!ok) bad_field(path, want);
}

void check_known(const json& obj, const std::string& path,
                 std::initializer_list<const char*> keys) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) fail(kUsage, "config: unknown key '" + joined(path, it.key()) + "'");
  }
}

const json* field(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

const json& section(const json& obj, const std::string& path, const char* key,
                    bool& present) {
  static const json empty = json::object();
  const json* v = field(obj, key);
  present = v != nullptr;
  if (!present) return empty;
  if (!v->is_object()) bad_field(joined(path, key), "should be an object");
  return *v;
}

double number_field(const json& sec, const std::string& path, const char* key,
                    double fallback) {
  const json* v = field(sec, key);
  if (!v) return fallback;
  if (!v->is_number()) bad_field(joined(path, key), "should be a number");
  const double out = v->get<double>();
  if (!std::isfinite(out)) bad_field(joined(path, key), "should be finite");
  return out;
}

double positive_field(const json& sec, const std::string& path, const char* key,
                      double fallback) {
  const double out = number_field(sec, path, key, fallback);
  require(out > 0.0, joined(path, key), "should be positive");
  return out;
}

double unit_field(const json& sec, const std::string& path, const char* key,
                  double fallback) {
  const double out = number_field(sec, path, key, fallback);
  require(out >= 0.0 && out <= 1.0, joined(path, key), "should lie in [0, 1]");
  return out;
}

long long int_field(const json& sec, const std::string& path, const char* key,
                    long long fallback, long long min_value) {
  const json* v = field(sec, key);
  if (!v) return fallback;
  if (!v->is_number_integer()) bad_field(joined(path, key), "should be an integer");
  const long long out = v->get<long long>();
  require(out >= min_value, joined(path, key),
          "should be at least " + std::to_string(min_value));
  return out;
}

std::uint64_t seed_field(const json& sec, const std::string& path,
                         const char* key, std::uint64_t fallback) {
  const json* v = field(sec, key);
  if (!v) return fallback;
  const bool ok = v->is_number_unsigned() ||
                  (v->is_number_integer() && v->get<long long>() >= 0);
  if (!ok) bad_field(joined(path, key), "should be a non-negative integer");
  return v->get<std::uint64_t>();
}

bool bool_field(const json& sec, const std::string& path, const char* key,
                bool fallback) {
  const json* v = field(sec, key);
  if (!v) return fallback;
  if (!v->is_boolean()) bad_field(joined(path, key), "should be true or false");
  return v->get<bool>();
}

std::vector<std::string> channel_field(const json& sec, const std::string& path,
                                       const char* key,
                                       std::vector<std::string> fallback) {
  const json* v = field(sec, key);
  if (!v) return fallback;
  if (!v->is_array()) bad_field(joined(path, key), "should be an array of channel names");
  std::vector<std::string> out;
  for (const auto& item : *v) {
    if (!item.is_string() || item.get<std::string>().empty()) {
      bad_field(joined(path, key), "should contain non-empty strings");
    }
    out.push_back(item.get<std::string>());
  }
  return out;
}

std::array<double, 3> fractions_field(const json& sec, const std::string& path,
                                      std::array<double, 3> fallback) {
  const json* v = field(sec, "fractions");
  if (!v) return fallback;
  const std::string where = joined(path, "fractions");
  if (!v->is_array() || v->size() != 3) {
    bad_field(where, "should be [train, eval, test] fractions");
  }
  std::array<double, 3> out{};
  double sum = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& item = (*v)[k];
    if (!item.is_number()) bad_field(where, "should hold three numbers");
    out[k] = item.get<double>();
    require(out[k] >= 0.0 && out[k] <= 1.0, where, "entries should lie in [0, 1]");
    const double pct = out[k] * 100.0;
    require(std::abs(pct - std::round(pct)) < 1e-9, where,
            "entries should be whole percents");
    sum += out[k];
  }
  require(std::abs(sum - 1.0) < 1e-9, where, "should sum to 1");
  return out;
}

std::vector<Eigen::Index> horizons_field(const json& sec, const std::string& path,
                                         std::vector<Eigen::Index> fallback) {
  const json* v = field(sec, "horizons");
  if (!v) return fallback;
  const std::string where = joined(path, "horizons");
  if (!v->is_array() || v->empty()) {
    bad_field(where, "should be a non-empty array of step counts");
  }
  std::vector<Eigen::Index> out;
  for (const auto& item : *v) {
    if (!item.is_number_integer() || item.get<long long>() < 1) {
      bad_field(where, "should hold integers of at least 1");
    }
    out.push_back(static_cast<Eigen::Index>(item.get<long long>()));
  }
  return out;
}

void parse_data_section(const json& sec, RunConfig& c) {
  const std::string path = "data";
  check_known(sec, path,
              {"grid_step_h", "obs_channels", "int_channels", "fractions",
               "fold", "synthetic"});
  c.grid_step_h = positive_field(sec, path, "grid_step_h", c.grid_step_h);
  c.obs_channels = channel_field(sec, path, "obs_channels", c.obs_channels);
  c.int_channels = channel_field(sec, path, "int_channels", c.int_channels);
  c.fractions = fractions_field(sec, path, c.fractions);
  c.fold = static_cast<int>(int_field(sec, path, "fold", c.fold, 0));
  require(c.fold < 10, joined(path, "fold"), "should lie in [0, 10)");

  bool present = false;
  const json& syn = section(sec, path, "synthetic", present);
  if (!present) return;
  const std::string sp = "data.synthetic";
  check_known(syn, sp,
              {"n_patients", "min_steps", "max_steps", "z_dim", "o_dim",
               "i_dim", "family", "params_seed", "missing_rate",
               "intervention_sparsity", "state_noise", "obs_noise", "int_noise",
               "grid_step_h"});
  auto& s = c.synthetic;
  s.n_patients = static_cast<int>(int_field(syn, sp, "n_patients", s.n_patients, 1));
  s.min_steps = static_cast<int>(int_field(syn, sp, "min_steps", s.min_steps, 1));
  s.max_steps = static_cast<int>(int_field(syn, sp, "max_steps", s.max_steps, 1));
  s.z_dim = static_cast<int>(int_field(syn, sp, "z_dim", s.z_dim, 1));
  s.o_dim = static_cast<int>(int_field(syn, sp, "o_dim", s.o_dim, 1));
  s.i_dim = static_cast<int>(int_field(syn, sp, "i_dim", s.i_dim, 1));
  if (const json* v = field(syn, "family")) {
    if (!v->is_string()) bad_field(joined(sp, "family"), "should be a string");
    const std::string name = v->get<std::string>();
    if (name == "linear") {
      s.family = data::SyntheticConfig::Family::kLinear;
    } else if (name == "nonlinear") {
      s.family = data::SyntheticConfig::Family::kNonlinear;
    } else {
      bad_field(joined(sp, "family"),
                "should be 'linear' or 'nonlinear' (got '" + name + "')");
    }
  }
  s.params_seed = seed_field(syn, sp, "params_seed", s.params_seed);
  s.missing_rate = unit_field(syn, sp, "missing_rate", s.missing_rate);
  s.intervention_sparsity =
      unit_field(syn, sp, "intervention_sparsity", s.intervention_sparsity);
  s.state_noise = number_field(syn, sp, "state_noise", s.state_noise);
  s.obs_noise = number_field(syn, sp, "obs_noise", s.obs_noise);
  s.int_noise = number_field(syn, sp, "int_noise", s.int_noise);
  require(s.state_noise >= 0.0, joined(sp, "state_noise"), "should be non-negative");
  require(s.obs_noise >= 0.0, joined(sp, "obs_noise"), "should be non-negative");
  require(s.int_noise >= 0.0, joined(sp, "int_noise"), "should be non-negative");
  s.grid_step_h = positive_field(syn, sp, "grid_step_h", s.grid_step_h);
  try {
    s.validate();
  } catch (const std::exception& e) {
    fail(kUsage, std::string("config: data.synthetic: ") + e.what());
  }
}

void parse_model_section(const json& sec, pipelines::ModelShape& m) {
  const std::string path = "model";
  check_known(sec, path,
              {"z", "hidden", "layers", "lstm_hidden", "comb_hidden",
               "comb_layers"});
  m.z = static_cast<Eigen::Index>(int_field(sec, path, "z", m.z, 1));
  m.hidden = static_cast<Eigen::Index>(int_field(sec, path, "hidden", m.hidden, 1));
  m.layers = static_cast<std::size_t>(
      int_field(sec, path, "layers", static_cast<long long>(m.layers), 1));
  m.lstm_hidden = static_cast<Eigen::Index>(
      int_field(sec, path, "lstm_hidden", m.lstm_hidden, 1));
  m.comb_hidden = static_cast<Eigen::Index>(
      int_field(sec, path, "comb_hidden", m.comb_hidden, 1));
  m.comb_layers = static_cast<std::size_t>(int_field(
      sec, path, "comb_layers", static_cast<long long>(m.comb_layers), 1));
}

void parse_train_section(const json& sec, pipelines::TrainConfig& t) {
  const std::string path = "train";
  check_known(sec, path,
              {"strategy", "learning_rate", "batch_size", "epochs_si",
               "epochs_tf", "beta1", "beta2", "adam_eps", "grad_clip", "seed",
               "t_star_fraction", "t_star_fixed", "tf_horizon", "n_samples",
               "eval_samples", "patience", "include_initial_kl",
               "freeze_encoder_in_tf"});
  if (const json* v = field(sec, "strategy")) {
    if (!v->is_string()) bad_field(joined(path, "strategy"), "should be a string");
    const std::string name = v->get<std::string>();
    try {
      t.strategy = pipelines::parse_strategy(name);
    } catch (const std::exception&) {
      bad_field(joined(path, "strategy"),
                "should be one of si+tf, tf, hr, kf (got '" + name + "')");
    }
  }
  t.learning_rate = positive_field(sec, path, "learning_rate", t.learning_rate);
  t.batch_size = static_cast<int>(int_field(sec, path, "batch_size", t.batch_size, 1));
  t.epochs_si = static_cast<int>(int_field(sec, path, "epochs_si", t.epochs_si, 0));
  t.epochs_tf = static_cast<int>(int_field(sec, path, "epochs_tf", t.epochs_tf, 0));
  t.beta1 = number_field(sec, path, "beta1", t.beta1);
  t.beta2 = number_field(sec, path, "beta2", t.beta2);
  require(t.beta1 >= 0.0 && t.beta1 < 1.0, joined(path, "beta1"),
          "should lie in [0, 1)");
  require(t.beta2 >= 0.0 && t.beta2 < 1.0, joined(path, "beta2"),
          "should lie in [0, 1)");
  t.adam_eps = positive_field(sec, path, "adam_eps", t.adam_eps);
  t.grad_clip = positive_field(sec, path, "grad_clip", t.grad_clip);
  t.seed = seed_field(sec, path, "seed", t.seed);
  t.t_star_fraction = number_field(sec, path, "t_star_fraction", t.t_star_fraction);
  require(t.t_star_fraction > 0.0 && t.t_star_fraction < 1.0,
          joined(path, "t_star_fraction"), "should lie in (0, 1)");
  t.t_star_fixed = static_cast<Eigen::Index>(
      int_field(sec, path, "t_star_fixed", t.t_star_fixed, -1));
  t.tf_horizon = static_cast<Eigen::Index>(
      int_field(sec, path, "tf_horizon", t.tf_horizon, 1));
  t.n_samples = static_cast<int>(int_field(sec, path, "n_samples", t.n_samples, 1));
  t.eval_samples =
      static_cast<int>(int_field(sec, path, "eval_samples", t.eval_samples, 1));
  t.patience = static_cast<int>(int_field(sec, path, "patience", t.patience, 1));
  t.include_initial_kl =
      bool_field(sec, path, "include_initial_kl", t.include_initial_kl);
  t.freeze_encoder_in_tf =
      bool_field(sec, path, "freeze_encoder_in_tf", t.freeze_encoder_in_tf);
}

void parse_eval_section(const json& sec, RunConfig& c) {
  const std::string path = "eval";
  check_known(sec, path, {"t_star", "horizons", "n_paths", "seed", "denormalize"});
  c.eval.t_star = static_cast<Eigen::Index>(
      int_field(sec, path, "t_star", c.eval.t_star, 1));
  c.eval.horizons = horizons_field(sec, path, c.eval.horizons);
  c.eval.n_paths = static_cast<int>(int_field(sec, path, "n_paths", c.eval.n_paths, 1));
  c.eval.seed = seed_field(sec, path, "seed", c.eval.seed);
  c.denormalize = bool_field(sec, path, "denormalize", c.denormalize);
}

RunConfig parse_run_config(const json& root) {
  RunConfig c;
  if (!root.is_object()) {
    fail(kUsage, "config: the document root should be an object");
  }
  check_known(root, "", {"data", "model", "train", "eval"});
  bool present = false;
  const json& d = section(root, "", "data", present);
  if (present) parse_data_section(d, c);
  const json& m = section(root, "", "model", present);
  if (present) parse_model_section(m, c.train.model);
  const json& t = section(root, "", "train", present);
  if (present) parse_train_section(t, c.train);
  const json& e = section(root, "", "eval", present);
  if (present) parse_eval_section(e, c);
  try {
    c.train.validate();
  } catch (const std::exception& e2) {
    std::string what = e2.what();
    const std::string prefix = "train config: ";
    if (what.rfind(prefix, 0) == 0) what = "train: " + what.substr(prefix.size());
    fail(kUsage, "config: " + what);
  }
  return c;
}

json load_config_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) fail(kUsage, "config: cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(kUsage, "config: '" + path + "' is not valid JSON: " + e.what());
  }
}

json synthetic_json(const data::SyntheticConfig& s) {
  return json{
      {"n_patients", s.n_patients},
      {"min_steps", s.min_steps},
      {"max_steps", s.max_steps},
      {"z_dim", s.z_dim},
      {"o_dim", s.o_dim},
      {"i_dim", s.i_dim},
      {"family",
       s.family == data::SyntheticConfig::Family::kLinear ? "linear" : "nonlinear"},
      {"params_seed", s.params_seed},
      {"missing_rate", s.missing_rate},
      {"intervention_sparsity", s.intervention_sparsity},
      {"state_noise", s.state_noise},
      {"obs_noise", s.obs_noise},
      {"int_noise", s.int_noise},
      {"grid_step_h", s.grid_step_h},
  };
}

json resolved_config_json(const RunConfig& c) {
  json horizons = json::array();
  for (Eigen::Index h : c.eval.horizons) {
    horizons.push_back(static_cast<long long>(h));
  }
  // Worker counts stay out of the echo on purpose: outputs must not depend
  // on --threads.
  return json{
      {"data",
       json{{"grid_step_h", c.grid_step_h},
            {"obs_channels", c.obs_channels},
            {"int_channels", c.int_channels},
            {"fractions", c.fractions},
            {"fold", c.fold},
            {"synthetic", synthetic_json(c.synthetic)}}},
      {"model",
       json{{"z", static_cast<long long>(c.train.model.z)},
            {"hidden", static_cast<long long>(c.train.model.hidden)},
            {"layers", c.train.model.layers},
            {"lstm_hidden", static_cast<long long>(c.train.model.lstm_hidden)},
            {"comb_hidden", static_cast<long long>(c.train.model.comb_hidden)},
            {"comb_layers", c.train.model.comb_layers}}},
      {"train",
       json{{"strategy", pipelines::strategy_name(c.train.strategy)},
            {"learning_rate", c.train.learning_rate},
            {"batch_size", c.train.batch_size},
            {"epochs_si", c.train.epochs_si},
            {"epochs_tf", c.train.epochs_tf},
            {"beta1", c.train.beta1},
            {"beta2", c.train.beta2},
            {"adam_eps", c.train.adam_eps},
            {"grad_clip", c.train.grad_clip},
            {"seed", c.train.seed},
            {"t_star_fraction", c.train.t_star_fraction},
            {"t_star_fixed", static_cast<long long>(c.train.t_star_fixed)},
            {"tf_horizon", static_cast<long long>(c.train.tf_horizon)},
            {"n_samples", c.train.n_samples},
            {"eval_samples", c.train.eval_samples},
            {"patience", c.train.patience},
            {"include_initial_kl", c.train.include_initial_kl},
            {"freeze_encoder_in_tf", c.train.freeze_encoder_in_tf}}},
      {"eval",
       json{{"t_star", static_cast<long long>(c.eval.t_star)},
            {"horizons", horizons},
            {"n_paths", c.eval.n_paths},
            {"seed", c.eval.seed},
            {"denormalize", c.denormalize}}},
  };
}

// ---------------------------------------------------------------------------
// file plumbing

void ensure_parent(const fs::path& p) {
  const fs::path dir = p.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
}

std::ofstream open_out(const fs::path& p) {
  ensure_parent(p);
  std::ofstream out(p);
  if (!out) fail(kUsage, "cannot write '" + p.string() + "'");
  return out;
}

void write_json_file(const fs::path& p, const json& j) {
  auto out = open_out(p);
  out << j.dump(2) << '\n';
}

std::vector<data::EventStream> read_events_or_die(const std::string& path) {
  if (!fs::exists(path)) fail(kUsage, "cannot open events file '" + path + "'");
  try {
    return data::read_events(path);
  } catch (const std::exception& e) {
    fail(kDataError, e.what());
  }
}

std::vector<data::PatientRecord> read_records_or_die(const std::string& path) {
  if (!fs::exists(path)) fail(kUsage, "cannot open records file '" + path + "'");
  try {
    return data::read_records(path);
  } catch (const std::exception& e) {
    fail(kDataError, e.what());
  }
}

data::NormalizationStats read_stats_or_die(const std::string& path) {
  if (!fs::exists(path)) {
    fail(kUsage, "cannot open normalization file '" + path + "'");
  }
  try {
    return data::read_normalization(path);
  } catch (const std::exception& e) {
    fail(kDataError, e.what());
  }
}

pipelines::CheckpointEnvelope load_checkpoint_or_die(const std::string& path) {
  if (!fs::exists(path)) fail(kUsage, "cannot open checkpoint '" + path + "'");
  try {
    return pipelines::load_checkpoint(path);
  } catch (const std::exception& e) {
    fail(kUsage, e.what());
  }
}

json parsed_or_string(const std::string& text) {
  const json parsed = json::parse(text, nullptr, false);
  if (parsed.is_discarded()) return json(text);
  return parsed;
}

json matrix_rows(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_values(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) out.push_back(v[k]);
  return out;
}

// Shortest round-trip formatting, same as the JSON artifacts, so CSV cells
// rerun byte-identically.
std::string num(double v) { return json(v).dump(); }

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(const RunConfig& cfg, std::uint64_t seed,
                 const std::string& out_dir) {
  data::SyntheticDataset ds;
  try {
    ds = data::simulate(cfg.synthetic, seed);
  } catch (const std::exception& e) {
    fail(kUsage, std::string("config: data.synthetic: ") + e.what());
  }
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  data::write_events(ds.events, (dir / "events.jsonl").string());

  json truth;
  truth["tool"] = tool_string();
  truth["seed"] = seed;
  truth["config"] = resolved_config_json(cfg);
  if (ds.family == data::SyntheticConfig::Family::kLinear) {
    truth["family"] = "linear";
    truth["params"] = json{{"A", matrix_rows(ds.linear.a)},
                           {"B", matrix_rows(ds.linear.b)},
                           {"C", matrix_rows(ds.linear.c)},
                           {"D", matrix_rows(ds.linear.d)},
                           {"Q", matrix_rows(ds.linear.q)},
                           {"R", matrix_rows(ds.linear.r)},
                           {"U", matrix_rows(ds.linear.u)},
                           {"m0", vector_values(ds.linear.m0)},
                           {"P0", matrix_rows(ds.linear.p0)}};
  } else {
    truth["family"] = "nonlinear";
    json params;
    for (const auto& [name, tensor] : dssm::to_parameter_set(ds.nonlinear)) {
      json shape = json::array();
      for (std::size_t s : tensor.shape()) shape.push_back(s);
      params[name] = json{{"shape", shape}, {"values", tensor.values()}};
    }
    truth["params"] = params;
  }
  write_json_file(dir / "truth.json", truth);

  std::size_t n_events = 0;
  for (const auto& stream : ds.events) n_events += stream.events.size();
  std::cout << "simulate: " << ds.events.size() << " patients, " << n_events
            << " events -> " << out_dir << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// prepare

int cmd_prepare(const RunConfig& cfg, const std::string& events_path,
                const std::string& out_dir) {
  if (cfg.obs_channels.empty()) {
    fail(kUsage, "config: 'data.obs_channels' must list the observation channels to grid");
  }
  if (cfg.int_channels.empty()) {
    fail(kUsage, "config: 'data.int_channels' must list the intervention channels to grid");
  }
  const auto streams = read_events_or_die(events_path);
  data::PreparedData prepared;
  try {
    prepared = data::prepare_dataset(streams, cfg.grid_step_h, cfg.obs_channels,
                                     cfg.int_channels, cfg.fractions, cfg.fold);
  } catch (const std::exception& e) {
    fail(kDataError, e.what());
  }
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  data::write_records(prepared.train, (dir / "train.jsonl").string());
  data::write_records(prepared.eval, (dir / "eval.jsonl").string());
  data::write_records(prepared.test, (dir / "test.jsonl").string());
  data::write_thresholds(prepared.thresholds, (dir / "thresholds.json").string());
  data::write_normalization(prepared.stats, (dir / "normalization.json").string());
  json meta{{"tool", tool_string()},
            {"config", resolved_config_json(cfg)},
            {"counts", json{{"train", prepared.train.size()},
                            {"eval", prepared.eval.size()},
                            {"test", prepared.test.size()}}}};
  write_json_file(dir / "meta.json", meta);
  std::cout << "prepare: " << prepared.train.size() << " train / "
            << prepared.eval.size() << " eval / " << prepared.test.size()
            << " test records -> " << out_dir << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const RunConfig& cfg, const std::string& data_dir,
              const std::string& out_path) {
  const fs::path dir(data_dir);
  const auto train_recs = read_records_or_die((dir / "train.jsonl").string());
  const auto eval_recs = read_records_or_die((dir / "eval.jsonl").string());
  const auto stats = read_stats_or_die((dir / "normalization.json").string());

  pipelines::TrainResult result;
  try {
    result = pipelines::train(train_recs, eval_recs, stats, cfg.train);
  } catch (const std::invalid_argument& e) {
    fail(kDataError, e.what());
  }
  const std::string echo = resolved_config_json(cfg).dump();

  fs::path curve_path(out_path);
  curve_path.replace_extension();
  curve_path += ".curve.csv";
  {
    auto cs = open_out(curve_path);
    cs << "# " << tool_string() << '\n';
    cs << "# config: " << echo << '\n';
    cs << "epoch,train_objective,eval_objective\n";
    for (const auto& p : result.curve) {
      cs << p.epoch << ',' << num(p.train_objective) << ','
         << num(p.eval_objective) << '\n';
    }
  }

  bool wrote_checkpoint = false;
  if (!result.checkpoint.tensors.empty()) {
    pipelines::CheckpointEnvelope env = result.checkpoint;
    env.config_echo = echo;
    auto os = open_out(out_path);
    pipelines::save_checkpoint(env, os);
    wrote_checkpoint = true;
  }

  if (result.diverged) {
    std::cerr << "ssmcast: training diverged: " << result.diagnostics << '\n';
    if (wrote_checkpoint) {
      std::cerr << "ssmcast: kept the last good checkpoint at " << out_path << '\n';
    }
    return kDiverged;
  }
  std::cout << "train[" << pipelines::strategy_name(cfg.train.strategy)
            << "]: best eval objective " << result.best_eval << " over "
            << result.curve.size() << " curve points -> " << out_path << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// forecast

struct ForecastArgs {
  std::string ckpt;
  std::string records;
  std::string out;
  Eigen::Index t_star = 0;
  Eigen::Index horizon = 0;
  int n_paths = 0;
  std::uint64_t seed = 0;
  bool denorm = false;
  bool strict = false;
  int threads = 0;
};

int cmd_forecast(const RunConfig& cfg, const ForecastArgs& a) {
  if (a.t_star < 1) fail(kUsage, "--t-star must be at least 1");
  if (a.horizon < 1) fail(kUsage, "--horizon must be at least 1");
  if (a.n_paths < 1) fail(kUsage, "--n-paths must be at least 1");
  const auto env = load_checkpoint_or_die(a.ckpt);
  pipelines::LoadedModel model;
  try {
    model = pipelines::materialize(env);
  } catch (const std::exception& e) {
    fail(kUsage, e.what());
  }
  const auto records = read_records_or_die(a.records);
  for (const auto& r : records) {
    if (r.obs_channels != env.obs_channels || r.int_channels != env.int_channels) {
      fail(kDataError,
           "record '" + r.patient_id + "' channels disagree with the checkpoint");
    }
  }

  std::vector<std::string> skipped;
  std::vector<const data::PatientRecord*> active;
  for (const auto& r : records) {
    if (r.steps() < a.t_star) {
      if (a.strict) {
        fail(kEvalError, "record '" + r.patient_id + "' has only " +
                             std::to_string(r.steps()) +
                             " steps, the forecast origin needs " +
                             std::to_string(a.t_star));
      }
      skipped.push_back(r.patient_id);
      continue;
    }
    if (a.strict && r.steps() < a.t_star + a.horizon) {
      fail(kEvalError, "record '" + r.patient_id + "' ends at step " +
                           std::to_string(r.steps()) +
                           ", the forecast needs t_star + horizon = " +
                           std::to_string(a.t_star + a.horizon));
    }
    active.push_back(&r);
  }

  const int workers = resolve_thread_count(a.threads);
  auto lines = parallel_map_n<std::string>(
      active.size(),
      [&](std::size_t i) {
        const auto& r = *active[i];
        auto fr = pipelines::forecast_with(model, r, a.t_star, a.horizon,
                                           a.n_paths,
                                           mix_seed(a.seed, fnv1a64(r.patient_id)));
        if (a.denorm) {
          fr = data::invert_normalization(fr, env.stats, env.obs_channels,
                                          env.int_channels);
        }
        const json line{{"patient_id", r.patient_id},
                        {"origin", static_cast<long long>(a.t_star)},
                        {"obs_mean", matrix_rows(fr.obs_mean)},
                        {"obs_var", matrix_rows(fr.obs_var)},
                        {"int_mean", matrix_rows(fr.int_mean)},
                        {"int_var", matrix_rows(fr.int_var)}};
        return line.dump();
      },
      workers);

  auto os = open_out(a.out);
  const json meta{{"tool", tool_string()},
                  {"config", resolved_config_json(cfg)},
                  {"checkpoint_config", parsed_or_string(env.config_echo)},
                  {"model_kind", env.model_kind},
                  {"strategy", pipelines::strategy_name(env.strategy)},
                  {"t_star", static_cast<long long>(a.t_star)},
                  {"horizon", static_cast<long long>(a.horizon)},
                  {"n_paths", a.n_paths},
                  {"seed", a.seed},
                  {"denormalized", a.denorm},
                  {"skipped", skipped}};
  os << meta.dump() << '\n';
  for (const auto& line : lines) os << line << '\n';
  std::cout << "forecast: " << active.size() << " records ("
            << skipped.size() << " skipped) -> " << a.out << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string ckpt;
  std::string records;
  bool use_cv = false;
  std::string events;
  int folds = 10;
  std::string out;
  int threads = 0;
};

int cmd_evaluate(const RunConfig& cfg, const EvaluateArgs& a) {
  pipelines::EvalPolicy policy = cfg.eval;
  policy.threads = a.threads;
  pipelines::MetricsReport report;
  json echo{{"run", resolved_config_json(cfg)}};

  if (a.use_cv) {
    if (a.events.empty()) {
      fail(kUsage, "--cv needs --events with the raw event streams");
    }
    if (cfg.obs_channels.empty() || cfg.int_channels.empty()) {
      fail(kUsage,
           "config: 'data.obs_channels' and 'data.int_channels' must be set for --cv");
    }
    const auto streams = read_events_or_die(a.events);
    pipelines::TrainConfig tcfg = cfg.train;
    tcfg.threads = a.threads;
    try {
      report = pipelines::cross_validate(streams, cfg.grid_step_h,
                                         cfg.obs_channels, cfg.int_channels,
                                         tcfg, policy, a.folds);
    } catch (const std::invalid_argument& e) {
      fail(kEvalError, e.what());
    } catch (const std::runtime_error& e) {
      const std::string what = e.what();
      fail(what.find("diverg") != std::string::npos ? kDiverged : kEvalError, what);
    }
  } else {
    if (a.ckpt.empty() || a.records.empty()) {
      fail(kUsage, "evaluate needs --ckpt and --records (or --cv with --events)");
    }
    const auto env = load_checkpoint_or_die(a.ckpt);
    const auto test = read_records_or_die(a.records);
    echo["checkpoint"] = parsed_or_string(env.config_echo);
    try {
      report = pipelines::evaluate_mae(env, test, policy);
    } catch (const std::invalid_argument& e) {
      fail(kEvalError, e.what());
    }
  }
  report.config_echo = echo.dump();

  fs::path base(a.out);
  if (base.extension() == ".json" || base.extension() == ".csv") {
    base.replace_extension();
  }
  fs::path json_path = base;
  json_path += ".json";
  fs::path csv_path = base;
  csv_path += ".csv";
  {
    auto js = open_out(json_path);
    js << pipelines::metrics_json(report);
  }
  {
    auto cs = open_out(csv_path);
    pipelines::write_metrics_csv(report, cs);
  }
  for (const auto& h : report.horizons) {
    std::cout << "mae@" << h.horizon << ": " << h.mae << " (sem " << h.sem
              << ", " << h.fold_mae.size() << " folds)\n";
  }
  std::cout << "evaluate: wrote " << json_path.string() << " and "
            << csv_path.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckDims {
  Eigen::Index z = 2;
  Eigen::Index o = 3;
  Eigen::Index i = 2;
  Eigen::Index steps = 4;
};

GradcheckDims parse_dims(const std::string& text) {
  GradcheckDims d;
  if (text.empty()) return d;
  std::vector<long long> parts;
  std::stringstream ss(text);
  std::string piece;
  while (std::getline(ss, piece, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(piece, &used);
      if (used != piece.size() || v < 1) throw std::invalid_argument(piece);
      parts.push_back(v);
    } catch (const std::exception&) {
      fail(kUsage, "--dims expects 'z,o,i,steps' with positive integers (got '" +
                       text + "')");
    }
  }
  if (parts.size() != 4) {
    fail(kUsage, "--dims expects exactly four values 'z,o,i,steps' (got '" +
                     text + "')");
  }
  d.z = parts[0];
  d.o = parts[1];
  d.i = parts[2];
  d.steps = parts[3];
  return d;
}

int cmd_gradcheck(const std::string& dims_text, std::uint64_t seed) {
  const GradcheckDims d = parse_dims(dims_text);
  // Compact networks keep the sweep in seconds; every primitive the full-size
  // models use appears at these widths too.
  const auto deep = dssm::make_deep_ssm(d.z, d.o, d.i,
                                        mix_seed(seed, fnv1a64("gradcheck-model")),
                                        8, 2);
  const auto enc = dssm::make_encoder(d.z, d.o, d.i,
                                      mix_seed(seed, fnv1a64("gradcheck-encoder")),
                                      10, 8, 2);
  diffmath::ParameterSet params = dssm::to_parameter_set(deep);
  for (const auto& [name, tensor] : dssm::to_parameter_set(enc)) {
    params.set(name, tensor);
  }

  Rng rng(mix_seed(seed, fnv1a64("gradcheck-record")));
  data::PatientRecord rec;
  rec.patient_id = "gradcheck";
  rec.grid_step_h = 1.0;
  rec.obs_channels = data::channel_names("obs", static_cast<int>(d.o));
  rec.int_channels = data::channel_names("int", static_cast<int>(d.i));
  rec.x = Eigen::MatrixXd(d.steps, d.o);
  for (Eigen::Index t = 0; t < d.steps; ++t) {
    for (Eigen::Index j = 0; j < d.o; ++j) rec.x(t, j) = 0.5 * rng.normal();
  }
  rec.u = Eigen::MatrixXd::Zero(d.steps, d.i);
  for (Eigen::Index t = 1; t < d.steps; ++t) {
    for (Eigen::Index c = 0; c < d.i; ++c) rec.u(t, c) = 0.4 * rng.normal();
  }
  rec.x_mask = data::BoolGrid::Constant(d.steps, d.o, true);
  rec.u_mask = data::BoolGrid::Constant(d.steps, d.i, true);

  const int n_samples = 2;
  const Eigen::Index t_star = std::max<Eigen::Index>(1, d.steps / 2);
  const Eigen::Index horizon = d.steps - t_star;
  const auto plan_si = dssm::NoisePlan::make(
      n_samples, static_cast<std::size_t>(d.steps), d.z, d.i,
      mix_seed(seed, fnv1a64("gradcheck-noise-si")));
  const auto plan_tf = dssm::NoisePlan::make(
      n_samples, static_cast<std::size_t>(d.steps), d.z, d.i,
      mix_seed(seed, fnv1a64("gradcheck-noise-tf")));

  const diffmath::DiffFunction bound_si =
      [&](diffmath::Tape& t, const std::map<std::string, diffmath::ValueId>& ids) {
        return dssm::record_elbo_system_id(t, ids, rec, plan_si, n_samples, true)
            .elbo;
      };
  const diffmath::DiffFunction bound_tf =
      [&](diffmath::Tape& t, const std::map<std::string, diffmath::ValueId>& ids) {
        return dssm::record_elbo_forecast(t, ids, rec, t_star, horizon, plan_tf,
                                          n_samples, true)
            .elbo;
      };

  std::cout << "gradcheck: z=" << d.z << " o=" << d.o << " i=" << d.i
            << " steps=" << d.steps << " seed=" << seed << '\n';
  std::vector<std::string> failed;
  auto run_bound = [&](const char* label, const diffmath::DiffFunction& f) {
    diffmath::ParameterSet broken;
    const diffmath::ParameterSet* analytic = nullptr;
#ifdef SSMCAST_FD_FAULT
    // Negative control: hand the checker a deliberately wrong gradient so a
    // healthy run proves the check can fail.
    const auto vg = diffmath::value_and_gradient(f, params);
    broken = vg.gradients;
    std::vector<double> bent = broken.at("m0").values();
    bent[0] += std::max(1.0, std::abs(bent[0]));
    broken.set("m0", diffmath::Tensor::vector(bent));
    analytic = &broken;
#endif
    const auto report = diffmath::finite_difference_check(f, params, 1e-5, 1e-4,
                                                          analytic);
    std::cout << "bound " << label << ":\n";
    for (const auto& entry : report.entries) {
      std::ostringstream err;
      err << std::scientific << std::setprecision(2) << entry.max_rel_err;
      std::cout << "  " << std::left << std::setw(24) << entry.name
                << std::right << std::setw(10) << err.str() << "  "
                << (entry.pass ? "ok" : "FAIL") << '\n';
      if (!entry.pass) failed.push_back(std::string(label) + ":" + entry.name);
    }
    return report.pass;
  };

  const bool si_ok = run_bound("system-id", bound_si);
  const bool tf_ok = run_bound("forecast", bound_tf);
  if (si_ok && tf_ok) {
    std::cout << "gradcheck: all tensors within tolerance 0.0001 on both bounds\n";
    return kOk;
  }
  std::ostringstream names;
  for (std::size_t k = 0; k < failed.size(); ++k) {
    names << (k == 0 ? "" : ", ") << failed[k];
  }
  std::cerr << "ssmcast: gradcheck failed for " << names.str() << '\n';
  return kDiverged;
}

// ---------------------------------------------------------------------------
// horizon list flag

std::vector<Eigen::Index> parse_horizons_flag(const std::string& text) {
  std::vector<Eigen::Index> out;
  std::stringstream ss(text);
  std::string piece;
  while (std::getline(ss, piece, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(piece, &used);
      if (used != piece.size() || v < 1) throw std::invalid_argument(piece);
      out.push_back(static_cast<Eigen::Index>(v));
    } catch (const std::exception&) {
      fail(kUsage,
           "--horizons expects comma-separated positive step counts (got '" +
               text + "')");
    }
  }
  if (out.empty()) fail(kUsage, "--horizons expects at least one step count");
  return out;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"ssmcast: probabilistic forecasting of observations and "
               "interventions on gridded clinical time series"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand(
      "simulate", "generate synthetic EMR-like events from a known system");
  std::string sim_config;
  std::uint64_t sim_seed = 0;
  std::string sim_out;
  sim->add_option("--config", sim_config, "run config JSON file");
  sim->add_option("--seed", sim_seed, "simulation seed")->capture_default_str();
  sim->add_option("--out", sim_out, "output directory")->required();

  // prepare
  auto* prep = app.add_subcommand(
      "prepare", "grid event streams into per-split records plus sidecars");
  std::string prep_config;
  std::string prep_events;
  std::string prep_out;
  double prep_grid = 0.0;
  int prep_fold = 0;
  prep->add_option("--config", prep_config, "run config JSON file");
  prep->add_option("--events", prep_events, "input events JSONL")->required();
  prep->add_option("--out", prep_out, "output directory")->required();
  auto* prep_grid_opt =
      prep->add_option("--grid-step", prep_grid, "grid step in hours");
  auto* prep_fold_opt =
      prep->add_option("--fold", prep_fold, "split rotation fold in [0, 10)");

  // train
  auto* tr = app.add_subcommand("train", "fit a model on a prepared data directory");
  std::string tr_config;
  std::string tr_data;
  std::string tr_strategy;
  std::string tr_out;
  std::uint64_t tr_seed = 0;
  bool tr_drop_kl = false;
  int tr_threads = 0;
  tr->add_option("--config", tr_config, "run config JSON file");
  tr->add_option("--data", tr_data, "prepared data directory")->required();
  auto* tr_strategy_opt =
      tr->add_option("--strategy", tr_strategy, "si+tf | tf | hr | kf");
  tr->add_option("--out", tr_out, "checkpoint path (curve CSV lands beside it)")
      ->required();
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "training seed");
  tr->add_flag("--drop-initial-kl", tr_drop_kl,
               "leave the first-step prior term out of the bound");
  tr->add_option("--threads", tr_threads,
                 "worker threads (0 = SSMCAST_THREADS or machine)");

  // forecast
  auto* fc = app.add_subcommand(
      "forecast", "roll predictive distributions forward from a checkpoint");
  std::string fc_config;
  ForecastArgs fc_args;
  long long fc_t_star = 0;
  long long fc_horizon = 0;
  fc->add_option("--config", fc_config, "run config JSON file");
  fc->add_option("--ckpt", fc_args.ckpt, "checkpoint path")->required();
  fc->add_option("--records", fc_args.records, "records JSONL to condition on")
      ->required();
  fc->add_option("--out", fc_args.out, "output forecasts JSONL")->required();
  auto* fc_t_star_opt = fc->add_option(
      "--t-star", fc_t_star, "forecast origin step (default eval.t_star)");
  auto* fc_horizon_opt = fc->add_option(
      "--horizon", fc_horizon, "steps to roll out (default max eval horizon)");
  auto* fc_paths_opt = fc->add_option("--n-paths", fc_args.n_paths,
                                      "Monte Carlo paths for deep checkpoints");
  auto* fc_seed_opt = fc->add_option("--seed", fc_args.seed, "forecast seed");
  fc->add_flag("--denorm", fc_args.denorm,
               "invert the stored normalization before writing");
  fc->add_flag("--strict", fc_args.strict,
               "fail instead of skipping records the window does not fit");
  fc->add_option("--threads", fc_args.threads,
                 "worker threads (0 = SSMCAST_THREADS or machine)");

  // evaluate
  auto* ev = app.add_subcommand(
      "evaluate", "score forecasts against recorded futures (or run the CV protocol)");
  std::string ev_config;
  EvaluateArgs ev_args;
  std::string ev_horizons;
  long long ev_t_star = 0;
  ev->add_option("--config", ev_config, "run config JSON file");
  ev->add_option("--ckpt", ev_args.ckpt, "checkpoint path (single-split mode)");
  ev->add_option("--records", ev_args.records, "test records JSONL (single-split mode)");
  ev->add_flag("--cv", ev_args.use_cv, "run the fold protocol from raw events");
  ev->add_option("--events", ev_args.events, "events JSONL for --cv");
  ev->add_option("--folds", ev_args.folds, "fold count for --cv")
      ->capture_default_str();
  auto* ev_horizons_opt = ev->add_option(
      "--horizons", ev_horizons, "comma-separated step counts, e.g. 24,48,72");
  auto* ev_t_star_opt =
      ev->add_option("--t-star", ev_t_star, "forecast origin step");
  ev->add_option("--out", ev_args.out, "report base path (.json and .csv)")
      ->required();
  ev->add_option("--threads", ev_args.threads,
                 "worker threads (0 = SSMCAST_THREADS or machine)");

  // gradcheck
  auto* gc = app.add_subcommand(
      "gradcheck", "compare both bound gradients against finite differences");
  std::string gc_dims;
  std::uint64_t gc_seed = 0;
  gc->add_option("--dims", gc_dims, "instance dims as 'z,o,i,steps'")
      ->default_str("2,3,2,4");
  gc->add_option("--seed", gc_seed, "instance seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "ssmcast: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (sim->parsed()) {
      const RunConfig cfg = parse_run_config(load_config_json(sim_config));
      return cmd_simulate(cfg, sim_seed, sim_out);
    }
    if (prep->parsed()) {
      RunConfig cfg = parse_run_config(load_config_json(prep_config));
      if (prep_grid_opt->count() > 0) {
        if (!(prep_grid > 0.0)) fail(kUsage, "--grid-step must be positive");
        cfg.grid_step_h = prep_grid;
      }
      if (prep_fold_opt->count() > 0) {
        if (prep_fold < 0 || prep_fold >= 10) {
          fail(kUsage, "--fold must lie in [0, 10)");
        }
        cfg.fold = prep_fold;
      }
      return cmd_prepare(cfg, prep_events, prep_out);
    }
    if (tr->parsed()) {
      RunConfig cfg = parse_run_config(load_config_json(tr_config));
      if (tr_strategy_opt->count() > 0) {
        try {
          cfg.train.strategy = pipelines::parse_strategy(tr_strategy);
        } catch (const std::exception&) {
          fail(kUsage, "unknown strategy '" + tr_strategy +
                           "' (use si+tf, tf, hr or kf)");
        }
      }
      if (tr_seed_opt->count() > 0) cfg.train.seed = tr_seed;
      if (tr_drop_kl) cfg.train.include_initial_kl = false;
      cfg.train.threads = tr_threads;
      return cmd_train(cfg, tr_data, tr_out);
    }
    if (fc->parsed()) {
      RunConfig cfg = parse_run_config(load_config_json(fc_config));
      fc_args.t_star = fc_t_star_opt->count() > 0
                           ? static_cast<Eigen::Index>(fc_t_star)
                           : cfg.eval.t_star;
      Eigen::Index max_h = 0;
      for (Eigen::Index h : cfg.eval.horizons) max_h = std::max(max_h, h);
      fc_args.horizon = fc_horizon_opt->count() > 0
                            ? static_cast<Eigen::Index>(fc_horizon)
                            : max_h;
      if (fc_paths_opt->count() == 0) fc_args.n_paths = cfg.eval.n_paths;
      if (fc_seed_opt->count() == 0) fc_args.seed = cfg.eval.seed;
      cfg.eval.t_star = fc_args.t_star;
      cfg.eval.n_paths = fc_args.n_paths;
      cfg.eval.seed = fc_args.seed;
      cfg.denormalize = fc_args.denorm;
      return cmd_forecast(cfg, fc_args);
    }
    if (ev->parsed()) {
      RunConfig cfg = parse_run_config(load_config_json(ev_config));
      if (ev_horizons_opt->count() > 0) {
        cfg.eval.horizons = parse_horizons_flag(ev_horizons);
      }
      if (ev_t_star_opt->count() > 0) {
        if (ev_t_star < 1) fail(kUsage, "--t-star must be at least 1");
        cfg.eval.t_star = static_cast<Eigen::Index>(ev_t_star);
      }
      if (ev_args.folds < 1 || ev_args.folds > 10) {
        fail(kUsage, "--folds must lie in [1, 10]");
      }
      return cmd_evaluate(cfg, ev_args);
    }
    if (gc->parsed()) {
      return cmd_gradcheck(gc_dims, gc_seed);
    }
  } catch (const CliError& e) {
    std::cerr << "ssmcast: " << e.message << '\n';
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "ssmcast: " << e.what() << '\n';
    return kUsage;
  }
  return kOk;
}

}  // namespace ssmcast::cli
