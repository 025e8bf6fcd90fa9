#include "ssmcast/pipelines.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "json.hpp"

#include "ssmcast/optim.hpp"
#include "ssmcast/parallel.hpp"
#include "ssmcast/rng.hpp"
#include "ssmcast/version.hpp"

namespace ssmcast::pipelines {
namespace {

using json = nlohmann::json;
namespace diff = ssmcast::diffmath;

std::string tool_string() {
  return std::string(kToolName) + " " + kToolVersion;
}

// ---------------------------------------------------------------------------
// base64 for tensor payloads (little-endian float64 bytes)

constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(const std::vector<double>& values) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  const std::size_t n = values.size() * sizeof(double);
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (std::size_t k = 0; k < n; k += 3) {
    unsigned v = static_cast<unsigned>(bytes[k]) << 16;
    if (k + 1 < n) v |= static_cast<unsigned>(bytes[k + 1]) << 8;
    if (k + 2 < n) v |= static_cast<unsigned>(bytes[k + 2]);
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(k + 1 < n ? kB64Alphabet[(v >> 6) & 63] : '=');
    out.push_back(k + 2 < n ? kB64Alphabet[v & 63] : '=');
  }
  return out;
}

std::vector<double> b64_decode(const std::string& text,
                               const std::string& tensor) {
  auto fail = [&]() -> void {
    throw std::runtime_error("checkpoint tensor '" + tensor +
                             "' has corrupt base64 data");
  };
  if (text.size() % 4 != 0) fail();
  int lookup[256];
  std::fill(std::begin(lookup), std::end(lookup), -1);
  for (int k = 0; k < 64; ++k) {
    lookup[static_cast<unsigned char>(kB64Alphabet[k])] = k;
  }
  std::vector<unsigned char> bytes;
  bytes.reserve(text.size() / 4 * 3);
  for (std::size_t k = 0; k < text.size(); k += 4) {
    int vals[4];
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[k + j];
      if (c == '=') {
        // Padding is only legal in the last two slots of the final group.
        if (k + 4 != text.size() || j < 2) fail();
        vals[j] = 0;
        ++pad;
      } else {
        if (pad > 0) fail();
        vals[j] = lookup[static_cast<unsigned char>(c)];
        if (vals[j] < 0) fail();
      }
    }
    const unsigned v = (static_cast<unsigned>(vals[0]) << 18) |
                       (static_cast<unsigned>(vals[1]) << 12) |
                       (static_cast<unsigned>(vals[2]) << 6) |
                       static_cast<unsigned>(vals[3]);
    bytes.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    if (pad < 2) bytes.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    if (pad < 1) bytes.push_back(static_cast<unsigned char>(v & 0xff));
  }
  if (bytes.size() % sizeof(double) != 0) fail();
  std::vector<double> values(bytes.size() / sizeof(double));
  std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

// ---------------------------------------------------------------------------
// tensor <-> Eigen bridges (tensors are row-major)

diff::Tensor tensor_of(const Eigen::MatrixXd& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      v[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
    }
  }
  return diff::Tensor::matrix(static_cast<std::size_t>(m.rows()),
                              static_cast<std::size_t>(m.cols()),
                              std::move(v));
}

diff::Tensor tensor_of(const Eigen::VectorXd& v) {
  return diff::Tensor::vector(
      std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::MatrixXd matrix_of(const diff::Tensor& t, const std::string& name) {
  if (t.rank() != 2) {
    throw std::runtime_error("checkpoint tensor '" + name +
                             "' should be a matrix");
  }
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
    }
  }
  return m;
}

Eigen::VectorXd vector_of(const diff::Tensor& t, const std::string& name) {
  if (t.rank() != 1) {
    throw std::runtime_error("checkpoint tensor '" + name +
                             "' should be a vector");
  }
  Eigen::VectorXd v(static_cast<Eigen::Index>(t.size()));
  for (std::size_t k = 0; k < t.size(); ++k) {
    v(static_cast<Eigen::Index>(k)) = t[k];
  }
  return v;
}

// ---------------------------------------------------------------------------
// shared json pieces

json stats_to_json(const data::NormalizationStats& stats) {
  json j = json::object();
  j["obs"] = json::object();
  j["int"] = json::object();
  for (const auto& [name, ch] : stats.obs) {
    j["obs"][name] = {{"mean", ch.mean}, {"stddev", ch.stddev}};
  }
  for (const auto& [name, ch] : stats.ints) {
    j["int"][name] = {{"mean", ch.mean}, {"stddev", ch.stddev}};
  }
  return j;
}

data::NormalizationStats stats_from_json(const json& j) {
  if (!j.is_object() || !j.contains("obs") || !j.contains("int")) {
    throw std::runtime_error(
        "checkpoint normalization block needs 'obs' and 'int' objects");
  }
  data::NormalizationStats stats;
  auto read_side = [](const json& side, const char* label) {
    std::map<std::string, data::ChannelStats> out;
    if (!side.is_object()) {
      throw std::runtime_error(std::string("checkpoint normalization '") +
                               label + "' should be an object");
    }
    for (const auto& [name, entry] : side.items()) {
      if (!entry.is_object() || !entry.contains("mean") ||
          !entry.contains("stddev") || !entry["mean"].is_number() ||
          !entry["stddev"].is_number()) {
        throw std::runtime_error("checkpoint normalization entry '" +
                                 std::string(name) +
                                 "' needs numeric mean and stddev");
      }
      data::ChannelStats ch;
      ch.mean = entry["mean"].get<double>();
      ch.stddev = entry["stddev"].get<double>();
      if (!std::isfinite(ch.mean) || !std::isfinite(ch.stddev) ||
          ch.stddev <= 0.0) {
        throw std::runtime_error("checkpoint normalization entry '" +
                                 std::string(name) + "' is not usable");
      }
      out[name] = ch;
    }
    return out;
  };
  stats.obs = read_side(j["obs"], "obs");
  stats.ints = read_side(j["int"], "int");
  return stats;
}

json shape_json(const std::vector<std::size_t>& shape) {
  json arr = json::array();
  for (std::size_t d : shape) arr.push_back(d);
  return arr;
}

json config_echo_json(const std::string& echo) {
  if (echo.empty()) return json::object();
  return json::parse(echo);
}

// ---------------------------------------------------------------------------
// gradient plumbing

double global_norm(const diff::ParameterSet& grads) {
  double sum = 0.0;
  for (const auto& [name, t] : grads) {
    for (double v : t.values()) sum += v * v;
  }
  return std::sqrt(sum);
}

bool encoder_tensor(const std::string& name) {
  return name.rfind("enc.", 0) == 0 || name.rfind("post.", 0) == 0;
}

void zero_encoder_grads(diff::ParameterSet& grads) {
  for (auto& [name, t] : grads) {
    if (!encoder_tensor(name)) continue;
    std::fill(t.data().begin(), t.data().end(), 0.0);
  }
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t k = n; k > 1; --k) {
    const std::uint64_t j = rng.below(k);
    std::swap(order[k - 1], order[j]);
  }
  return order;
}

std::uint64_t record_noise_seed(std::uint64_t seed, const std::string& label,
                                const std::string& patient_id, int epoch) {
  std::uint64_t s = mix_seed(seed, fnv1a64(label));
  s = mix_seed(s, fnv1a64(patient_id));
  return mix_seed(s, static_cast<std::uint64_t>(epoch));
}

}  // namespace

// ---------------------------------------------------------------------------
// names and small config helpers

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kSiTf: return "si+tf";
    case Strategy::kTf: return "tf";
    case Strategy::kHr: return "hr";
    case Strategy::kKf: return "kf";
  }
  throw std::logic_error("strategy_name: unhandled value");
}

Strategy parse_strategy(const std::string& name) {
  if (name == "si+tf") return Strategy::kSiTf;
  if (name == "tf") return Strategy::kTf;
  if (name == "hr") return Strategy::kHr;
  if (name == "kf") return Strategy::kKf;
  throw std::invalid_argument(
      "unknown strategy '" + name + "' (expected si+tf, tf, hr or kf)");
}

Eigen::Index TrainConfig::resolve_t_star(Eigen::Index steps) const {
  const Eigen::Index cap = std::max<Eigen::Index>(1, steps - 1);
  if (t_star_fixed >= 1) return std::min(t_star_fixed, cap);
  const auto scaled = static_cast<Eigen::Index>(
      std::floor(t_star_fraction * static_cast<double>(steps)));
  return std::clamp<Eigen::Index>(scaled, 1, cap);
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) {
    throw std::invalid_argument("train config: " + what);
  };
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    bad("learning rate must be positive");
  }
  if (batch_size < 1) bad("batch size must be at least 1");
  if (epochs_si < 0 || epochs_tf < 0) bad("epoch counts cannot be negative");
  if (epochs_si + epochs_tf < 1) bad("at least one epoch is required");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    bad("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) bad("adam epsilon must be positive");
  if (!(grad_clip > 0.0)) bad("gradient clip norm must be positive");
  if (t_star_fixed < 1 &&
      !(t_star_fraction > 0.0 && t_star_fraction < 1.0)) {
    bad("prediction-time fraction must lie in (0, 1) unless a fixed index is set");
  }
  if (tf_horizon < 1) bad("forecast-loss horizon must be at least 1");
  if (n_samples < 1 || eval_samples < 1) bad("sample counts must be at least 1");
  if (patience < 1) bad("early-stopping patience must be at least 1");
  if (threads < 0) bad("thread count cannot be negative");
  if (model.z < 1 || model.hidden < 1 || model.lstm_hidden < 1 ||
      model.comb_hidden < 1) {
    bad("model dimensions must be at least 1");
  }
  if (model.layers < 1 || model.comb_layers < 1) {
    bad("network depths must be at least 1");
  }
}

namespace {

json model_shape_json(const ModelShape& m) {
  return json{{"z", m.z},
              {"hidden", m.hidden},
              {"layers", m.layers},
              {"lstm_hidden", m.lstm_hidden},
              {"comb_hidden", m.comb_hidden},
              {"comb_layers", m.comb_layers}};
}

std::string train_config_echo(const TrainConfig& c) {
  json j{{"strategy", strategy_name(c.strategy)},
         {"model", model_shape_json(c.model)},
         {"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"epochs_si", c.epochs_si},
         {"epochs_tf", c.epochs_tf},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"grad_clip", c.grad_clip},
         {"seed", c.seed},
         {"t_star_fraction", c.t_star_fraction},
         {"t_star_fixed", c.t_star_fixed},
         {"tf_horizon", c.tf_horizon},
         {"n_samples", c.n_samples},
         {"eval_samples", c.eval_samples},
         {"patience", c.patience},
         {"include_initial_kl", c.include_initial_kl},
         {"freeze_encoder_in_tf", c.freeze_encoder_in_tf}};
  return j.dump();
}

}  // namespace

// ---------------------------------------------------------------------------
// checkpoints

void save_checkpoint(const CheckpointEnvelope& env, std::ostream& out) {
  json j;
  j["format_version"] = env.format_version;
  j["tool"] = tool_string();
  j["strategy"] = strategy_name(env.strategy);
  j["model_kind"] = env.model_kind;
  j["seed"] = env.seed;
  j["obs_channels"] = env.obs_channels;
  j["int_channels"] = env.int_channels;
  j["normalization"] = stats_to_json(env.stats);
  j["config"] = config_echo_json(env.config_echo);
  json tensors = json::object();
  for (const auto& [name, t] : env.tensors) {
    tensors[name] = {{"shape", shape_json(t.shape())},
                     {"data", b64_encode(t.values())}};
  }
  j["tensors"] = std::move(tensors);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("checkpoint write failed");
}

void save_checkpoint(const CheckpointEnvelope& env, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  save_checkpoint(env, out);
}

CheckpointEnvelope load_checkpoint(std::istream& in) {
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint is not valid JSON: ") +
                             e.what());
  }
  if (!j.is_object()) {
    throw std::runtime_error("checkpoint must be a JSON object");
  }
  if (!j.contains("format_version") || !j["format_version"].is_number_integer()) {
    throw std::runtime_error("checkpoint is missing its format_version");
  }
  const int version = j["format_version"].get<int>();
  if (version != 1) {
    throw std::runtime_error("unsupported checkpoint format version " +
                             std::to_string(version) + " (this build reads 1)");
  }
  for (const char* key :
       {"strategy", "model_kind", "seed", "obs_channels", "int_channels",
        "normalization", "config", "tensors"}) {
    if (!j.contains(key)) {
      throw std::runtime_error(std::string("checkpoint is missing '") + key +
                               "'");
    }
  }

  CheckpointEnvelope env;
  env.format_version = version;
  if (!j["strategy"].is_string()) {
    throw std::runtime_error("checkpoint strategy should be a string");
  }
  env.strategy = parse_strategy(j["strategy"].get<std::string>());
  if (!j["model_kind"].is_string()) {
    throw std::runtime_error("checkpoint model_kind should be a string");
  }
  env.model_kind = j["model_kind"].get<std::string>();
  if (env.model_kind != "lgssm" && env.model_kind != "dssm") {
    throw std::runtime_error("checkpoint model_kind '" + env.model_kind +
                             "' is not recognized (expected lgssm or dssm)");
  }
  if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer()) {
    throw std::runtime_error("checkpoint seed should be an integer");
  }
  env.seed = j["seed"].get<std::uint64_t>();
  auto read_channels = [&](const char* key) {
    if (!j[key].is_array()) {
      throw std::runtime_error(std::string("checkpoint '") + key +
                               "' should be an array of channel names");
    }
    std::vector<std::string> out;
    for (const auto& entry : j[key]) {
      if (!entry.is_string()) {
        throw std::runtime_error(std::string("checkpoint '") + key +
                                 "' should hold strings only");
      }
      out.push_back(entry.get<std::string>());
    }
    return out;
  };
  env.obs_channels = read_channels("obs_channels");
  env.int_channels = read_channels("int_channels");
  env.stats = stats_from_json(j["normalization"]);
  if (!j["config"].is_object()) {
    throw std::runtime_error("checkpoint config echo should be an object");
  }
  env.config_echo = j["config"].dump();

  if (!j["tensors"].is_object()) {
    throw std::runtime_error("checkpoint tensors should be an object");
  }
  for (const auto& [name, entry] : j["tensors"].items()) {
    if (!entry.is_object() || !entry.contains("shape") ||
        !entry.contains("data") || !entry["shape"].is_array() ||
        !entry["data"].is_string()) {
      throw std::runtime_error("checkpoint tensor '" + std::string(name) +
                               "' needs a shape array and a data string");
    }
    std::vector<std::size_t> shape;
    for (const auto& d : entry["shape"]) {
      if (!d.is_number_integer() || d.get<std::int64_t>() < 1) {
        throw std::runtime_error("checkpoint tensor '" + std::string(name) +
                                 "' has an invalid shape entry");
      }
      shape.push_back(d.get<std::size_t>());
    }
    if (shape.empty() || shape.size() > 2) {
      throw std::runtime_error("checkpoint tensor '" + std::string(name) +
                               "' should be rank 1 or 2");
    }
    std::vector<double> values =
        b64_decode(entry["data"].get<std::string>(), name);
    if (values.size() != diff::shape_product(shape)) {
      throw std::runtime_error(
          "checkpoint tensor '" + std::string(name) + "' shape " +
          json(shape_json(shape)).dump() + " does not match its data (" +
          std::to_string(values.size()) + " values)");
    }
    try {
      if (shape.size() == 1) {
        env.tensors.set(name, diff::Tensor::vector(std::move(values)));
      } else {
        env.tensors.set(name, diff::Tensor::matrix(shape[0], shape[1],
                                                   std::move(values)));
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("checkpoint tensor '" + std::string(name) +
                               "' is not usable: " + e.what());
    }
  }
  return env;
}

CheckpointEnvelope load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

// ---------------------------------------------------------------------------
// model <-> envelope

CheckpointEnvelope envelope_of(const lgssm::LgssmParams& p) {
  p.validate();
  CheckpointEnvelope env;
  env.model_kind = "lgssm";
  env.tensors.set("A", tensor_of(p.a));
  env.tensors.set("B", tensor_of(p.b));
  env.tensors.set("C", tensor_of(p.c));
  env.tensors.set("D", tensor_of(p.d));
  env.tensors.set("Q", tensor_of(p.q));
  env.tensors.set("R", tensor_of(p.r));
  env.tensors.set("U", tensor_of(p.u));
  env.tensors.set("m0", tensor_of(p.m0));
  env.tensors.set("P0", tensor_of(p.p0));
  return env;
}

CheckpointEnvelope envelope_of(const dssm::DeepSsmParams& deep,
                               const dssm::EncoderParams& enc) {
  CheckpointEnvelope env;
  env.model_kind = "dssm";
  env.tensors = dssm::to_parameter_set(deep);
  for (const auto& [name, t] : dssm::to_parameter_set(enc)) {
    env.tensors.set(name, t);
  }
  return env;
}

LoadedModel materialize(const CheckpointEnvelope& env) {
  LoadedModel model;
  model.kind = env.model_kind;
  if (env.model_kind == "lgssm") {
    for (const char* name : {"A", "B", "C", "D", "Q", "R", "U", "m0", "P0"}) {
      if (!env.tensors.contains(name)) {
        throw std::runtime_error(std::string("checkpoint tensor '") + name +
                                 "' is missing");
      }
    }
    lgssm::LgssmParams p;
    p.a = matrix_of(env.tensors.at("A"), "A");
    p.b = matrix_of(env.tensors.at("B"), "B");
    p.c = matrix_of(env.tensors.at("C"), "C");
    p.d = matrix_of(env.tensors.at("D"), "D");
    p.q = matrix_of(env.tensors.at("Q"), "Q");
    p.r = matrix_of(env.tensors.at("R"), "R");
    p.u = matrix_of(env.tensors.at("U"), "U");
    p.m0 = vector_of(env.tensors.at("m0"), "m0");
    p.p0 = matrix_of(env.tensors.at("P0"), "P0");
    p.validate();
    if (p.o_dim() != static_cast<Eigen::Index>(env.obs_channels.size()) ||
        p.i_dim() != static_cast<Eigen::Index>(env.int_channels.size())) {
      throw std::runtime_error(
          "checkpoint channel lists disagree with the stored tensors");
    }
    model.linear = std::move(p);
    return model;
  }
  if (env.model_kind == "dssm") {
    model.deep = dssm::deep_from_parameter_set(env.tensors);
    model.encoder = dssm::encoder_from_parameter_set(env.tensors);
    if (model.deep.z_dim() != model.encoder.z_dim()) {
      throw std::runtime_error(
          "checkpoint generative and encoder halves disagree on the state size");
    }
    if (model.deep.o_dim() !=
            static_cast<Eigen::Index>(env.obs_channels.size()) ||
        model.deep.i_dim() !=
            static_cast<Eigen::Index>(env.int_channels.size())) {
      throw std::runtime_error(
          "checkpoint channel lists disagree with the stored tensors");
    }
    return model;
  }
  throw std::runtime_error("checkpoint model_kind '" + env.model_kind +
                           "' is not recognized (expected lgssm or dssm)");
}

ForecastResult forecast_with(const LoadedModel& model,
                             const data::PatientRecord& record,
                             Eigen::Index t_star, Eigen::Index horizon,
                             int n_paths, std::uint64_t seed) {
  if (model.kind == "lgssm") {
    return lgssm::kf_forecast(record, t_star, horizon, model.linear);
  }
  return dssm::forecast(record, t_star, horizon, model.deep, model.encoder,
                        n_paths, seed);
}

// ---------------------------------------------------------------------------
// training

namespace {

enum class Phase { kSi, kTf, kHr };

const char* phase_label(Phase p) {
  switch (p) {
    case Phase::kSi: return "si";
    case Phase::kTf: return "tf";
    case Phase::kHr: return "hr";
  }
  return "?";
}

struct RecordEval {
  double value = 0.0;
  diff::ParameterSet grads;
};

// One record's bound as a taped function of the flat parameter set. For the
// forecast phase the prediction time and horizon follow the config policy.
diff::DiffFunction taped_bound(Phase phase, const data::PatientRecord& record,
                               const TrainConfig& cfg, std::uint64_t noise_seed) {
  const Eigen::Index z = cfg.model.z;
  return [phase, &record, &cfg, noise_seed, z](
             diff::Tape& tape,
             const std::map<std::string, diff::ValueId>& ids) -> diff::ValueId {
    const auto steps = static_cast<std::size_t>(record.steps());
    const dssm::NoisePlan plan = dssm::NoisePlan::make(
        static_cast<std::size_t>(cfg.n_samples), steps, z, record.int_dim(),
        noise_seed);
    if (phase == Phase::kTf) {
      const Eigen::Index t_star = cfg.resolve_t_star(record.steps());
      const Eigen::Index horizon =
          std::min<Eigen::Index>(cfg.tf_horizon, record.steps() - t_star);
      return dssm::record_elbo_forecast(tape, ids, record, t_star, horizon,
                                        plan, cfg.n_samples,
                                        cfg.include_initial_kl)
          .elbo;
    }
    return dssm::record_elbo_system_id(tape, ids, record, plan, cfg.n_samples,
                                       cfg.include_initial_kl)
        .elbo;
  };
}

// Bound value without gradients, for the early-stopping objective. The noise
// seed depends only on the record, so every epoch scores against the same
// draws and comparisons across epochs are meaningful.
double eager_bound(Phase phase, const data::PatientRecord& record,
                   const dssm::DeepSsmParams& deep,
                   const dssm::EncoderParams& enc, const TrainConfig& cfg) {
  const std::uint64_t seed =
      record_noise_seed(cfg.seed, "eval-noise", record.patient_id, 0);
  const dssm::NoisePlan plan = dssm::NoisePlan::make(
      static_cast<std::size_t>(cfg.eval_samples),
      static_cast<std::size_t>(record.steps()), cfg.model.z, record.int_dim(),
      seed);
  if (phase == Phase::kTf) {
    const Eigen::Index t_star = cfg.resolve_t_star(record.steps());
    const Eigen::Index horizon =
        std::min<Eigen::Index>(cfg.tf_horizon, record.steps() - t_star);
    return dssm::elbo_forecast(record, t_star, horizon, deep, enc, plan,
                               cfg.eval_samples, cfg.include_initial_kl)
        .elbo;
  }
  return dssm::elbo_system_id(record, deep, enc, plan, cfg.eval_samples,
                              cfg.include_initial_kl)
      .elbo;
}

struct DeepTrainer {
  DeepTrainer(const TrainConfig& config,
              const std::vector<data::PatientRecord>& train,
              const std::vector<data::PatientRecord>& eval, int workers)
      : cfg(config), train_set(train), eval_set(eval), threads(workers) {}

  const TrainConfig& cfg;
  const std::vector<data::PatientRecord>& train_set;
  const std::vector<data::PatientRecord>& eval_set;
  int threads;
  diff::ParameterSet params;
  std::vector<CurvePoint> curve;
  int global_epoch = 0;
  bool diverged = false;
  std::string diagnostics;

  double eval_objective(Phase phase) const {
    const dssm::DeepSsmParams deep = dssm::deep_from_parameter_set(params);
    const dssm::EncoderParams enc = dssm::encoder_from_parameter_set(params);
    const std::vector<double> values = parallel_map_n<double>(
        eval_set.size(),
        [&](std::size_t k) {
          return eager_bound(phase, eval_set[k], deep, enc, cfg);
        },
        threads);
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
  }

  // Runs one phase of up to `epochs` passes, leaving `params` at the best
  // eval objective the phase observed (its entry state counts).
  double run_phase(Phase phase, int epochs) {
    diff::Adam opt({cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps});
    double best = eval_objective(phase);
    diff::ParameterSet best_params = params;
    int stale = 0;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
      Rng order_rng(mix_seed(
          mix_seed(cfg.seed, fnv1a64(std::string("order-") + phase_label(phase))),
          static_cast<std::uint64_t>(epoch)));
      const std::vector<std::size_t> order =
          shuffled_indices(train_set.size(), order_rng);
      double value_sum = 0.0;
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t stop = std::min(
            order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        const std::size_t width = stop - start;
        std::vector<RecordEval> batch;
        try {
          batch = parallel_map_n<RecordEval>(
              width,
              [&](std::size_t k) {
                const data::PatientRecord& rec = train_set[order[start + k]];
                const std::uint64_t noise_seed = record_noise_seed(
                    cfg.seed, std::string("train-") + phase_label(phase),
                    rec.patient_id, global_epoch + 1);
                const diff::ValueAndGradient vg = diff::value_and_gradient(
                    taped_bound(phase, rec, cfg, noise_seed), params);
                return RecordEval{vg.value, vg.gradients};
              },
              threads);
        } catch (const std::exception& e) {
          diverged = true;
          diagnostics = std::string("phase '") + phase_label(phase) +
                        "' epoch " + std::to_string(global_epoch + 1) +
                        ": " + e.what();
          params = best_params;
          return best;
        }
        diff::ParameterSet grads = batch[0].grads;
        value_sum += batch[0].value;
        for (std::size_t k = 1; k < width; ++k) {
          diff::accumulate(grads, batch[k].grads);
          value_sum += batch[k].value;
        }
        // Gradient of the loss (negative mean bound), clipped by global norm.
        diff::scale_params(grads, -1.0 / static_cast<double>(width));
        const double norm = global_norm(grads);
        if (!std::isfinite(norm)) {
          diverged = true;
          diagnostics = std::string("phase '") + phase_label(phase) +
                        "' epoch " + std::to_string(global_epoch + 1) +
                        ": non-finite gradient";
          params = best_params;
          return best;
        }
        if (norm > cfg.grad_clip) {
          diff::scale_params(grads, cfg.grad_clip / norm);
        }
        if (phase == Phase::kTf && cfg.freeze_encoder_in_tf) {
          zero_encoder_grads(grads);
        }
        opt.step(params, grads);
      }
      ++global_epoch;
      const double train_mean =
          value_sum / static_cast<double>(train_set.size());
      const double eval_value = eval_objective(phase);
      curve.push_back(
          {global_epoch, phase_label(phase), train_mean, eval_value});
      if (!std::isfinite(train_mean) || !std::isfinite(eval_value)) {
        diverged = true;
        diagnostics = std::string("phase '") + phase_label(phase) +
                      "' epoch " + std::to_string(global_epoch) +
                      ": non-finite objective";
        params = best_params;
        return best;
      }
      if (eval_value > best) {
        best = eval_value;
        best_params = params;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
    params = best_params;
    return best;
  }
};

TrainResult train_deep(const std::vector<data::PatientRecord>& train_records,
                       const std::vector<data::PatientRecord>& eval_records,
                       const TrainConfig& cfg, int threads) {
  const Eigen::Index o = train_records.front().obs_dim();
  const Eigen::Index i = train_records.front().int_dim();
  const dssm::DeepSsmParams deep0 = dssm::make_deep_ssm(
      cfg.model.z, o, i, cfg.seed, cfg.model.hidden, cfg.model.layers);
  const dssm::EncoderParams enc0 =
      dssm::make_encoder(cfg.model.z, o, i, cfg.seed, cfg.model.lstm_hidden,
                         cfg.model.comb_hidden, cfg.model.comb_layers);

  // The history-restricted strategy only ever sees each record's prefix up
  // to its prediction time, for training and for the stopping objective.
  std::vector<data::PatientRecord> train_view = train_records;
  std::vector<data::PatientRecord> eval_view = eval_records;
  if (cfg.strategy == Strategy::kHr) {
    for (auto& rec : train_view) rec = rec.prefix(cfg.resolve_t_star(rec.steps()));
    for (auto& rec : eval_view) rec = rec.prefix(cfg.resolve_t_star(rec.steps()));
  }

  DeepTrainer trainer(cfg, train_view, eval_view, threads);
  trainer.params = dssm::to_parameter_set(deep0);
  for (const auto& [name, t] : dssm::to_parameter_set(enc0)) {
    trainer.params.set(name, t);
  }

  double best = 0.0;
  switch (cfg.strategy) {
    case Strategy::kSiTf:
      best = trainer.run_phase(Phase::kSi, cfg.epochs_si);
      if (!trainer.diverged) best = trainer.run_phase(Phase::kTf, cfg.epochs_tf);
      break;
    case Strategy::kTf:
      best = trainer.run_phase(Phase::kTf, cfg.epochs_si);
      break;
    case Strategy::kHr:
      best = trainer.run_phase(Phase::kHr, cfg.epochs_si);
      break;
    case Strategy::kKf:
      throw std::logic_error("train_deep: kf is handled elsewhere");
  }

  TrainResult result;
  result.checkpoint =
      envelope_of(dssm::deep_from_parameter_set(trainer.params),
                  dssm::encoder_from_parameter_set(trainer.params));
  result.curve = std::move(trainer.curve);
  result.best_eval = best;
  result.diverged = trainer.diverged;
  result.diagnostics = std::move(trainer.diagnostics);
  return result;
}

TrainResult train_kf(const std::vector<data::PatientRecord>& train_records,
                     const std::vector<data::PatientRecord>& eval_records,
                     const TrainConfig& cfg, int threads) {
  auto eval_loglik = [&](const lgssm::LgssmParams& p) {
    const std::vector<double> values = parallel_map_n<double>(
        eval_records.size(),
        [&](std::size_t k) {
          return lgssm::kf_filter(eval_records[k], p, true).total_loglik;
        },
        threads);
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
  };

  lgssm::FitConfig stage;
  stage.max_iters = cfg.epochs_si;
  stage.learning_rate = 0.05;
  stage.seed = cfg.seed;
  stage.threads = threads;

  TrainResult result;
  std::vector<double> history;
  lgssm::LgssmParams coarse, fine;
  try {
    coarse = lgssm::fit_lgssm(train_records, stage, nullptr, &history);
  } catch (const std::exception& e) {
    result.diverged = true;
    result.diagnostics = std::string("coarse stage: ") + e.what();
    return result;
  }
  const double coarse_train = -history.back();
  const double coarse_eval = eval_loglik(coarse);
  result.curve.push_back({1, "kf-coarse", coarse_train, coarse_eval});

  stage.max_iters = cfg.epochs_tf;
  stage.learning_rate = 0.005;
  history.clear();
  try {
    fine = lgssm::fit_lgssm(train_records, stage, &coarse, &history);
  } catch (const std::exception& e) {
    result.diverged = true;
    result.diagnostics = std::string("fine stage: ") + e.what();
    result.checkpoint = envelope_of(coarse);
    result.best_eval = coarse_eval;
    return result;
  }
  const double fine_train = -history.back();
  const double fine_eval = eval_loglik(fine);
  result.curve.push_back({2, "kf-fine", fine_train, fine_eval});

  // Keep whichever stage scored better on held-out likelihood.
  if (fine_eval >= coarse_eval) {
    result.checkpoint = envelope_of(fine);
    result.best_eval = fine_eval;
  } else {
    result.checkpoint = envelope_of(coarse);
    result.best_eval = coarse_eval;
  }
  return result;
}

}  // namespace

TrainResult train(const std::vector<data::PatientRecord>& train_records,
                  const std::vector<data::PatientRecord>& eval_records,
                  const data::NormalizationStats& stats,
                  const TrainConfig& config) {
  config.validate();
  if (train_records.empty()) {
    throw std::invalid_argument("train: the training split is empty");
  }
  if (eval_records.empty()) {
    throw std::invalid_argument(
        "train: the eval split is empty (early stopping needs it)");
  }
  for (const auto& rec : train_records) rec.validate();
  for (const auto& rec : eval_records) rec.validate();
  const auto& first = train_records.front();
  if (first.obs_channels.empty()) {
    throw std::invalid_argument("train: records must carry channel names");
  }
  const int threads = resolve_thread_count(config.threads);

  TrainResult result = config.strategy == Strategy::kKf
                           ? train_kf(train_records, eval_records, config, threads)
                           : train_deep(train_records, eval_records, config,
                                        threads);
  if (!result.checkpoint.tensors.empty()) {
    result.checkpoint.strategy = config.strategy;
    result.checkpoint.seed = config.seed;
    result.checkpoint.stats = stats;
    result.checkpoint.obs_channels = first.obs_channels;
    result.checkpoint.int_channels = first.int_channels;
    result.checkpoint.config_echo = train_config_echo(config);
  }
  return result;
}

// ---------------------------------------------------------------------------
// evaluation

void accumulate_mae(const ForecastResult& forecast,
                    const data::PatientRecord& record, Eigen::Index t_star,
                    Eigen::Index horizon, MaeAccumulator& obs,
                    MaeAccumulator& ints) {
  if (t_star + horizon > record.steps()) {
    throw std::invalid_argument(
        "accumulate_mae: the horizon runs past the record");
  }
  if (horizon > forecast.horizon()) {
    throw std::invalid_argument(
        "accumulate_mae: the forecast is shorter than the horizon");
  }
  for (Eigen::Index k = 0; k < horizon; ++k) {
    const Eigen::Index row = t_star + k;  // 0-based row of grid step t_star+k+1
    for (Eigen::Index j = 0; j < record.obs_dim(); ++j) {
      obs.abs_sum += std::abs(forecast.obs_mean(k, j) - record.x(row, j));
      ++obs.cells;
    }
    for (Eigen::Index c = 0; c < record.int_dim(); ++c) {
      ints.abs_sum += std::abs(forecast.int_mean(k, c) - record.u(row, c));
      ++ints.cells;
    }
  }
}

double standard_error(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  return sd / std::sqrt(static_cast<double>(n));
}

namespace {

struct RecordErrors {
  std::string id;
  std::vector<MaeAccumulator> obs;   // one per horizon
  std::vector<MaeAccumulator> ints;
  std::vector<char> included;
};

json eval_policy_json(const EvalPolicy& p) {
  json horizons = json::array();
  for (Eigen::Index h : p.horizons) horizons.push_back(h);
  return json{{"t_star", p.t_star},
              {"horizons", horizons},
              {"n_paths", p.n_paths},
              {"seed", p.seed}};
}

void check_eval_policy(const EvalPolicy& policy) {
  if (policy.t_star < 1) {
    throw std::invalid_argument("evaluate: t_star must be at least 1");
  }
  if (policy.horizons.empty()) {
    throw std::invalid_argument("evaluate: no horizons given");
  }
  for (Eigen::Index h : policy.horizons) {
    if (h < 1) throw std::invalid_argument("evaluate: horizons must be positive");
  }
  if (policy.n_paths < 1) {
    throw std::invalid_argument("evaluate: n_paths must be at least 1");
  }
}

}  // namespace

MetricsReport evaluate_mae(const CheckpointEnvelope& env,
                           const std::vector<data::PatientRecord>& test,
                           const EvalPolicy& policy) {
  check_eval_policy(policy);
  if (test.empty()) {
    throw std::invalid_argument("evaluate: the test set is empty");
  }
  const LoadedModel model = materialize(env);
  const int threads = resolve_thread_count(policy.threads);
  const std::size_t n_h = policy.horizons.size();
  const Eigen::Index h_max =
      *std::max_element(policy.horizons.begin(), policy.horizons.end());

  std::vector<RecordErrors> errors = parallel_map_n<RecordErrors>(
      test.size(),
      [&](std::size_t k) {
        const data::PatientRecord& rec = test[k];
        RecordErrors out;
        out.id = rec.patient_id;
        out.obs.resize(n_h);
        out.ints.resize(n_h);
        out.included.assign(n_h, 0);
        const Eigen::Index room = rec.steps() - policy.t_star;
        if (room < 1) return out;  // nothing after t_star: excluded everywhere
        const Eigen::Index reach = std::min(h_max, room);
        const ForecastResult forecast = forecast_with(
            model, rec, policy.t_star, reach, policy.n_paths,
            mix_seed(policy.seed, fnv1a64(rec.patient_id)));
        for (std::size_t j = 0; j < n_h; ++j) {
          if (policy.horizons[j] > room) continue;
          accumulate_mae(forecast, rec, policy.t_star, policy.horizons[j],
                         out.obs[j], out.ints[j]);
          out.included[j] = 1;
        }
        return out;
      },
      threads);

  // Reduce in patient-id order so the report cannot depend on how the test
  // set happened to be ordered.
  std::vector<std::size_t> order(errors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return errors[a].id < errors[b].id;
  });

  MetricsReport report;
  report.strategy = strategy_name(env.strategy);
  json echo{{"eval", eval_policy_json(policy)},
            {"train", config_echo_json(env.config_echo)}};
  report.config_echo = echo.dump();
  for (std::size_t j = 0; j < n_h; ++j) {
    HorizonMetric metric;
    metric.horizon = policy.horizons[j];
    MaeAccumulator obs, ints;
    std::size_t included = 0, excluded = 0;
    for (std::size_t idx : order) {
      const RecordErrors& e = errors[idx];
      if (!e.included[j]) {
        ++excluded;
        continue;
      }
      ++included;
      obs.abs_sum += e.obs[j].abs_sum;
      obs.cells += e.obs[j].cells;
      ints.abs_sum += e.ints[j].abs_sum;
      ints.cells += e.ints[j].cells;
    }
    metric.mae = obs.mean();
    metric.int_mae = ints.mean();
    metric.fold_mae = {metric.mae};
    metric.fold_int_mae = {metric.int_mae};
    metric.fold_records = {included};
    metric.fold_excluded = {excluded};
    report.horizons.push_back(std::move(metric));
  }
  return report;
}

MetricsReport cross_validate(const std::vector<data::EventStream>& streams,
                             double grid_step_h,
                             const std::vector<std::string>& obs_channels,
                             const std::vector<std::string>& int_channels,
                             const TrainConfig& config,
                             const EvalPolicy& policy, int n_folds) {
  config.validate();
  check_eval_policy(policy);
  if (n_folds < 1 || n_folds > 10) {
    throw std::invalid_argument("cross-validate: n_folds must lie in [1, 10]");
  }
  if (streams.empty()) {
    throw std::invalid_argument("cross-validate: no event streams given");
  }

  MetricsReport report;
  report.strategy = strategy_name(config.strategy);
  for (Eigen::Index h : policy.horizons) {
    HorizonMetric metric;
    metric.horizon = h;
    report.horizons.push_back(metric);
  }

  for (int fold = 0; fold < n_folds; ++fold) {
    const data::PreparedData prepared =
        data::prepare_dataset(streams, grid_step_h, obs_channels, int_channels,
                              {0.8, 0.1, 0.1}, fold);
    auto empty_split = [&](const char* which) {
      throw std::invalid_argument("cross-validate: fold " +
                                  std::to_string(fold) + " has an empty " +
                                  which + " split");
    };
    if (prepared.train.empty()) empty_split("train");
    if (prepared.eval.empty()) empty_split("eval");
    if (prepared.test.empty()) empty_split("test");

    const TrainResult fit =
        train(prepared.train, prepared.eval, prepared.stats, config);
    if (fit.diverged) {
      throw std::runtime_error("cross-validate: fold " + std::to_string(fold) +
                               " diverged (" + fit.diagnostics + ")");
    }
    const MetricsReport fold_report =
        evaluate_mae(fit.checkpoint, prepared.test, policy);
    for (std::size_t j = 0; j < report.horizons.size(); ++j) {
      const HorizonMetric& src = fold_report.horizons[j];
      HorizonMetric& dst = report.horizons[j];
      dst.fold_mae.push_back(src.mae);
      dst.fold_int_mae.push_back(src.int_mae);
      dst.fold_records.push_back(src.fold_records.front());
      dst.fold_excluded.push_back(src.fold_excluded.front());
    }
  }

  for (HorizonMetric& metric : report.horizons) {
    double sum = 0.0, int_sum = 0.0;
    for (double v : metric.fold_mae) sum += v;
    for (double v : metric.fold_int_mae) int_sum += v;
    metric.mae = sum / static_cast<double>(n_folds);
    metric.int_mae = int_sum / static_cast<double>(n_folds);
    metric.sem = standard_error(metric.fold_mae);
    metric.int_sem = standard_error(metric.fold_int_mae);
  }
  json echo{{"train", json::parse(train_config_echo(config))},
            {"eval", eval_policy_json(policy)},
            {"n_folds", n_folds}};
  report.config_echo = echo.dump();
  return report;
}

// ---------------------------------------------------------------------------
// report serialization

namespace {

std::string fmt(double v) { return json(v).dump(); }

}  // namespace

void write_metrics_csv(const MetricsReport& report, std::ostream& out) {
  out << "# " << tool_string() << "\n";
  out << "# reference MAE@24h: hr 0.473(0.019), kf 0.614(0.036), "
         "tf 0.512(0.017), si+tf 0.453(0.012)\n";
  out << "# config: " << (report.config_echo.empty() ? "{}" : report.config_echo)
      << "\n";
  out << "strategy,fold,horizon,mae,sem,n_records,runtime_s\n";
  std::size_t n_folds = 0;
  for (const HorizonMetric& m : report.horizons) {
    n_folds = std::max(n_folds, m.fold_mae.size());
  }
  for (std::size_t fold = 0; fold < n_folds; ++fold) {
    for (const HorizonMetric& m : report.horizons) {
      if (fold >= m.fold_mae.size()) continue;
      out << report.strategy << ',' << fold << ',' << m.horizon << ','
          << fmt(m.fold_mae[fold]) << ",0," << m.fold_records[fold] << ",0\n";
    }
  }
  for (const HorizonMetric& m : report.horizons) {
    std::size_t records = 0;
    for (std::size_t n : m.fold_records) records += n;
    out << report.strategy << ",all," << m.horizon << ',' << fmt(m.mae) << ','
        << fmt(m.sem) << ',' << records << ",0\n";
  }
  if (!out) throw std::runtime_error("metrics CSV write failed");
}

void write_metrics_csv(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_metrics_csv(report, out);
}

std::string metrics_json(const MetricsReport& report) {
  json j;
  j["tool"] = tool_string();
  j["strategy"] = report.strategy;
  j["runtime_s"] = 0.0;  // measured time varies run to run; keep reports stable
  j["config"] = config_echo_json(report.config_echo);
  json horizons = json::array();
  for (const HorizonMetric& m : report.horizons) {
    json entry{{"horizon", m.horizon},
               {"mae", m.mae},
               {"sem", m.sem},
               {"int_mae", m.int_mae},
               {"int_sem", m.int_sem},
               {"fold_mae", m.fold_mae},
               {"fold_int_mae", m.fold_int_mae},
               {"fold_records", m.fold_records},
               {"fold_excluded", m.fold_excluded}};
    horizons.push_back(std::move(entry));
  }
  j["horizons"] = std::move(horizons);
  return j.dump(2) + "\n";
}

void write_metrics_json(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << metrics_json(report);
  if (!out) throw std::runtime_error("metrics JSON write failed");
}

}  // namespace ssmcast::pipelines
