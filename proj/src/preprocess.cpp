#include "ssmcast/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <set>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "ssmcast/rng.hpp"

namespace ssmcast::data {
namespace {

using nlohmann::json;

std::unordered_map<std::string, Eigen::Index> index_channels(
    const std::vector<std::string>& names, const std::string& what) {
  std::unordered_map<std::string, Eigen::Index> index;
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (!index.emplace(names[k], static_cast<Eigen::Index>(k)).second) {
      throw std::invalid_argument("duplicate " + what + " channel '" +
                                  names[k] + "'");
    }
  }
  return index;
}

std::string join_names(const std::set<std::string>& names) {
  std::string out;
  for (const std::string& name : names) {
    if (!out.empty()) out += ", ";
    out += "'" + name + "'";
  }
  return out;
}

// Validates the record and insists on channel names matching the grids,
// which every keyed transform below needs.
void require_named_channels(const PatientRecord& record) {
  record.validate();
  if (static_cast<Eigen::Index>(record.obs_channels.size()) != record.obs_dim()) {
    throw std::invalid_argument("record '" + record.patient_id +
                                "': observation channel names missing");
  }
  if (static_cast<Eigen::Index>(record.int_channels.size()) != record.int_dim()) {
    throw std::invalid_argument("record '" + record.patient_id +
                                "': intervention channel names missing");
  }
}

}  // namespace

PatientRecord discretize(const EventStream& stream, double grid_step_h,
                         const std::vector<std::string>& obs_channels,
                         const std::vector<std::string>& int_channels) {
  if (!(grid_step_h > 0.0) || !std::isfinite(grid_step_h)) {
    throw std::invalid_argument("grid step must be positive and finite");
  }
  if (stream.events.empty()) {
    throw std::invalid_argument("patient '" + stream.patient_id +
                                "': no events to discretize");
  }
  const auto obs_index = index_channels(obs_channels, "observation");
  const auto int_index = index_channels(int_channels, "intervention");

  std::set<std::string> unknown_obs, unknown_int;
  Eigen::Index steps = 0;
  std::vector<Eigen::Index> bins(stream.events.size());
  for (std::size_t k = 0; k < stream.events.size(); ++k) {
    const Event& event = stream.events[k];
    if (!std::isfinite(event.time_h) || event.time_h < 0.0 ||
        !std::isfinite(event.value)) {
      throw std::invalid_argument("patient '" + stream.patient_id +
                                  "': non-finite or negative event on channel '" +
                                  event.channel + "'");
    }
    const bool is_obs = event.kind == EventKind::kObservation;
    const auto& index = is_obs ? obs_index : int_index;
    if (index.find(event.channel) == index.end()) {
      (is_obs ? unknown_obs : unknown_int).insert(event.channel);
      continue;
    }
    Eigen::Index bin =
        static_cast<Eigen::Index>(std::ceil(event.time_h / grid_step_h));
    if (bin < 1) bin = 1;  // a time-zero event opens the first bin
    bins[k] = bin;
    steps = std::max(steps, bin);
  }
  if (!unknown_obs.empty() || !unknown_int.empty()) {
    std::string msg = "patient '" + stream.patient_id + "':";
    if (!unknown_obs.empty()) {
      msg += " unknown observation channels " + join_names(unknown_obs);
    }
    if (!unknown_int.empty()) {
      if (!unknown_obs.empty()) msg += ";";
      msg += " unknown intervention channels " + join_names(unknown_int);
    }
    throw std::invalid_argument(msg);
  }

  PatientRecord record;
  record.patient_id = stream.patient_id;
  record.grid_step_h = grid_step_h;
  record.obs_channels = obs_channels;
  record.int_channels = int_channels;
  const auto o = static_cast<Eigen::Index>(obs_channels.size());
  const auto i = static_cast<Eigen::Index>(int_channels.size());
  record.x = Eigen::MatrixXd::Zero(steps, o);
  record.u = Eigen::MatrixXd::Zero(steps, i);
  record.x_mask = BoolGrid::Constant(steps, o, false);
  record.u_mask = BoolGrid::Constant(steps, i, false);

  // Latest event time seen per cell; >= lets a later input win exact ties.
  Eigen::MatrixXd newest_x = Eigen::MatrixXd::Constant(
      steps, o, -std::numeric_limits<double>::infinity());
  Eigen::MatrixXd newest_u = Eigen::MatrixXd::Constant(
      steps, i, -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < stream.events.size(); ++k) {
    const Event& event = stream.events[k];
    const Eigen::Index row = bins[k] - 1;
    if (event.kind == EventKind::kObservation) {
      const Eigen::Index col = obs_index.at(event.channel);
      if (event.time_h >= newest_x(row, col)) {
        newest_x(row, col) = event.time_h;
        record.x(row, col) = event.value;
        record.x_mask(row, col) = true;
      }
    } else {
      const Eigen::Index col = int_index.at(event.channel);
      if (event.time_h >= newest_u(row, col)) {
        newest_u(row, col) = event.time_h;
        record.u(row, col) = event.value;
        record.u_mask(row, col) = true;
      }
    }
  }
  return record;
}

PatientRecord impute_observations(const PatientRecord& record) {
  record.validate();
  PatientRecord out = record;
  for (Eigen::Index j = 0; j < record.obs_dim(); ++j) {
    bool seen = false;
    double carry = 0.0;
    for (Eigen::Index t = 0; t < record.steps(); ++t) {
      if (record.x_mask(t, j)) {
        seen = true;
        carry = record.x(t, j);
      } else {
        out.x(t, j) = seen ? carry : 0.0;
      }
    }
  }
  return out;
}

std::map<std::string, int> intervention_gap_thresholds(
    const std::vector<EventStream>& dataset, double grid_step_h,
    const std::vector<std::string>& int_channels) {
  if (!(grid_step_h > 0.0) || !std::isfinite(grid_step_h)) {
    throw std::invalid_argument("grid step must be positive and finite");
  }
  if (dataset.empty()) {
    throw std::invalid_argument(
        "cannot take gap percentiles of an empty dataset");
  }
  index_channels(int_channels, "intervention");  // rejects duplicates

  std::map<std::string, std::vector<double>> gaps;
  for (const std::string& name : int_channels) gaps[name];
  for (const EventStream& stream : dataset) {
    std::map<std::string, std::vector<double>> times;
    for (const Event& event : stream.events) {
      if (event.kind != EventKind::kIntervention) continue;
      auto it = gaps.find(event.channel);
      if (it == gaps.end()) continue;  // discretize reports unknown channels
      times[event.channel].push_back(event.time_h);
    }
    for (auto& [channel, series] : times) {
      std::sort(series.begin(), series.end());
      for (std::size_t k = 1; k < series.size(); ++k) {
        gaps[channel].push_back(series[k] - series[k - 1]);
      }
    }
  }

  std::map<std::string, int> thresholds;
  for (auto& [channel, series] : gaps) {
    if (series.empty()) {
      thresholds[channel] = 1;
      continue;
    }
    std::sort(series.begin(), series.end());
    const auto rank = static_cast<std::size_t>(
        std::ceil(0.9 * static_cast<double>(series.size())));
    const double cutoff_h = series[rank - 1];
    const int steps = static_cast<int>(std::ceil(cutoff_h / grid_step_h));
    thresholds[channel] = std::max(steps, 1);
  }
  return thresholds;
}

PatientRecord impute_interventions(
    const PatientRecord& record, const std::map<std::string, int>& thresholds) {
  require_named_channels(record);
  PatientRecord out = record;
  for (Eigen::Index c = 0; c < record.int_dim(); ++c) {
    const std::string& name = record.int_channels[c];
    const auto it = thresholds.find(name);
    if (it == thresholds.end()) {
      throw std::invalid_argument("no threshold for intervention channel '" +
                                  name + "'");
    }
    const Eigen::Index threshold = it->second;
    for (Eigen::Index t = 0; t < record.steps(); ++t) {
      if (!record.u_mask(t, c)) out.u(t, c) = 0.0;
    }
    Eigen::Index prev = -1;
    for (Eigen::Index t = 0; t < record.steps(); ++t) {
      if (!record.u_mask(t, c)) continue;
      if (prev >= 0 && t - prev <= threshold) {
        for (Eigen::Index s = prev + 1; s < t; ++s) {
          out.u(s, c) = record.u(prev, c);
        }
      }
      prev = t;
    }
  }
  return out;
}

NormalizationStats fit_normalization(const std::vector<PatientRecord>& train) {
  if (train.empty()) {
    throw std::invalid_argument(
        "cannot fit normalization on an empty training split");
  }
  for (const PatientRecord& record : train) {
    require_named_channels(record);
    if (record.obs_channels != train.front().obs_channels ||
        record.int_channels != train.front().int_channels) {
      throw std::invalid_argument("record '" + record.patient_id +
                                  "' disagrees with the split's channel lists");
    }
  }

  // Two passes for a stable variance; observed cells only, so imputed values
  // never tilt the statistics.
  const auto fit_columns = [&train](bool obs) {
    const auto& names =
        obs ? train.front().obs_channels : train.front().int_channels;
    std::map<std::string, ChannelStats> stats;
    for (std::size_t j = 0; j < names.size(); ++j) {
      const auto col = static_cast<Eigen::Index>(j);
      std::size_t count = 0;
      double sum = 0.0;
      for (const PatientRecord& record : train) {
        const auto& value = obs ? record.x : record.u;
        const auto& mask = obs ? record.x_mask : record.u_mask;
        for (Eigen::Index t = 0; t < record.steps(); ++t) {
          if (!mask(t, col)) continue;
          ++count;
          sum += value(t, col);
        }
      }
      ChannelStats cs;
      if (count > 0) {
        cs.mean = sum / static_cast<double>(count);
        double squares = 0.0;
        for (const PatientRecord& record : train) {
          const auto& value = obs ? record.x : record.u;
          const auto& mask = obs ? record.x_mask : record.u_mask;
          for (Eigen::Index t = 0; t < record.steps(); ++t) {
            if (!mask(t, col)) continue;
            const double d = value(t, col) - cs.mean;
            squares += d * d;
          }
        }
        cs.stddev = std::max(
            std::sqrt(squares / static_cast<double>(count)), 1e-6);
      }
      stats[names[j]] = cs;
    }
    return stats;
  };

  NormalizationStats stats;
  stats.obs = fit_columns(true);
  stats.ints = fit_columns(false);
  return stats;
}

namespace {

void require_same_channels(const std::vector<std::string>& channels,
                           const std::map<std::string, ChannelStats>& stats,
                           const std::string& what) {
  std::set<std::string> record_set(channels.begin(), channels.end());
  std::set<std::string> missing, extra;
  for (const std::string& name : channels) {
    if (stats.find(name) == stats.end()) missing.insert(name);
  }
  for (const auto& [name, cs] : stats) {
    if (record_set.find(name) == record_set.end()) extra.insert(name);
  }
  if (!missing.empty() || !extra.empty()) {
    std::string msg = what + " channels do not match the statistics:";
    if (!missing.empty()) msg += " missing " + join_names(missing);
    if (!extra.empty()) {
      if (!missing.empty()) msg += ",";
      msg += " unexpected " + join_names(extra);
    }
    throw std::invalid_argument(msg);
  }
}

PatientRecord scale_record(const PatientRecord& record,
                           const NormalizationStats& stats, bool forward) {
  require_named_channels(record);
  require_same_channels(record.obs_channels, stats.obs, "observation");
  require_same_channels(record.int_channels, stats.ints, "intervention");
  PatientRecord out = record;
  for (Eigen::Index j = 0; j < record.obs_dim(); ++j) {
    const ChannelStats& cs = stats.obs.at(record.obs_channels[j]);
    if (forward) {
      out.x.col(j) = (record.x.col(j).array() - cs.mean) / cs.stddev;
    } else {
      out.x.col(j) = record.x.col(j).array() * cs.stddev + cs.mean;
    }
  }
  for (Eigen::Index c = 0; c < record.int_dim(); ++c) {
    const ChannelStats& cs = stats.ints.at(record.int_channels[c]);
    if (forward) {
      out.u.col(c) = (record.u.col(c).array() - cs.mean) / cs.stddev;
    } else {
      out.u.col(c) = record.u.col(c).array() * cs.stddev + cs.mean;
    }
  }
  return out;
}

ForecastResult scale_forecast(const ForecastResult& forecast,
                              const NormalizationStats& stats,
                              const std::vector<std::string>& obs_channels,
                              const std::vector<std::string>& int_channels,
                              bool forward) {
  if (static_cast<Eigen::Index>(obs_channels.size()) !=
          forecast.obs_mean.cols() ||
      static_cast<Eigen::Index>(int_channels.size()) !=
          forecast.int_mean.cols()) {
    throw std::invalid_argument(
        "forecast channel lists do not match its columns");
  }
  require_same_channels(obs_channels, stats.obs, "observation");
  require_same_channels(int_channels, stats.ints, "intervention");
  ForecastResult out = forecast;
  for (std::size_t j = 0; j < obs_channels.size(); ++j) {
    const ChannelStats& cs = stats.obs.at(obs_channels[j]);
    const auto col = static_cast<Eigen::Index>(j);
    if (forward) {
      out.obs_mean.col(col) =
          (forecast.obs_mean.col(col).array() - cs.mean) / cs.stddev;
      out.obs_var.col(col) =
          forecast.obs_var.col(col).array() / (cs.stddev * cs.stddev);
    } else {
      out.obs_mean.col(col) =
          forecast.obs_mean.col(col).array() * cs.stddev + cs.mean;
      out.obs_var.col(col) =
          forecast.obs_var.col(col).array() * (cs.stddev * cs.stddev);
    }
  }
  for (std::size_t c = 0; c < int_channels.size(); ++c) {
    const ChannelStats& cs = stats.ints.at(int_channels[c]);
    const auto col = static_cast<Eigen::Index>(c);
    if (forward) {
      out.int_mean.col(col) =
          (forecast.int_mean.col(col).array() - cs.mean) / cs.stddev;
      out.int_var.col(col) =
          forecast.int_var.col(col).array() / (cs.stddev * cs.stddev);
    } else {
      out.int_mean.col(col) =
          forecast.int_mean.col(col).array() * cs.stddev + cs.mean;
      out.int_var.col(col) =
          forecast.int_var.col(col).array() * (cs.stddev * cs.stddev);
    }
  }
  return out;
}

}  // namespace

PatientRecord apply_normalization(const PatientRecord& record,
                                  const NormalizationStats& stats) {
  return scale_record(record, stats, true);
}

PatientRecord invert_normalization(const PatientRecord& record,
                                   const NormalizationStats& stats) {
  return scale_record(record, stats, false);
}

ForecastResult apply_normalization(const ForecastResult& forecast,
                                   const NormalizationStats& stats,
                                   const std::vector<std::string>& obs_channels,
                                   const std::vector<std::string>& int_channels) {
  return scale_forecast(forecast, stats, obs_channels, int_channels, true);
}

ForecastResult invert_normalization(const ForecastResult& forecast,
                                    const NormalizationStats& stats,
                                    const std::vector<std::string>& obs_channels,
                                    const std::vector<std::string>& int_channels) {
  return scale_forecast(forecast, stats, obs_channels, int_channels, false);
}

SplitIds split_by_hash(const std::vector<std::string>& patient_ids,
                       const std::array<double, 3>& fractions, int fold_index) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9 || fractions[0] < 0.0 ||
      fractions[1] < 0.0 || fractions[2] < 0.0) {
    throw std::invalid_argument("split fractions must be >= 0 and sum to 1");
  }
  if (fold_index < 0 || fold_index >= 10) {
    throw std::invalid_argument("fold index " + std::to_string(fold_index) +
                                " outside [0, 10)");
  }
  const auto eval_buckets = static_cast<std::uint64_t>(
      std::llround(100.0 * fractions[1]));
  const auto test_buckets = static_cast<std::uint64_t>(
      std::llround(100.0 * fractions[2]));

  std::unordered_set<std::string> seen;
  SplitIds split;
  for (const std::string& id : patient_ids) {
    if (!seen.insert(id).second) {
      throw std::invalid_argument("duplicate patient id '" + id + "'");
    }
    const std::uint64_t bucket =
        (fnv1a64(id) % 100 + 10 * static_cast<std::uint64_t>(fold_index)) % 100;
    if (bucket < test_buckets) {
      split.test.push_back(id);
    } else if (bucket < test_buckets + eval_buckets) {
      split.eval.push_back(id);
    } else {
      split.train.push_back(id);
    }
  }
  return split;
}

namespace {

[[noreturn]] void record_line_error(std::size_t line_no,
                                    const std::string& what) {
  throw std::runtime_error("records line " + std::to_string(line_no) + ": " +
                           what);
}

Eigen::MatrixXd parse_grid(const json& j, const char* key,
                           Eigen::Index expect_cols, std::size_t line_no) {
  const auto& rows = j.at(key);
  if (!rows.is_array()) {
    record_line_error(line_no, std::string("field '") + key +
                                   "' must be an array of rows");
  }
  Eigen::MatrixXd grid(static_cast<Eigen::Index>(rows.size()), expect_cols);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const auto& row = rows[t];
    if (!row.is_array() ||
        static_cast<Eigen::Index>(row.size()) != expect_cols) {
      record_line_error(line_no, std::string("field '") + key + "' row " +
                                     std::to_string(t) + " must hold " +
                                     std::to_string(expect_cols) + " numbers");
    }
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (!row[k].is_number()) {
        record_line_error(line_no, std::string("non-numeric entry in '") + key +
                                       "' row " + std::to_string(t));
      }
      grid(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) =
          row[k].get<double>();
    }
  }
  return grid;
}

BoolGrid parse_mask(const json& j, const char* key, Eigen::Index expect_rows,
                    Eigen::Index expect_cols, std::size_t line_no) {
  const auto& rows = j.at(key);
  if (!rows.is_array() ||
      static_cast<Eigen::Index>(rows.size()) != expect_rows) {
    record_line_error(line_no, std::string("field '") + key +
                                   "' must hold one row per grid step");
  }
  BoolGrid mask(expect_rows, expect_cols);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const auto& row = rows[t];
    if (!row.is_array() ||
        static_cast<Eigen::Index>(row.size()) != expect_cols) {
      record_line_error(line_no, std::string("field '") + key + "' row " +
                                     std::to_string(t) + " has the wrong width");
    }
    for (std::size_t k = 0; k < row.size(); ++k) {
      const auto& cell = row[k];
      if (!cell.is_number_integer() ||
          (cell.get<int>() != 0 && cell.get<int>() != 1)) {
        record_line_error(line_no, std::string("mask '") + key +
                                       "' entries must be 0 or 1");
      }
      mask(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) =
          cell.get<int>() == 1;
    }
  }
  return mask;
}

std::vector<std::string> parse_names(const json& j, const char* key,
                                     std::size_t line_no) {
  const auto& arr = j.at(key);
  if (!arr.is_array()) {
    record_line_error(line_no, std::string("field '") + key +
                                   "' must be an array of strings");
  }
  std::vector<std::string> names;
  names.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_string()) {
      record_line_error(line_no, std::string("field '") + key +
                                     "' must be an array of strings");
    }
    names.push_back(v.get<std::string>());
  }
  return names;
}

}  // namespace

std::vector<PatientRecord> read_records(std::istream& in) {
  static const char* const kFields[] = {"patient_id", "grid_step_h",
                                        "obs_channels", "int_channels",
                                        "x", "x_mask", "u", "u_mask"};
  std::vector<PatientRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      record_line_error(line_no, e.what());
    }
    if (!j.is_object()) record_line_error(line_no, "expected a JSON object");
    for (const char* field : kFields) {
      if (!j.contains(field)) {
        record_line_error(line_no, std::string("missing field '") + field + "'");
      }
    }
    for (const auto& item : j.items()) {
      bool known = false;
      for (const char* field : kFields) known = known || item.key() == field;
      if (!known) {
        record_line_error(line_no, "unexpected field '" + item.key() + "'");
      }
    }

    PatientRecord record;
    if (!j.at("patient_id").is_string()) {
      record_line_error(line_no, "field 'patient_id' must be a string");
    }
    record.patient_id = j.at("patient_id").get<std::string>();
    if (!j.at("grid_step_h").is_number()) {
      record_line_error(line_no, "field 'grid_step_h' must be a number");
    }
    record.grid_step_h = j.at("grid_step_h").get<double>();
    record.obs_channels = parse_names(j, "obs_channels", line_no);
    record.int_channels = parse_names(j, "int_channels", line_no);
    const auto o = static_cast<Eigen::Index>(record.obs_channels.size());
    const auto i = static_cast<Eigen::Index>(record.int_channels.size());
    record.x = parse_grid(j, "x", o, line_no);
    record.u = parse_grid(j, "u", i, line_no);
    if (record.x.rows() != record.u.rows()) {
      record_line_error(line_no, "'x' and 'u' disagree on the step count");
    }
    record.x_mask = parse_mask(j, "x_mask", record.x.rows(), o, line_no);
    record.u_mask = parse_mask(j, "u_mask", record.u.rows(), i, line_no);
    try {
      record.validate();
    } catch (const std::invalid_argument& e) {
      record_line_error(line_no, e.what());
    }
    records.push_back(std::move(record));
  }
  return records;
}

std::vector<PatientRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open records file '" + path + "'");
  return read_records(in);
}

void write_records(const std::vector<PatientRecord>& records,
                   std::ostream& out) {
  for (const PatientRecord& record : records) {
    require_named_channels(record);
    json j;
    j["patient_id"] = record.patient_id;
    j["grid_step_h"] = record.grid_step_h;
    j["obs_channels"] = record.obs_channels;
    j["int_channels"] = record.int_channels;
    const auto dump_grid = [](const Eigen::MatrixXd& grid) {
      json rows = json::array();
      for (Eigen::Index t = 0; t < grid.rows(); ++t) {
        json row = json::array();
        for (Eigen::Index k = 0; k < grid.cols(); ++k) row.push_back(grid(t, k));
        rows.push_back(std::move(row));
      }
      return rows;
    };
    const auto dump_mask = [](const BoolGrid& mask) {
      json rows = json::array();
      for (Eigen::Index t = 0; t < mask.rows(); ++t) {
        json row = json::array();
        for (Eigen::Index k = 0; k < mask.cols(); ++k) {
          row.push_back(mask(t, k) ? 1 : 0);
        }
        rows.push_back(std::move(row));
      }
      return rows;
    };
    j["x"] = dump_grid(record.x);
    j["x_mask"] = dump_mask(record.x_mask);
    j["u"] = dump_grid(record.u);
    j["u_mask"] = dump_mask(record.u_mask);
    out << j.dump() << '\n';
  }
}

void write_records(const std::vector<PatientRecord>& records,
                   const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open records file '" + path + "'");
  write_records(records, out);
  if (!out) {
    throw std::runtime_error("failed writing records file '" + path + "'");
  }
}

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("'" + path + "': " + e.what());
  }
}

void store_json_file(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "'");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

}  // namespace

void write_thresholds(const std::map<std::string, int>& thresholds,
                      const std::string& path) {
  json j = json::object();
  for (const auto& [channel, steps] : thresholds) j[channel] = steps;
  store_json_file(j, path);
}

std::map<std::string, int> read_thresholds(const std::string& path) {
  const json j = load_json_file(path);
  if (!j.is_object()) {
    throw std::runtime_error("'" + path + "': expected an object of thresholds");
  }
  std::map<std::string, int> thresholds;
  for (const auto& item : j.items()) {
    if (!item.value().is_number_integer() || item.value().get<int>() < 1) {
      throw std::runtime_error("'" + path + "': threshold for '" + item.key() +
                               "' must be a positive integer");
    }
    thresholds[item.key()] = item.value().get<int>();
  }
  return thresholds;
}

void write_normalization(const NormalizationStats& stats,
                         const std::string& path) {
  const auto dump_side = [](const std::map<std::string, ChannelStats>& side) {
    json j = json::object();
    for (const auto& [channel, cs] : side) {
      j[channel] = {{"mean", cs.mean}, {"stddev", cs.stddev}};
    }
    return j;
  };
  json j;
  j["obs"] = dump_side(stats.obs);
  j["int"] = dump_side(stats.ints);
  store_json_file(j, path);
}

NormalizationStats read_normalization(const std::string& path) {
  const json j = load_json_file(path);
  const auto parse_side = [&path](const json& parent, const char* key) {
    if (!parent.contains(key) || !parent.at(key).is_object()) {
      throw std::runtime_error("'" + path + "': missing '" + key +
                               "' statistics");
    }
    std::map<std::string, ChannelStats> side;
    for (const auto& item : parent.at(key).items()) {
      const auto& entry = item.value();
      if (!entry.is_object() || !entry.contains("mean") ||
          !entry.contains("stddev") || !entry.at("mean").is_number() ||
          !entry.at("stddev").is_number()) {
        throw std::runtime_error("'" + path + "': channel '" + item.key() +
                                 "' needs numeric mean and stddev");
      }
      ChannelStats cs;
      cs.mean = entry.at("mean").get<double>();
      cs.stddev = entry.at("stddev").get<double>();
      if (!std::isfinite(cs.mean) || !(cs.stddev > 0.0)) {
        throw std::runtime_error("'" + path + "': channel '" + item.key() +
                                 "' has invalid statistics");
      }
      side[item.key()] = cs;
    }
    return side;
  };
  NormalizationStats stats;
  stats.obs = parse_side(j, "obs");
  stats.ints = parse_side(j, "int");
  return stats;
}

PreparedData prepare_dataset(const std::vector<EventStream>& streams,
                             double grid_step_h,
                             const std::vector<std::string>& obs_channels,
                             const std::vector<std::string>& int_channels,
                             const std::array<double, 3>& fractions,
                             int fold_index) {
  std::vector<std::string> ids;
  ids.reserve(streams.size());
  for (const EventStream& stream : streams) ids.push_back(stream.patient_id);
  const SplitIds split = split_by_hash(ids, fractions, fold_index);

  PreparedData prepared;
  prepared.thresholds =
      intervention_gap_thresholds(streams, grid_step_h, int_channels);

  std::unordered_set<std::string> in_train(split.train.begin(),
                                           split.train.end());
  std::unordered_set<std::string> in_eval(split.eval.begin(), split.eval.end());
  for (const EventStream& stream : streams) {
    PatientRecord record = impute_interventions(
        discretize(stream, grid_step_h, obs_channels, int_channels),
        prepared.thresholds);
    if (in_train.count(stream.patient_id)) {
      prepared.train.push_back(std::move(record));
    } else if (in_eval.count(stream.patient_id)) {
      prepared.eval.push_back(std::move(record));
    } else {
      prepared.test.push_back(std::move(record));
    }
  }

  prepared.stats = fit_normalization(prepared.train);
  for (auto* side : {&prepared.train, &prepared.eval, &prepared.test}) {
    for (PatientRecord& record : *side) {
      record = impute_observations(apply_normalization(record, prepared.stats));
    }
  }
  return prepared;
}

}  // namespace ssmcast::data
