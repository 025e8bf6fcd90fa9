#include "ssmcast/events.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace ssmcast::data {
namespace {

using nlohmann::json;

[[noreturn]] void line_error(std::size_t line_no, const std::string& what) {
  throw std::runtime_error("events line " + std::to_string(line_no) + ": " +
                           what);
}

bool blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}

std::string string_field(const json& j, const char* key, std::size_t line_no) {
  const auto& v = j.at(key);
  if (!v.is_string() || v.get<std::string>().empty()) {
    line_error(line_no, std::string("field '") + key +
                            "' must be a non-empty string");
  }
  return v.get<std::string>();
}

double number_field(const json& j, const char* key, std::size_t line_no) {
  const auto& v = j.at(key);
  if (!v.is_number()) {
    line_error(line_no, std::string("field '") + key + "' must be a number");
  }
  const double d = v.get<double>();
  if (!std::isfinite(d)) {
    line_error(line_no, std::string("field '") + key + "' is not finite");
  }
  return d;
}

}  // namespace

std::vector<EventStream> read_events(std::istream& in) {
  static const char* const kFields[] = {"patient_id", "time_h", "channel",
                                        "value", "kind"};
  std::vector<EventStream> streams;
  std::unordered_map<std::string, std::size_t> stream_index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      line_error(line_no, e.what());
    }
    if (!j.is_object()) line_error(line_no, "expected a JSON object");
    for (const char* field : kFields) {
      if (!j.contains(field)) {
        line_error(line_no, std::string("missing field '") + field + "'");
      }
    }
    for (const auto& item : j.items()) {
      bool known = false;
      for (const char* field : kFields) known = known || item.key() == field;
      if (!known) {
        line_error(line_no, "unexpected field '" + item.key() + "'");
      }
    }

    Event event;
    const std::string patient_id = string_field(j, "patient_id", line_no);
    event.channel = string_field(j, "channel", line_no);
    event.time_h = number_field(j, "time_h", line_no);
    if (event.time_h < 0.0) line_error(line_no, "negative time");
    event.value = number_field(j, "value", line_no);
    const std::string kind = string_field(j, "kind", line_no);
    if (kind == "obs") {
      event.kind = EventKind::kObservation;
    } else if (kind == "int") {
      event.kind = EventKind::kIntervention;
    } else {
      line_error(line_no, "unknown kind '" + kind + "'");
    }

    auto [it, fresh] = stream_index.try_emplace(patient_id, streams.size());
    if (fresh) {
      streams.emplace_back();
      streams.back().patient_id = patient_id;
    }
    streams[it->second].events.push_back(std::move(event));
  }
  return streams;
}

std::vector<EventStream> read_events(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open events file '" + path + "'");
  return read_events(in);
}

void write_events(const std::vector<EventStream>& streams, std::ostream& out) {
  for (const EventStream& stream : streams) {
    for (const Event& event : stream.events) {
      if (!std::isfinite(event.time_h) || !std::isfinite(event.value)) {
        throw std::runtime_error("patient '" + stream.patient_id +
                                 "': non-finite event on channel '" +
                                 event.channel + "'");
      }
      json j;
      j["patient_id"] = stream.patient_id;
      j["time_h"] = event.time_h;
      j["channel"] = event.channel;
      j["value"] = event.value;
      j["kind"] = event.kind == EventKind::kObservation ? "obs" : "int";
      out << j.dump() << '\n';
    }
  }
}

void write_events(const std::vector<EventStream>& streams,
                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open events file '" + path + "'");
  write_events(streams, out);
  if (!out) throw std::runtime_error("failed writing events file '" + path + "'");
}

}  // namespace ssmcast::data
