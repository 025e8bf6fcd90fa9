#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace ssmcast::data {

enum class EventKind { kObservation, kIntervention };

// One irregular measurement or intervention setting, in hours from admission.
struct Event {
  double time_h = 0.0;
  std::string channel;
  double value = 0.0;
  EventKind kind = EventKind::kObservation;
};

// Raw per-patient event list, kept in input order so downstream tie-breaking
// stays reproducible. Static context rides along for bookkeeping only; it is
// not part of the interchange format and nothing downstream consumes it.
struct EventStream {
  std::string patient_id;
  std::vector<Event> events;
  std::map<std::string, std::string> static_context;
};

// JSONL, one event per line:
//   {"patient_id": str, "time_h": num, "channel": str, "value": num,
//    "kind": "obs"|"int"}
// Lines group into streams by patient id in first-appearance order; events
// keep file order. Blank lines are skipped. Any malformed line (bad JSON,
// missing or extra fields, unknown kind, negative time, non-finite numbers)
// throws with the offending line number. An empty file is an empty dataset.
std::vector<EventStream> read_events(std::istream& in);
std::vector<EventStream> read_events(const std::string& path);
void write_events(const std::vector<EventStream>& streams, std::ostream& out);
void write_events(const std::vector<EventStream>& streams,
                  const std::string& path);

}  // namespace ssmcast::data
