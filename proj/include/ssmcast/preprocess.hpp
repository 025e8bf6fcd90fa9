#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ssmcast/events.hpp"
#include "ssmcast/forecast_result.hpp"
#include "ssmcast/record.hpp"

namespace ssmcast::data {

// Bins a stream onto the regular grid. Step count is the highest occupied
// bin; an event at time t lands in bin ceil(t / step) (half-open bins
// (t, t+step], so a time exactly on a boundary belongs to the bin it closes),
// clamped to bin 1 for t = 0. When several events share a cell the latest by
// time wins, ties by input order. Cells without events are zero with the mask
// false. Throws on an empty stream or on channels missing from the
// dictionaries, listing the offenders.
PatientRecord discretize(const EventStream& stream, double grid_step_h,
                         const std::vector<std::string>& obs_channels,
                         const std::vector<std::string>& int_channels);

// Carries the last observed value forward through unobserved observation
// cells; cells before the first observation become 0, which is the channel
// mean once values are z-scored. Masks and observed cells are untouched.
PatientRecord impute_observations(const PatientRecord& record);

// Per-channel continuation cutoff in grid steps: the nearest-rank 90th
// percentile (the ceil(0.9 n)-th ascending order statistic) of all
// within-patient gaps between consecutive events of the channel, divided by
// the step and rounded up. Channels with fewer than two events anywhere fall
// back to 1, and a degenerate all-simultaneous channel clamps up to 1.
// Throws on an empty dataset.
std::map<std::string, int> intervention_gap_thresholds(
    const std::vector<EventStream>& dataset, double grid_step_h,
    const std::vector<std::string>& int_channels);

// Fills unobserved intervention cells: a gap between consecutive observed
// settings of at most the channel's threshold keeps the earlier setting
// running, anything longer means no action (0), as do the stretches before
// the first and after the last setting. Masks and observed cells are
// untouched. Throws when a channel has no threshold entry.
PatientRecord impute_interventions(const PatientRecord& record,
                                   const std::map<std::string, int>& thresholds);

struct ChannelStats {
  double mean = 0.0;
  double stddev = 1.0;
};

// Z-score statistics per channel, fit on the training split only.
// Observation stats pool mask-true cells; intervention stats pool the
// observed settings the same way. A channel never observed in the split gets
// the neutral (0, 1) so its imputed zeros survive normalization unchanged.
struct NormalizationStats {
  std::map<std::string, ChannelStats> obs;
  std::map<std::string, ChannelStats> ints;
};

// Population mean and standard deviation over observed cells, stddev floored
// at 1e-6. All records must agree on the channel lists.
NormalizationStats fit_normalization(const std::vector<PatientRecord>& train);

// (v - mean) / stddev per channel over every cell, masks unchanged; the
// record's channel sets must match the stats exactly. invert is the exact
// inverse map. The forecast overloads carry the channel lists alongside the
// column order and scale variances by stddev squared.
PatientRecord apply_normalization(const PatientRecord& record,
                                  const NormalizationStats& stats);
PatientRecord invert_normalization(const PatientRecord& record,
                                   const NormalizationStats& stats);
ForecastResult apply_normalization(const ForecastResult& forecast,
                                   const NormalizationStats& stats,
                                   const std::vector<std::string>& obs_channels,
                                   const std::vector<std::string>& int_channels);
ForecastResult invert_normalization(const ForecastResult& forecast,
                                    const NormalizationStats& stats,
                                    const std::vector<std::string>& obs_channels,
                                    const std::vector<std::string>& int_channels);

struct SplitIds {
  std::vector<std::string> train;
  std::vector<std::string> eval;
  std::vector<std::string> test;
};

// Pure hash split: bucket = FNV-1a-64(id) mod 100, rotated by 10 per fold;
// after rotation the test ids sit in the first test-fraction buckets, eval in
// the next eval-fraction ones, train in the rest. Fractions are
// {train, eval, test} summing to 1 in whole percent. Outputs keep the caller's
// id order; the assignment itself depends only on the id bytes. Throws on
// duplicate ids, a fold outside [0, 10) or fractions that do not add up.
SplitIds split_by_hash(const std::vector<std::string>& patient_ids,
                       const std::array<double, 3>& fractions = {0.8, 0.1, 0.1},
                       int fold_index = 0);

// JSONL, one record per line:
//   {"patient_id", "grid_step_h", "obs_channels", "int_channels",
//    "x", "x_mask", "u", "u_mask"}
// with x/u as row arrays and masks as 0/1. Round-trips are lossless for
// finite values; malformed lines throw with the line number.
std::vector<PatientRecord> read_records(std::istream& in);
std::vector<PatientRecord> read_records(const std::string& path);
void write_records(const std::vector<PatientRecord>& records,
                   std::ostream& out);
void write_records(const std::vector<PatientRecord>& records,
                   const std::string& path);

// JSON sidecars keyed by channel name.
void write_thresholds(const std::map<std::string, int>& thresholds,
                      const std::string& path);
std::map<std::string, int> read_thresholds(const std::string& path);
void write_normalization(const NormalizationStats& stats,
                         const std::string& path);
NormalizationStats read_normalization(const std::string& path);

struct PreparedData {
  std::vector<PatientRecord> train;
  std::vector<PatientRecord> eval;
  std::vector<PatientRecord> test;
  std::map<std::string, int> thresholds;
  NormalizationStats stats;
};

// The full preparation chain in its one blessed order: grid every stream,
// fill intervention gaps with thresholds taken from the raw event spacing,
// fit normalization on the training split only, normalize all splits, then
// fill observation gaps (so the leading-zero rule lands on the z-scored
// scale). Records stay in input order within each split.
PreparedData prepare_dataset(const std::vector<EventStream>& streams,
                             double grid_step_h,
                             const std::vector<std::string>& obs_channels,
                             const std::vector<std::string>& int_channels,
                             const std::array<double, 3>& fractions = {0.8, 0.1,
                                                                       0.1},
                             int fold_index = 0);

}  // namespace ssmcast::data
