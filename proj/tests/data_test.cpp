#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ssmcast/events.hpp"
#include "ssmcast/preprocess.hpp"
#include "ssmcast/record.hpp"
#include "ssmcast/rng.hpp"
#include "ssmcast/synthetic.hpp"

namespace {

using namespace ssmcast;
using data::BoolGrid;
using data::Event;
using data::EventKind;
using data::EventStream;
using data::PatientRecord;

template <typename F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

bool same_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.array() == b.array()).all();
}

bool same_mask(const BoolGrid& a, const BoolGrid& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a == b).all();
}

void check_streams_equal(const std::vector<EventStream>& a,
                         const std::vector<EventStream>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t s = 0; s < a.size(); ++s) {
    CHECK(a[s].patient_id == b[s].patient_id);
    REQUIRE(a[s].events.size() == b[s].events.size());
    for (std::size_t k = 0; k < a[s].events.size(); ++k) {
      CHECK(a[s].events[k].time_h == b[s].events[k].time_h);
      CHECK(a[s].events[k].channel == b[s].events[k].channel);
      CHECK(a[s].events[k].value == b[s].events[k].value);
      CHECK(a[s].events[k].kind == b[s].events[k].kind);
    }
  }
}

// Skeleton record with named channels, everything unobserved and zero.
PatientRecord blank_record(Eigen::Index steps, Eigen::Index o, Eigen::Index i) {
  PatientRecord r;
  r.patient_id = "blank";
  r.obs_channels = data::channel_names("obs", static_cast<int>(o));
  r.int_channels = data::channel_names("int", static_cast<int>(i));
  r.x = Eigen::MatrixXd::Zero(steps, o);
  r.u = Eigen::MatrixXd::Zero(steps, i);
  r.x_mask = BoolGrid::Constant(steps, o, false);
  r.u_mask = BoolGrid::Constant(steps, i, false);
  return r;
}

}  // namespace

TEST_CASE("events files round-trip and group by patient") {
  std::vector<EventStream> streams(2);
  streams[0].patient_id = "alice";
  streams[0].events = {
      {0.5, "hr", 81.5, EventKind::kObservation},
      {2.0, "dopamine", 1.0 / 3.0, EventKind::kIntervention},
      {1.25, "hr", 1e-7, EventKind::kObservation},  // unsorted on purpose
  };
  streams[1].patient_id = "bob";
  streams[1].events = {{3.0, "spo2", 97.0, EventKind::kObservation}};

  std::ostringstream out;
  data::write_events(streams, out);
  std::istringstream in(out.str());
  check_streams_equal(data::read_events(in), streams);

  SUBCASE("interleaved lines keep per-patient file order") {
    std::istringstream mixed(
        R"({"patient_id":"b","time_h":1.0,"channel":"hr","value":1.0,"kind":"obs"})"
        "\n"
        R"({"patient_id":"a","time_h":2.0,"channel":"hr","value":2.0,"kind":"obs"})"
        "\n"
        "\n"
        R"({"patient_id":"b","time_h":0.5,"channel":"hr","value":3.0,"kind":"obs"})"
        "\n");
    const auto streams2 = data::read_events(mixed);
    REQUIRE(streams2.size() == 2);
    CHECK(streams2[0].patient_id == "b");
    REQUIRE(streams2[0].events.size() == 2);
    CHECK(streams2[0].events[0].value == 1.0);
    CHECK(streams2[0].events[1].value == 3.0);
    CHECK(streams2[1].patient_id == "a");
  }

  SUBCASE("an empty file is an empty dataset") {
    std::istringstream empty("");
    CHECK(data::read_events(empty).empty());
  }
}

TEST_CASE("malformed event lines name their line") {
  const auto read = [](const std::string& text) {
    std::istringstream in(text);
    return data::read_events(in);
  };
  const std::string good =
      R"({"patient_id":"a","time_h":1.0,"channel":"hr","value":2.0,"kind":"obs"})";

  std::string msg = error_of([&] { read(good + "\nnot json\n"); });
  CHECK(contains(msg, "events line 2"));

  msg = error_of([&] {
    read(good + "\n" + good + "\n" +
         R"({"patient_id":"a","time_h":1.0,"channel":"hr","value":2.0,"kind":"med"})" +
         "\n");
  });
  CHECK(contains(msg, "line 3"));
  CHECK(contains(msg, "med"));

  msg = error_of([&] {
    read(R"({"patient_id":"a","time_h":1.0,"channel":"hr","kind":"obs"})");
  });
  CHECK(contains(msg, "line 1"));
  CHECK(contains(msg, "value"));

  msg = error_of([&] {
    read(R"({"patient_id":"a","time_h":-1.0,"channel":"hr","value":2.0,"kind":"obs"})");
  });
  CHECK(contains(msg, "negative time"));

  msg = error_of([&] {
    read(R"({"patient_id":"a","time_h":null,"channel":"hr","value":2.0,"kind":"obs"})");
  });
  CHECK(contains(msg, "time_h"));

  msg = error_of([&] {
    read(R"({"patient_id":"a","time_h":1.0,"channel":"hr","value":2.0,"kind":"obs","extra":1})");
  });
  CHECK(contains(msg, "extra"));
}

TEST_CASE("discretize follows the half-open binning rules") {
  const std::vector<std::string> obs = {"hr"};
  const std::vector<std::string> ints = {"dop"};

  EventStream s;
  s.patient_id = "p";
  s.events = {{0.5, "hr", 7.0, EventKind::kObservation}};
  PatientRecord r = data::discretize(s, 1.0, obs, ints);
  CHECK(r.steps() == 1);
  CHECK(r.x(0, 0) == 7.0);
  CHECK(r.x_mask(0, 0));
  CHECK_FALSE(r.u_mask(0, 0));

  SUBCASE("the latest event in a bin wins, ties by input order") {
    s.events = {{0.2, "hr", 3.0, EventKind::kObservation},
                {0.7, "hr", 7.0, EventKind::kObservation}};
    CHECK(data::discretize(s, 1.0, obs, ints).x(0, 0) == 7.0);

    // Later time listed first: time still decides.
    s.events = {{0.7, "hr", 7.0, EventKind::kObservation},
                {0.2, "hr", 3.0, EventKind::kObservation}};
    CHECK(data::discretize(s, 1.0, obs, ints).x(0, 0) == 7.0);

    // Exact tie: the later line wins.
    s.events = {{0.4, "hr", 3.0, EventKind::kObservation},
                {0.4, "hr", 7.0, EventKind::kObservation}};
    CHECK(data::discretize(s, 1.0, obs, ints).x(0, 0) == 7.0);
  }

  SUBCASE("a boundary time belongs to the bin it closes") {
    s.events = {{2.0, "hr", 1.0, EventKind::kObservation}};
    r = data::discretize(s, 1.0, obs, ints);
    CHECK(r.steps() == 2);
    CHECK(r.x_mask(1, 0));
    CHECK_FALSE(r.x_mask(0, 0));

    s.events = {{1.0, "hr", 1.0, EventKind::kObservation}};
    r = data::discretize(s, 0.5, obs, ints);
    CHECK(r.steps() == 2);
    CHECK(r.x_mask(1, 0));
  }

  SUBCASE("a time-zero event clamps into the first bin") {
    s.events = {{0.0, "hr", 5.0, EventKind::kObservation}};
    r = data::discretize(s, 1.0, obs, ints);
    CHECK(r.steps() == 1);
    CHECK(r.x(0, 0) == 5.0);
    CHECK(r.x_mask(0, 0));
  }

  SUBCASE("step count covers the latest event") {
    s.events = {{0.5, "hr", 1.0, EventKind::kObservation},
                {2.3, "dop", 4.0, EventKind::kIntervention}};
    r = data::discretize(s, 1.0, obs, ints);
    CHECK(r.steps() == 3);
    CHECK(r.u(2, 0) == 4.0);
    CHECK(r.u_mask(2, 0));
    CHECK_FALSE(r.x_mask(1, 0));
    CHECK(r.x(1, 0) == 0.0);
  }

  SUBCASE("unknown channels are listed, per kind") {
    s.events = {{1.0, "hr", 1.0, EventKind::kObservation},
                {1.0, "mystery", 1.0, EventKind::kObservation},
                {1.0, "hr", 1.0, EventKind::kIntervention}};
    const std::string msg =
        error_of([&] { data::discretize(s, 1.0, obs, ints); });
    CHECK(contains(msg, "mystery"));
    CHECK(contains(msg, "intervention"));
    CHECK(contains(msg, "'hr'"));
  }

  SUBCASE("an empty stream cannot be gridded") {
    s.events.clear();
    CHECK_THROWS_AS(data::discretize(s, 1.0, obs, ints),
                    std::invalid_argument);
  }
}

TEST_CASE("observation imputation carries the last value forward") {
  PatientRecord r = blank_record(4, 1, 1);
  r.x << 0, 5, 0, 0;
  r.x_mask(1, 0) = true;

  const PatientRecord filled = data::impute_observations(r);
  Eigen::MatrixXd want(4, 1);
  want << 0, 5, 5, 5;
  CHECK(same_matrix(filled.x, want));
  CHECK(same_mask(filled.x_mask, r.x_mask));

  SUBCASE("fully observed channels never change") {
    PatientRecord full = blank_record(3, 2, 1);
    full.x << 0.1, -2.0, 0.3, 4.0, 0.5, 1.0 / 3.0;
    full.x_mask.setConstant(true);
    CHECK(same_matrix(data::impute_observations(full).x, full.x));
  }

  SUBCASE("a fully missing channel becomes zeros") {
    PatientRecord none = blank_record(3, 1, 1);
    none.x << 9, 9, 9;  // stale garbage must be cleared
    CHECK(same_matrix(data::impute_observations(none).x,
                      Eigen::MatrixXd::Zero(3, 1)));
  }

  SUBCASE("imputation is idempotent and leaves interventions alone") {
    r.u << 1, 2, 3, 4;
    const PatientRecord once = data::impute_observations(r);
    const PatientRecord twice = data::impute_observations(once);
    CHECK(same_matrix(once.x, twice.x));
    CHECK(same_matrix(once.u, r.u));
    CHECK(same_mask(once.x_mask, twice.x_mask));
  }
}

TEST_CASE("gap thresholds take the ninetieth percentile in grid steps") {
  const std::vector<std::string> ints = {"dop", "vent"};
  const auto stream_with = [](const std::string& id, const std::string& channel,
                              std::vector<double> times) {
    EventStream s;
    s.patient_id = id;
    for (double t : times) {
      s.events.push_back({t, channel, 1.0, EventKind::kIntervention});
    }
    return s;
  };

  SUBCASE("gaps one through ten give nine") {
    // Consecutive diffs 1..10, listed out of order to exercise the sort.
    EventStream s = stream_with("p", "dop",
                                {55, 0, 45, 1, 36, 3, 28, 6, 21, 10, 15});
    const auto th = data::intervention_gap_thresholds({s}, 1.0, ints);
    CHECK(th.at("dop") == 9);
    CHECK(th.at("vent") == 1);  // no events anywhere

    // A coarser grid rounds the same cutoff up in steps.
    CHECK(data::intervention_gap_thresholds({s}, 2.0, ints).at("dop") == 5);
  }

  SUBCASE("equal gaps return that gap") {
    EventStream s = stream_with("p", "dop", {0, 2, 4, 6});
    CHECK(data::intervention_gap_thresholds({s}, 1.0, ints).at("dop") == 2);
  }

  SUBCASE("gaps pool across patients but never span them") {
    const EventStream a = stream_with("a", "dop", {0, 1});
    const EventStream b = stream_with("b", "dop", {0, 5});
    CHECK(data::intervention_gap_thresholds({a, b}, 1.0, ints).at("dop") == 5);

    // One event per patient: no within-patient gap exists.
    const EventStream c = stream_with("c", "dop", {100});
    const EventStream d = stream_with("d", "dop", {0});
    CHECK(data::intervention_gap_thresholds({c, d}, 1.0, ints).at("dop") == 1);
  }

  SUBCASE("observation events do not contribute") {
    EventStream s = stream_with("p", "dop", {0, 3});
    s.events.push_back({1.0, "dop", 1.0, EventKind::kObservation});
    CHECK(data::intervention_gap_thresholds({s}, 1.0, ints).at("dop") == 3);
  }

  SUBCASE("an empty dataset has no percentiles") {
    CHECK_THROWS_AS(data::intervention_gap_thresholds({}, 1.0, ints),
                    std::invalid_argument);
  }
}

TEST_CASE("intervention imputation distinguishes continuation from no action") {
  const std::map<std::string, int> thresholds = {{"int00", 3}};

  SUBCASE("a short gap keeps the setting running") {
    PatientRecord r = blank_record(3, 1, 1);
    r.u << 4.0, 0, 4.0;
    r.u_mask(0, 0) = r.u_mask(2, 0) = true;
    const PatientRecord filled = data::impute_interventions(r, thresholds);
    Eigen::MatrixXd want(3, 1);
    want << 4.0, 4.0, 4.0;
    CHECK(same_matrix(filled.u, want));
    CHECK(same_mask(filled.u_mask, r.u_mask));
  }

  SUBCASE("a long gap means no action") {
    PatientRecord r = blank_record(10, 1, 1);
    r.u(0, 0) = r.u(9, 0) = 4.0;
    r.u_mask(0, 0) = r.u_mask(9, 0) = true;
    const PatientRecord filled = data::impute_interventions(r, thresholds);
    for (Eigen::Index t = 1; t <= 8; ++t) CHECK(filled.u(t, 0) == 0.0);
    CHECK(filled.u(0, 0) == 4.0);
    CHECK(filled.u(9, 0) == 4.0);
  }

  SUBCASE("the threshold itself still counts as continuation") {
    PatientRecord r = blank_record(6, 1, 1);
    r.u(0, 0) = 2.0;
    r.u(3, 0) = 5.0;  // gap of exactly 3 steps
    r.u_mask(0, 0) = r.u_mask(3, 0) = true;
    const PatientRecord filled = data::impute_interventions(r, thresholds);
    CHECK(filled.u(1, 0) == 2.0);  // the earlier setting carries
    CHECK(filled.u(2, 0) == 2.0);
    CHECK(filled.u(3, 0) == 5.0);
    // Nothing runs past the last observed setting.
    CHECK(filled.u(4, 0) == 0.0);
    CHECK(filled.u(5, 0) == 0.0);

    PatientRecord wider = blank_record(6, 1, 1);
    wider.u(0, 0) = 2.0;
    wider.u(4, 0) = 5.0;  // gap of 4 steps, one past the cutoff
    wider.u_mask(0, 0) = wider.u_mask(4, 0) = true;
    const PatientRecord sparse = data::impute_interventions(wider, thresholds);
    CHECK(sparse.u(1, 0) == 0.0);
    CHECK(sparse.u(2, 0) == 0.0);
    CHECK(sparse.u(3, 0) == 0.0);
  }

  SUBCASE("channels without any events stay zero") {
    PatientRecord r = blank_record(4, 1, 1);
    r.u << 7, 7, 7, 7;  // stale garbage in unobserved cells must be cleared
    const PatientRecord filled = data::impute_interventions(r, thresholds);
    CHECK(same_matrix(filled.u, Eigen::MatrixXd::Zero(4, 1)));
  }

  SUBCASE("every channel needs a threshold") {
    PatientRecord r = blank_record(2, 1, 2);
    const std::string msg =
        error_of([&] { data::impute_interventions(r, thresholds); });
    CHECK(contains(msg, "int01"));
  }

  SUBCASE("imputation is idempotent") {
    PatientRecord r = blank_record(7, 1, 1);
    r.u(1, 0) = 3.0;
    r.u(3, 0) = 3.5;
    r.u_mask(1, 0) = r.u_mask(3, 0) = true;
    const PatientRecord once = data::impute_interventions(r, thresholds);
    const PatientRecord twice = data::impute_interventions(once, thresholds);
    CHECK(same_matrix(once.u, twice.u));
  }
}

TEST_CASE("normalization is fit on observed training cells only") {
  // Channels: hr with values {1,3,5}, const pinned at 5, dop with {2,4}.
  std::vector<PatientRecord> train;
  PatientRecord r1 = blank_record(2, 2, 2);
  r1.patient_id = "r1";
  r1.obs_channels = {"hr", "const"};
  r1.int_channels = {"dop", "unused"};
  r1.x << 1.0, 5.0, 3.0, 5.0;
  r1.x_mask.setConstant(true);
  r1.u(0, 0) = 2.0;
  r1.u_mask(0, 0) = true;
  r1.u(1, 0) = 99.0;  // unobserved cell; must not tilt the fit
  train.push_back(r1);

  PatientRecord r2 = blank_record(1, 2, 2);
  r2.patient_id = "r2";
  r2.obs_channels = r1.obs_channels;
  r2.int_channels = r1.int_channels;
  r2.x << 5.0, 5.0;
  r2.x_mask.setConstant(true);
  r2.u(0, 0) = 4.0;
  r2.u_mask(0, 0) = true;
  train.push_back(r2);

  const data::NormalizationStats stats = data::fit_normalization(train);
  CHECK(stats.obs.at("hr").mean == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(stats.obs.at("hr").stddev ==
        doctest::Approx(std::sqrt(8.0 / 3.0)).epsilon(1e-12));
  CHECK(stats.obs.at("const").stddev == 1e-6);  // constant channel floors
  CHECK(stats.ints.at("dop").mean == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(stats.ints.at("dop").stddev == doctest::Approx(1.0).epsilon(1e-12));
  // Never observed: neutral, so imputed zeros stay zero.
  CHECK(stats.ints.at("unused").mean == 0.0);
  CHECK(stats.ints.at("unused").stddev == 1.0);

  SUBCASE("applying and inverting round-trips") {
    const PatientRecord norm = data::apply_normalization(r1, stats);
    CHECK(norm.x(0, 1) == 0.0);  // constant channel maps to zero
    CHECK(norm.u(0, 1) == 0.0);
    const PatientRecord back = data::invert_normalization(norm, stats);
    CHECK((back.x - r1.x).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((back.u - r1.u).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("the training split renormalizes to mean zero and unit spread") {
    double sum = 0.0, squares = 0.0;
    std::size_t count = 0;
    for (const PatientRecord& r : train) {
      const PatientRecord norm = data::apply_normalization(r, stats);
      for (Eigen::Index t = 0; t < norm.steps(); ++t) {
        if (!norm.x_mask(t, 0)) continue;
        sum += norm.x(t, 0);
        squares += norm.x(t, 0) * norm.x(t, 0);
        ++count;
      }
    }
    const double mean = sum / static_cast<double>(count);
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(squares / static_cast<double>(count) - mean * mean - 1.0) <
          1e-9);
  }

  SUBCASE("mismatched channel sets are rejected") {
    PatientRecord other = blank_record(1, 1, 1);
    other.obs_channels = {"temp"};
    other.int_channels = {"dop"};
    const std::string msg =
        error_of([&] { data::apply_normalization(other, stats); });
    CHECK(contains(msg, "temp"));

    data::NormalizationStats partial = stats;
    partial.obs.erase("const");
    CHECK_THROWS_AS(data::apply_normalization(r1, partial),
                    std::invalid_argument);
  }

  SUBCASE("forecast scaling moves means and squares the spread") {
    ForecastResult f;
    f.origin = 1;
    f.obs_mean = Eigen::MatrixXd::Constant(2, 2, 4.0);
    f.obs_var = Eigen::MatrixXd::Constant(2, 2, 0.5);
    f.int_mean = Eigen::MatrixXd::Constant(2, 2, 1.0);
    f.int_var = Eigen::MatrixXd::Constant(2, 2, 0.25);
    const auto norm = data::apply_normalization(f, stats, r1.obs_channels,
                                                r1.int_channels);
    const double sd = stats.obs.at("hr").stddev;
    CHECK(norm.obs_mean(0, 0) == doctest::Approx((4.0 - 3.0) / sd));
    CHECK(norm.obs_var(0, 0) == doctest::Approx(0.5 / (sd * sd)));
    const auto back = data::invert_normalization(norm, stats, r1.obs_channels,
                                                 r1.int_channels);
    CHECK((back.obs_mean - f.obs_mean).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((back.obs_var - f.obs_var).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((back.int_var - f.int_var).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS_AS(
        data::apply_normalization(f, stats, {"hr"}, r1.int_channels),
        std::invalid_argument);
  }

  SUBCASE("sidecar files round-trip") {
    data::write_normalization(stats, "norm_roundtrip_test.json");
    const data::NormalizationStats loaded =
        data::read_normalization("norm_roundtrip_test.json");
    REQUIRE(loaded.obs.size() == stats.obs.size());
    for (const auto& [name, cs] : stats.obs) {
      CHECK(loaded.obs.at(name).mean == cs.mean);
      CHECK(loaded.obs.at(name).stddev == cs.stddev);
    }
    for (const auto& [name, cs] : stats.ints) {
      CHECK(loaded.ints.at(name).mean == cs.mean);
      CHECK(loaded.ints.at(name).stddev == cs.stddev);
    }

    const std::map<std::string, int> th = {{"dop", 9}, {"vent", 1}};
    data::write_thresholds(th, "thresholds_roundtrip_test.json");
    CHECK(data::read_thresholds("thresholds_roundtrip_test.json") == th);
  }

  SUBCASE("an empty training split cannot be fit") {
    CHECK_THROWS_AS(data::fit_normalization({}), std::invalid_argument);
  }
}

TEST_CASE("hash splitting is a pure function of the id") {
  std::vector<std::string> ids;
  ids.reserve(10000);
  for (int k = 0; k < 10000; ++k) {
    ids.push_back("id" + std::to_string(100000 + k));
  }

  const data::SplitIds split = data::split_by_hash(ids);
  const auto frac = [&](const std::vector<std::string>& part) {
    return static_cast<double>(part.size()) / 10000.0;
  };
  CHECK(std::abs(frac(split.train) - 0.8) <= 0.02);
  CHECK(std::abs(frac(split.eval) - 0.1) <= 0.02);
  CHECK(std::abs(frac(split.test) - 0.1) <= 0.02);
  CHECK(split.train.size() + split.eval.size() + split.test.size() ==
        ids.size());

  // Membership matches the bucket formula directly.
  for (const std::string& id : split.test) {
    CHECK(fnv1a64(id) % 100 < 10);
  }
  for (const std::string& id : split.eval) {
    const auto bucket = fnv1a64(id) % 100;
    CHECK(bucket >= 10);
    CHECK(bucket < 20);
  }

  SUBCASE("dataset order is irrelevant") {
    std::vector<std::string> reversed(ids.rbegin(), ids.rend());
    const data::SplitIds again = data::split_by_hash(reversed);
    const std::set<std::string> a(split.test.begin(), split.test.end());
    const std::set<std::string> b(again.test.begin(), again.test.end());
    CHECK(a == b);
  }

  SUBCASE("the ten folds partition the ids") {
    std::map<std::string, int> covered;
    for (int fold = 0; fold < 10; ++fold) {
      const data::SplitIds f = data::split_by_hash(ids, {0.8, 0.1, 0.1}, fold);
      for (const std::string& id : f.test) ++covered[id];
    }
    CHECK(covered.size() == ids.size());
    for (const auto& [id, hits] : covered) {
      CHECK(hits == 1);
    }
  }

  SUBCASE("bad input is rejected") {
    CHECK_THROWS_AS(data::split_by_hash({"a", "a"}), std::invalid_argument);
    CHECK_THROWS_AS(data::split_by_hash({"a"}, {0.8, 0.1, 0.2}),
                    std::invalid_argument);
    CHECK_THROWS_AS(data::split_by_hash({"a"}, {0.8, 0.1, 0.1}, 10),
                    std::invalid_argument);
    CHECK_THROWS_AS(data::split_by_hash({"a"}, {0.8, 0.1, 0.1}, -1),
                    std::invalid_argument);
  }
}

TEST_CASE("records files round-trip bit for bit") {
  PatientRecord r = blank_record(2, 2, 1);
  r.patient_id = "rt";
  r.grid_step_h = 0.5;
  r.x << 0.1, 1.0 / 3.0, -7.25, 1e-17;
  r.u << 1e300, 0.0;
  r.x_mask(0, 1) = r.x_mask(1, 0) = true;
  r.u_mask(1, 0) = true;

  std::ostringstream out;
  data::write_records({r, blank_record(1, 2, 1)}, out);
  std::istringstream in(out.str());
  const auto loaded = data::read_records(in);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].patient_id == "rt");
  CHECK(loaded[0].grid_step_h == 0.5);
  CHECK(loaded[0].obs_channels == r.obs_channels);
  CHECK(same_matrix(loaded[0].x, r.x));
  CHECK(same_matrix(loaded[0].u, r.u));
  CHECK(same_mask(loaded[0].x_mask, r.x_mask));
  CHECK(same_mask(loaded[0].u_mask, r.u_mask));

  // A second pass through text changes nothing.
  std::ostringstream out2;
  data::write_records(loaded, out2);
  CHECK(out.str() == out2.str());

  SUBCASE("broken lines name their number") {
    const auto read = [](const std::string& text) {
      std::istringstream s(text);
      return data::read_records(s);
    };
    std::ostringstream one;
    data::write_records({blank_record(1, 1, 1)}, one);

    std::string msg = error_of([&] { read(one.str() + "{broken\n"); });
    CHECK(contains(msg, "records line 2"));

    msg = error_of([&] {
      read(R"({"patient_id":"p","grid_step_h":1.0,"obs_channels":["a"],)"
           R"("int_channels":[],"x":[[1,2]],"x_mask":[[1]],"u":[[]],"u_mask":[[]]})");
    });
    CHECK(contains(msg, "line 1"));
    CHECK(contains(msg, "'x'"));

    msg = error_of([&] {
      read(R"({"patient_id":"p","grid_step_h":1.0,"obs_channels":["a"],)"
           R"("int_channels":[],"x":[[1]],"x_mask":[[2]],"u":[[]],"u_mask":[[]]})");
    });
    CHECK(contains(msg, "0 or 1"));

    msg = error_of([&] {
      read(R"({"patient_id":"p","grid_step_h":1.0,"obs_channels":["a"],)"
           R"("int_channels":[],"x":[[1]],"x_mask":[[1]],"u":[[]],"u_mask":[[]],"bonus":3})");
    });
    CHECK(contains(msg, "bonus"));
  }
}

TEST_CASE("simulation is deterministic down to the bytes") {
  data::SyntheticConfig cfg;
  cfg.n_patients = 4;
  cfg.min_steps = 8;
  cfg.max_steps = 12;

  const data::SyntheticDataset a = data::simulate(cfg, 42);
  const data::SyntheticDataset b = data::simulate(cfg, 42);
  std::ostringstream file_a, file_b;
  data::write_events(a.events, file_a);
  data::write_events(b.events, file_b);
  CHECK(file_a.str() == file_b.str());
  REQUIRE(a.truth.size() == b.truth.size());
  for (std::size_t k = 0; k < a.truth.size(); ++k) {
    CHECK(same_matrix(a.truth[k].x, b.truth[k].x));
    CHECK(same_matrix(a.truth[k].u, b.truth[k].u));
  }

  const data::SyntheticDataset c = data::simulate(cfg, 43);
  std::ostringstream file_c;
  data::write_events(c.events, file_c);
  CHECK(file_a.str() != file_c.str());

  SUBCASE("patients are substreams: growing the cohort changes nobody") {
    data::SyntheticConfig bigger = cfg;
    bigger.n_patients = 6;
    const data::SyntheticDataset big = data::simulate(bigger, 42);
    for (std::size_t k = 0; k < a.truth.size(); ++k) {
      CHECK(same_matrix(a.truth[k].x, big.truth[k].x));
      CHECK(same_matrix(a.truth[k].u, big.truth[k].u));
      CHECK(a.events[k].events.size() == big.events[k].events.size());
    }
  }
}

TEST_CASE("dense simulation reproduces its truth grid through gridding") {
  data::SyntheticConfig cfg;
  cfg.n_patients = 3;
  cfg.min_steps = 6;
  cfg.max_steps = 9;
  cfg.missing_rate = 0.0;
  cfg.intervention_sparsity = 0.0;

  const data::SyntheticDataset ds = data::simulate(cfg, 7);
  const auto obs = data::channel_names("obs", cfg.o_dim);
  const auto ints = data::channel_names("int", cfg.i_dim);
  for (std::size_t k = 0; k < ds.events.size(); ++k) {
    const PatientRecord grid =
        data::discretize(ds.events[k], cfg.grid_step_h, obs, ints);
    CHECK(same_matrix(grid.x, ds.truth[k].x));
    CHECK(same_matrix(grid.u, ds.truth[k].u));
    CHECK(same_mask(grid.x_mask, ds.truth[k].x_mask));
    CHECK(same_mask(grid.u_mask, ds.truth[k].u_mask));
    CHECK(grid.x_mask.all());       // no thinning
    CHECK(!grid.u_mask.row(0).any());  // nothing doses before the start
    CHECK(grid.u_mask.bottomRows(grid.steps() - 1).all());
  }

  SUBCASE("a zero missing rate alone keeps every observation") {
    data::SyntheticConfig sparse = cfg;
    sparse.intervention_sparsity = 0.7;
    const data::SyntheticDataset ds2 = data::simulate(sparse, 8);
    for (std::size_t k = 0; k < ds2.events.size(); ++k) {
      const PatientRecord grid =
          data::discretize(ds2.events[k], cfg.grid_step_h, obs, ints);
      CHECK(grid.x_mask.all());
    }
  }
}

TEST_CASE("noise-free simulation equals the plain mean recursion") {
  data::SyntheticConfig cfg;
  cfg.n_patients = 3;
  cfg.min_steps = 5;
  cfg.max_steps = 8;
  cfg.missing_rate = 0.0;
  cfg.intervention_sparsity = 0.4;
  cfg.state_noise = cfg.obs_noise = cfg.int_noise = 0.0;

  const data::SyntheticDataset ds = data::simulate(cfg, 11);
  const lgssm::LgssmParams& p = ds.linear;
  for (const PatientRecord& truth : ds.truth) {
    const Eigen::Index steps = truth.steps();
    Eigen::MatrixXd x(steps, cfg.o_dim);
    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(steps, cfg.i_dim);
    Eigen::VectorXd z = p.m0;
    for (Eigen::Index r = 0; r < steps; ++r) {
      x.row(r) = Eigen::VectorXd(p.c * z).transpose();
      if (r + 1 >= steps) break;
      const Eigen::VectorXd dose = p.d * z;
      for (Eigen::Index c = 0; c < cfg.i_dim; ++c) {
        if (truth.u_mask(r + 1, c)) u(r + 1, c) = dose[c];
      }
      z = Eigen::VectorXd(p.a * z + p.b * u.row(r + 1).transpose());
    }
    CHECK(same_matrix(truth.x, x));
    CHECK(same_matrix(truth.u, u));
  }
}

TEST_CASE("the nonlinear family runs on small tanh networks") {
  data::SyntheticConfig cfg;
  cfg.family = data::SyntheticConfig::Family::kNonlinear;
  cfg.n_patients = 2;
  cfg.min_steps = 6;
  cfg.max_steps = 6;

  const data::SyntheticDataset ds = data::simulate(cfg, 5);
  CHECK(ds.nonlinear.transition.layers() == 2);
  CHECK(ds.nonlinear.emission.layers() == 2);
  CHECK(ds.nonlinear.m0.cwiseAbs().maxCoeff() > 0.0);
  for (const PatientRecord& truth : ds.truth) {
    CHECK(truth.fully_finite());
    CHECK(truth.x.cwiseAbs().maxCoeff() < 100.0);  // tanh keeps states tame
  }

  // Same seeds, different family: different trajectories.
  data::SyntheticConfig lin = cfg;
  lin.family = data::SyntheticConfig::Family::kLinear;
  const data::SyntheticDataset dl = data::simulate(lin, 5);
  CHECK_FALSE(same_matrix(ds.truth[0].x, dl.truth[0].x));

  SUBCASE("the wide preset is only a shape change") {
    data::SyntheticConfig wide = data::SyntheticConfig::mimic_like();
    CHECK(wide.o_dim == 96);
    CHECK(wide.i_dim == 14);
    wide.n_patients = 1;
    wide.min_steps = wide.max_steps = 4;
    const data::SyntheticDataset dw = data::simulate(wide, 1);
    CHECK(dw.truth[0].x.cols() == 96);
    CHECK(dw.truth[0].u.cols() == 14);
    const auto names = data::channel_names("obs", 96);
    CHECK(names.front() == "obs00");
    CHECK(names.back() == "obs95");
  }
}

TEST_CASE("the preparation pipeline is ordered and reproducible") {
  data::SyntheticConfig cfg;
  cfg.n_patients = 40;
  cfg.min_steps = 10;
  cfg.max_steps = 16;
  cfg.missing_rate = 0.3;

  const data::SyntheticDataset ds = data::simulate(cfg, 99);
  const auto obs = data::channel_names("obs", cfg.o_dim);
  const auto ints = data::channel_names("int", cfg.i_dim);
  const data::PreparedData prep =
      data::prepare_dataset(ds.events, cfg.grid_step_h, obs, ints);

  CHECK(prep.train.size() + prep.eval.size() + prep.test.size() ==
        ds.events.size());
  CHECK(!prep.train.empty());
  CHECK(prep.thresholds.size() == ints.size());
  for (const auto* side : {&prep.train, &prep.eval, &prep.test}) {
    for (const PatientRecord& r : *side) {
      CHECK(r.fully_finite());
      CHECK(r.obs_channels == obs);
    }
  }

  // Masks survive the whole chain untouched.
  const PatientRecord raw =
      data::discretize(ds.events[0], cfg.grid_step_h, obs, ints);
  const PatientRecord* prepared0 = nullptr;
  for (const auto* side : {&prep.train, &prep.eval, &prep.test}) {
    for (const PatientRecord& r : *side) {
      if (r.patient_id == raw.patient_id) prepared0 = &r;
    }
  }
  REQUIRE(prepared0 != nullptr);
  CHECK(same_mask(prepared0->x_mask, raw.x_mask));
  CHECK(same_mask(prepared0->u_mask, raw.u_mask));

  // Training observations are z-scored: observed cells average to zero at
  // unit spread, channel by channel.
  for (Eigen::Index j = 0; j < raw.obs_dim(); ++j) {
    double sum = 0.0, squares = 0.0;
    std::size_t count = 0;
    for (const PatientRecord& r : prep.train) {
      for (Eigen::Index t = 0; t < r.steps(); ++t) {
        if (!r.x_mask(t, j)) continue;
        sum += r.x(t, j);
        squares += r.x(t, j) * r.x(t, j);
        ++count;
      }
    }
    REQUIRE(count > 0);
    const double mean = sum / static_cast<double>(count);
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(squares / static_cast<double>(count) - mean * mean - 1.0) <
          1e-9);
  }

  // Held-out splits are scaled with the training statistics, not their own.
  REQUIRE(!prep.test.empty());
  const PatientRecord& held = prep.test.front();
  const data::SplitIds ids = data::split_by_hash(
      [&] {
        std::vector<std::string> all;
        for (const auto& s : ds.events) all.push_back(s.patient_id);
        return all;
      }());
  CHECK(std::find(ids.test.begin(), ids.test.end(), held.patient_id) !=
        ids.test.end());
  for (const EventStream& stream : ds.events) {
    if (stream.patient_id != held.patient_id) continue;
    PatientRecord manual = data::impute_interventions(
        data::discretize(stream, cfg.grid_step_h, obs, ints), prep.thresholds);
    manual = data::impute_observations(
        data::apply_normalization(manual, prep.stats));
    CHECK(same_matrix(manual.x, held.x));
    CHECK(same_matrix(manual.u, held.u));
  }

  SUBCASE("preparation reruns identically") {
    const data::PreparedData again =
        data::prepare_dataset(ds.events, cfg.grid_step_h, obs, ints);
    REQUIRE(again.train.size() == prep.train.size());
    for (std::size_t k = 0; k < prep.train.size(); ++k) {
      CHECK(same_matrix(again.train[k].x, prep.train[k].x));
      CHECK(same_matrix(again.train[k].u, prep.train[k].u));
    }
  }

  SUBCASE("other folds shuffle the split membership") {
    const data::PreparedData fold1 = data::prepare_dataset(
        ds.events, cfg.grid_step_h, obs, ints, {0.8, 0.1, 0.1}, 1);
    std::set<std::string> test0, test1;
    for (const auto& r : prep.test) test0.insert(r.patient_id);
    for (const auto& r : fold1.test) test1.insert(r.patient_id);
    CHECK(test0 != test1);
  }
}
