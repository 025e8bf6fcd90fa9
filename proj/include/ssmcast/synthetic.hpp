#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmcast/dssm.hpp"
#include "ssmcast/events.hpp"
#include "ssmcast/lgssm.hpp"
#include "ssmcast/record.hpp"

namespace ssmcast::data {

// EMR-like generator settings. Trajectories follow the state space model
// with an intervention feedback policy: dosing happens in episodes driven by
// a per-channel on/off chain, the setting tracks the intervention emission of
// the previous state, and observations thin out at the missing rate.
struct SyntheticConfig {
  enum class Family { kLinear, kNonlinear };

  int n_patients = 20;
  int min_steps = 24;  // per-patient step count range, inclusive
  int max_steps = 48;
  int z_dim = 3;
  int o_dim = 6;
  int i_dim = 2;
  Family family = Family::kLinear;
  std::uint64_t params_seed = 1;       // ground-truth system draw
  double missing_rate = 0.5;           // chance an observation never becomes an event
  double intervention_sparsity = 0.7;  // long-run fraction of steps with no dosing
  double state_noise = 0.1;            // standard deviations; 0 = deterministic
  double obs_noise = 0.1;
  double int_noise = 0.05;
  double grid_step_h = 1.0;

  // Wide shape preset mirroring a large-cohort channel count.
  static SyntheticConfig mimic_like();
  void validate() const;  // throws on rates outside [0,1], dims < 1, bad ranges
};

// "obs00", "obs01", ... zero-padded to at least two digits.
std::vector<std::string> channel_names(const std::string& prefix, int n);

// Events plus the dense sampled grids they were cut from. Truth records hold
// every sampled value (including thinned observations and zero settings in
// off stretches); their masks mark which cells actually became events.
// Exactly one of the parameter blocks is meaningful, per `family`.
struct SyntheticDataset {
  std::vector<EventStream> events;
  std::vector<PatientRecord> truth;
  SyntheticConfig::Family family = SyntheticConfig::Family::kLinear;
  lgssm::LgssmParams linear;
  dssm::DeepSsmParams nonlinear;
};

// Deterministic per (config, seed): the ground truth comes from
// config.params_seed and each patient draws from the substream
// seed XOR FNV-1a-64(patient_id), so patients are independent of dataset
// size and order. The nonlinear family uses single-hidden-layer tanh
// networks; the initial state mean is drawn nonzero so noise-free rollouts
// stay informative.
SyntheticDataset simulate(const SyntheticConfig& config, std::uint64_t seed);

}  // namespace ssmcast::data
