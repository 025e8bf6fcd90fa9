#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "ssmcast/autodiff.hpp"
#include "ssmcast/rng.hpp"
#include "ssmcast/tape.hpp"

namespace ssmcast::dssm {

// Fully connected stack. `w[k]`/`b[k]` is the k-th affine map; tanh between
// maps, linear output. A single-layer Mlp is a plain affine map.
struct Mlp {
  std::vector<Eigen::MatrixXd> w;
  std::vector<Eigen::VectorXd> b;

  std::size_t layers() const { return w.size(); }
  Eigen::Index in_dim() const { return w.front().cols(); }
  Eigen::Index out_dim() const { return w.back().rows(); }
  void validate() const;  // throws on empty, shape breaks, non-finite weights
};

// Hidden layers of `hidden` units; `layers` counts affine maps (>= 1).
// Weights ~ N(0, 1/fan_in), biases zero.
Mlp make_mlp(Eigen::Index in, Eigen::Index out, Eigen::Index hidden,
             std::size_t layers, Rng& rng);
// Single affine layer y = w x (zero bias).
Mlp linear_mlp(const Eigen::MatrixXd& w);

Eigen::VectorXd mlp_forward(const Mlp& mlp, const Eigen::VectorXd& x);

// One LSTM cell; gate pre-activations stack as rows [input; forget; cell;
// output], each block `hidden` rows.
struct LstmCell {
  Eigen::MatrixXd wx;    // 4h x in
  Eigen::MatrixXd wh;    // 4h x h
  Eigen::VectorXd bias;  // 4h

  Eigen::Index in_dim() const { return wx.cols(); }
  Eigen::Index hidden_dim() const { return wh.cols(); }
  void validate() const;
};

// Weights ~ N(0, 1/fan_in); forget-gate bias starts at 1, the rest at 0.
LstmCell make_lstm(Eigen::Index in, Eigen::Index hidden, Rng& rng);

struct LstmState {
  Eigen::VectorXd h;
  Eigen::VectorXd c;

  static LstmState zero(Eigen::Index hidden) {
    return {Eigen::VectorXd::Zero(hidden), Eigen::VectorXd::Zero(hidden)};
  }
};

LstmState lstm_step(const LstmCell& cell, const Eigen::VectorXd& x,
                    const LstmState& prev);

// ParameterSet layout: "<prefix>.w0", "<prefix>.b0", ... for an Mlp and
// "<prefix>.wx" / "<prefix>.wh" / "<prefix>.bias" for a cell.
void mlp_to_params(diffmath::ParameterSet& ps, const std::string& prefix,
                   const Mlp& mlp);
Mlp mlp_from_params(const diffmath::ParameterSet& ps, const std::string& prefix);
void lstm_to_params(diffmath::ParameterSet& ps, const std::string& prefix,
                    const LstmCell& cell);
LstmCell lstm_from_params(const diffmath::ParameterSet& ps,
                          const std::string& prefix);

// Taped mirrors, operating on the value ids of registered parameters.
struct MlpIds {
  std::vector<diffmath::ValueId> w;
  std::vector<diffmath::ValueId> b;
};
struct LstmIds {
  diffmath::ValueId wx = -1;
  diffmath::ValueId wh = -1;
  diffmath::ValueId bias = -1;
};
struct LstmStateIds {
  diffmath::ValueId h = -1;
  diffmath::ValueId c = -1;
};

MlpIds bind_mlp(const std::map<std::string, diffmath::ValueId>& ids,
                const std::string& prefix);
LstmIds bind_lstm(const std::map<std::string, diffmath::ValueId>& ids,
                  const std::string& prefix);

diffmath::ValueId mlp_forward(diffmath::Tape& t, const MlpIds& mlp,
                              diffmath::ValueId x);
LstmStateIds lstm_step(diffmath::Tape& t, const LstmIds& cell,
                       diffmath::ValueId x, const LstmStateIds& prev);

}  // namespace ssmcast::dssm
