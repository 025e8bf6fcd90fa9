#include "ssmcast/nets.hpp"

#include <cmath>
#include <stdexcept>

#include "ssmcast/eigen_bridge.hpp"

namespace ssmcast::dssm {

namespace diff = ssmcast::diffmath;

void Mlp::validate() const {
  if (w.empty() || w.size() != b.size()) {
    throw std::invalid_argument("Mlp: need matching weight and bias stacks");
  }
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (w[k].rows() != b[k].size()) {
      throw std::invalid_argument("Mlp: bias length mismatch at layer " +
                                  std::to_string(k));
    }
    if (k > 0 && w[k].cols() != w[k - 1].rows()) {
      throw std::invalid_argument("Mlp: shape break between layers " +
                                  std::to_string(k - 1) + " and " +
                                  std::to_string(k));
    }
    if (!w[k].allFinite() || !b[k].allFinite()) {
      throw std::invalid_argument("Mlp: non-finite weights at layer " +
                                  std::to_string(k));
    }
  }
}

Mlp make_mlp(Eigen::Index in, Eigen::Index out, Eigen::Index hidden,
             std::size_t layers, Rng& rng) {
  if (in < 1 || out < 1 || layers < 1 || (layers > 1 && hidden < 1)) {
    throw std::invalid_argument("make_mlp: bad shape request");
  }
  Mlp mlp;
  for (std::size_t k = 0; k < layers; ++k) {
    const Eigen::Index rows = k + 1 == layers ? out : hidden;
    const Eigen::Index cols = k == 0 ? in : hidden;
    Eigen::MatrixXd w(rows, cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) w(r, c) = scale * rng.normal();
    }
    mlp.w.push_back(std::move(w));
    mlp.b.push_back(Eigen::VectorXd::Zero(rows));
  }
  return mlp;
}

Mlp linear_mlp(const Eigen::MatrixXd& w) {
  Mlp mlp;
  mlp.w.push_back(w);
  mlp.b.push_back(Eigen::VectorXd::Zero(w.rows()));
  mlp.validate();
  return mlp;
}

Eigen::VectorXd mlp_forward(const Mlp& mlp, const Eigen::VectorXd& x) {
  if (x.size() != mlp.in_dim()) {
    throw std::invalid_argument("mlp_forward: input size mismatch");
  }
  Eigen::VectorXd h = x;
  for (std::size_t k = 0; k < mlp.w.size(); ++k) {
    h = mlp.w[k] * h + mlp.b[k];
    if (k + 1 < mlp.w.size()) h = h.array().tanh().matrix();
  }
  return h;
}

void LstmCell::validate() const {
  const Eigen::Index h = hidden_dim();
  if (h < 1 || wx.rows() != 4 * h || wh.rows() != 4 * h || bias.size() != 4 * h) {
    throw std::invalid_argument("LstmCell: gate stack must be 4x hidden");
  }
  if (!wx.allFinite() || !wh.allFinite() || !bias.allFinite()) {
    throw std::invalid_argument("LstmCell: non-finite weights");
  }
}

LstmCell make_lstm(Eigen::Index in, Eigen::Index hidden, Rng& rng) {
  if (in < 1 || hidden < 1) {
    throw std::invalid_argument("make_lstm: bad shape request");
  }
  const auto fill = [&rng](Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
    }
    return m;
  };
  LstmCell cell;
  cell.wx = fill(4 * hidden, in);
  cell.wh = fill(4 * hidden, hidden);
  cell.bias = Eigen::VectorXd::Zero(4 * hidden);
  cell.bias.segment(hidden, hidden).setOnes();  // open the forget gate
  return cell;
}

LstmState lstm_step(const LstmCell& cell, const Eigen::VectorXd& x,
                    const LstmState& prev) {
  const Eigen::Index h = cell.hidden_dim();
  if (x.size() != cell.in_dim() || prev.h.size() != h || prev.c.size() != h) {
    throw std::invalid_argument("lstm_step: size mismatch");
  }
  const Eigen::VectorXd pre = cell.wx * x + cell.wh * prev.h + cell.bias;
  const auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  LstmState next{Eigen::VectorXd(h), Eigen::VectorXd(h)};
  for (Eigen::Index j = 0; j < h; ++j) {
    const double gi = sigmoid(pre[j]);
    const double gf = sigmoid(pre[h + j]);
    const double gc = std::tanh(pre[2 * h + j]);
    const double go = sigmoid(pre[3 * h + j]);
    next.c[j] = gf * prev.c[j] + gi * gc;
    next.h[j] = go * std::tanh(next.c[j]);
  }
  return next;
}

void mlp_to_params(diff::ParameterSet& ps, const std::string& prefix,
                   const Mlp& mlp) {
  mlp.validate();
  for (std::size_t k = 0; k < mlp.w.size(); ++k) {
    ps.set(prefix + ".w" + std::to_string(k), diff::to_tensor(mlp.w[k]));
    ps.set(prefix + ".b" + std::to_string(k), diff::to_tensor(mlp.b[k]));
  }
}

Mlp mlp_from_params(const diff::ParameterSet& ps, const std::string& prefix) {
  Mlp mlp;
  for (std::size_t k = 0; ps.contains(prefix + ".w" + std::to_string(k)); ++k) {
    mlp.w.push_back(diff::to_matrix(ps.at(prefix + ".w" + std::to_string(k))));
    mlp.b.push_back(diff::to_vector(ps.at(prefix + ".b" + std::to_string(k))));
  }
  mlp.validate();
  return mlp;
}

void lstm_to_params(diff::ParameterSet& ps, const std::string& prefix,
                    const LstmCell& cell) {
  cell.validate();
  ps.set(prefix + ".wx", diff::to_tensor(cell.wx));
  ps.set(prefix + ".wh", diff::to_tensor(cell.wh));
  ps.set(prefix + ".bias", diff::to_tensor(cell.bias));
}

LstmCell lstm_from_params(const diff::ParameterSet& ps,
                          const std::string& prefix) {
  LstmCell cell;
  cell.wx = diff::to_matrix(ps.at(prefix + ".wx"));
  cell.wh = diff::to_matrix(ps.at(prefix + ".wh"));
  cell.bias = diff::to_vector(ps.at(prefix + ".bias"));
  cell.validate();
  return cell;
}

namespace {

diff::ValueId lookup(const std::map<std::string, diff::ValueId>& ids,
                     const std::string& name) {
  const auto it = ids.find(name);
  if (it == ids.end()) {
    throw std::out_of_range("no registered parameter '" + name + "'");
  }
  return it->second;
}

}  // namespace

MlpIds bind_mlp(const std::map<std::string, diff::ValueId>& ids,
                const std::string& prefix) {
  MlpIds mlp;
  for (std::size_t k = 0;; ++k) {
    const std::string wk = prefix + ".w" + std::to_string(k);
    if (ids.find(wk) == ids.end()) break;
    mlp.w.push_back(ids.at(wk));
    mlp.b.push_back(lookup(ids, prefix + ".b" + std::to_string(k)));
  }
  if (mlp.w.empty()) {
    throw std::out_of_range("no registered parameters under '" + prefix + "'");
  }
  return mlp;
}

LstmIds bind_lstm(const std::map<std::string, diff::ValueId>& ids,
                  const std::string& prefix) {
  return {lookup(ids, prefix + ".wx"), lookup(ids, prefix + ".wh"),
          lookup(ids, prefix + ".bias")};
}

diff::ValueId mlp_forward(diff::Tape& t, const MlpIds& mlp, diff::ValueId x) {
  diff::ValueId h = x;
  for (std::size_t k = 0; k < mlp.w.size(); ++k) {
    h = t.affine(mlp.w[k], h, mlp.b[k]);
    if (k + 1 < mlp.w.size()) h = t.tanh(h);
  }
  return h;
}

LstmStateIds lstm_step(diff::Tape& t, const LstmIds& cell, diff::ValueId x,
                       const LstmStateIds& prev) {
  const std::int32_t h = t.result_cols(cell.wh);
  const diff::ValueId pre = t.add(
      t.add(t.matmul(cell.wx, x), t.matmul(cell.wh, prev.h)), cell.bias);
  const diff::ValueId gi = t.sigmoid(t.slice(pre, 0, h));
  const diff::ValueId gf = t.sigmoid(t.slice(pre, h, h));
  const diff::ValueId gc = t.tanh(t.slice(pre, 2 * h, h));
  const diff::ValueId go = t.sigmoid(t.slice(pre, 3 * h, h));
  const diff::ValueId c = t.add(t.mul(gf, prev.c), t.mul(gi, gc));
  return {t.mul(go, t.tanh(c)), c};
}

}  // namespace ssmcast::dssm
