#pragma once

#include "etdmpc/model.hpp"

#include <concepts>
#include <vector>

namespace etdmpc {

// Anything the return estimator can roll out: a learned world model, an exact
// simulator wrapper, or a perturbed study ensemble. Columns are batch entries.
// `reward_batch` takes the dynamics-head index so study models can carry
// per-head reward error; the learned model ignores it.
template <class M>
concept LatentModel = requires(const M& m, const MatrixXd& z, const MatrixXd& a, int k, bool t) {
  { m.num_dynamics() } -> std::convertible_to<int>;
  { m.num_values() } -> std::convertible_to<int>;
  { m.latent_dim() } -> std::convertible_to<int>;
  { m.action_dim() } -> std::convertible_to<int>;
  { m.dynamics_batch(k, z, a) } -> std::convertible_to<MatrixXd>;
  { m.reward_batch(k, z, a) } -> std::convertible_to<VectorXd>;
  { m.value_batch(k, z, t) } -> std::convertible_to<VectorXd>;
};

template <class M>
concept PolicyLatentModel = LatentModel<M> && requires(const M& m, const MatrixXd& z) {
  { m.policy_batch(z) } -> std::convertible_to<PolicyParams>;
};

/// Q-hat entries for one start state: dynamics head i (0-based), value head j
/// (0-based), rollout depth h in 1..H (paper convention).
struct ReturnTable {
  int nf = 0, nv = 0, horizon = 0;
  double gamma = 0.0;
  std::vector<double> q;  // (i * nv + j) * horizon + (h - 1)

  static ReturnTable make(int nf, int nv, int horizon, double gamma) {
    ReturnTable t;
    t.nf = nf;
    t.nv = nv;
    t.horizon = horizon;
    t.gamma = gamma;
    t.q.assign(static_cast<size_t>(nf) * nv * horizon, 0.0);
    return t;
  }

  double& at(int i, int j, int h) { return q[index(i, j, h)]; }
  double at(int i, int j, int h) const { return q[index(i, j, h)]; }

  size_t index(int i, int j, int h) const {
    if (i < 0 || i >= nf || j < 0 || j >= nv || h < 1 || h > horizon)
      throw std::out_of_range("ReturnTable: index (i,j,h) out of range");
    return (static_cast<size_t>(i) * nv + j) * horizon + (h - 1);
  }
};

/// Same tensor over a batch of candidates; slice (i, j, h) is a vector over
/// candidates. When built terminal-only, slices below depth H are unset.
struct ReturnTableBatch {
  int nf = 0, nv = 0, horizon = 0, count = 0;
  double gamma = 0.0;
  bool full_depths = true;
  std::vector<VectorXd> q;

  VectorXd& slice(int i, int j, int h) { return q[index(i, j, h)]; }
  const VectorXd& slice(int i, int j, int h) const {
    const VectorXd& s = q[index(i, j, h)];
    if (s.size() != count)
      throw std::logic_error("ReturnTableBatch: depth " + std::to_string(h) + " was not computed");
    return s;
  }

  size_t index(int i, int j, int h) const {
    if (i < 0 || i >= nf || j < 0 || j >= nv || h < 1 || h > horizon)
      throw std::out_of_range("ReturnTableBatch: index (i,j,h) out of range");
    return (static_cast<size_t>(i) * nv + j) * horizon + (h - 1);
  }

  ReturnTable extract(int c) const {
    ReturnTable t = ReturnTable::make(nf, nv, horizon, gamma);
    for (int i = 0; i < nf; ++i)
      for (int j = 0; j < nv; ++j)
        for (int h = 1; h <= horizon; ++h)
          t.at(i, j, h) = full_depths || h == horizon ? slice(i, j, h)(c)
                                                      : std::numeric_limits<double>::quiet_NaN();
    return t;
  }
};

/// Rolls every dynamics head over the shared candidate actions and fills the
/// per-head tables. Reward predictions along a head's trajectory are computed
/// once and reused across value heads and depths. With `all_depths` false only
/// the terminal depth is bootstrapped (reanalyze-style objectives).
template <LatentModel M>
ReturnTableBatch rollout_return_tables(const M& model, const MatrixXd& z0,
                                       const std::vector<MatrixXd>& actions, double gamma,
                                       bool all_depths = true) {
  const int H = static_cast<int>(actions.size());
  if (H < 1) throw std::invalid_argument("rollout_return_tables: need horizon >= 1");
  ReturnTableBatch tb;
  tb.nf = model.num_dynamics();
  tb.nv = model.num_values();
  tb.horizon = H;
  tb.count = static_cast<int>(z0.cols());
  tb.gamma = gamma;
  tb.full_depths = all_depths;
  tb.q.assign(static_cast<size_t>(tb.nf) * tb.nv * H, VectorXd());
  for (int i = 0; i < tb.nf; ++i) {
    MatrixXd z = z0;
    VectorXd running = VectorXd::Zero(tb.count);
    double disc = 1.0;
    for (int u = 0; u < H; ++u) {
      VectorXd r = model.reward_batch(i, z, actions[u]);
      if (!all_finite(r))
        throw NumericsError("rollout_return_tables: non-finite reward at head " +
                            std::to_string(i) + " depth " + std::to_string(u + 1));
      running += disc * r;
      z = model.dynamics_batch(i, z, actions[u]);
      if (!all_finite(z))
        throw NumericsError("rollout_return_tables: non-finite latent at head " +
                            std::to_string(i) + " depth " + std::to_string(u + 1));
      disc *= gamma;
      const int h = u + 1;
      if (all_depths || h == H) {
        for (int j = 0; j < tb.nv; ++j) {
          VectorXd v = model.value_batch(j, z, false);
          if (!all_finite(v))
            throw NumericsError("rollout_return_tables: non-finite value at head " +
                                std::to_string(i) + " depth " + std::to_string(h));
          tb.slice(i, j, h) = running + disc * v;
        }
      }
    }
  }
  return tb;
}

template <LatentModel M>
ReturnTable rollout_returns(const M& model, const VectorXd& z0,
                            const std::vector<VectorXd>& actions, double gamma) {
  std::vector<MatrixXd> acts;
  acts.reserve(actions.size());
  for (const auto& a : actions) acts.push_back(a);
  return rollout_return_tables(model, MatrixXd(z0), acts, gamma, true).extract(0);
}

// ---- reductions (Eqs. 2-4 and the pessimistic objective) ----
// Plain accumulation loops, i outer and j inner, so results are reproducible
// bit-for-bit against a straightforward reference implementation.

inline double ensemble_mean(const ReturnTable& t, int h) {
  double s = 0.0;
  for (int i = 0; i < t.nf; ++i)
    for (int j = 0; j < t.nv; ++j) s += t.at(i, j, h);
  return s / (static_cast<double>(t.nf) * t.nv);
}

/// Variance of the ensemble mean; 0 by convention for a single (i, j) pair.
inline double variance_of_mean(const ReturnTable& t, int h) {
  const double n = static_cast<double>(t.nf) * t.nv;
  if (n <= 1.0) return 0.0;
  const double mean = ensemble_mean(t, h);
  double s = 0.0;
  for (int i = 0; i < t.nf; ++i)
    for (int j = 0; j < t.nv; ++j) {
      const double d = t.at(i, j, h) - mean;
      s += d * d;
    }
  return s / (n * (n - 1.0));
}

inline double aggregate_horizon(const ReturnTable& t) {
  double s = 0.0;
  for (int h = 1; h <= t.horizon; ++h) s += ensemble_mean(t, h);
  return s / t.horizon;
}

inline double pessimistic_objective(const ReturnTable& t, double beta, int h) {
  if (beta < 0.0) throw std::invalid_argument("pessimistic_objective: beta must be >= 0");
  const double mean = ensemble_mean(t, h);
  if (beta == 0.0) return mean;  // guarantees bit-identity with ensemble_mean
  return mean - beta * std::sqrt(variance_of_mean(t, h));
}

inline VectorXd ensemble_mean_batch(const ReturnTableBatch& t, int h) {
  VectorXd s = VectorXd::Zero(t.count);
  for (int i = 0; i < t.nf; ++i)
    for (int j = 0; j < t.nv; ++j) s += t.slice(i, j, h);
  return s / (static_cast<double>(t.nf) * t.nv);
}

inline VectorXd variance_of_mean_batch(const ReturnTableBatch& t, int h) {
  const double n = static_cast<double>(t.nf) * t.nv;
  if (n <= 1.0) return VectorXd::Zero(t.count);
  const VectorXd mean = ensemble_mean_batch(t, h);
  VectorXd s = VectorXd::Zero(t.count);
  for (int i = 0; i < t.nf; ++i)
    for (int j = 0; j < t.nv; ++j) s += (t.slice(i, j, h) - mean).array().square().matrix();
  return s / (n * (n - 1.0));
}

inline VectorXd aggregate_horizon_batch(const ReturnTableBatch& t) {
  VectorXd s = VectorXd::Zero(t.count);
  for (int h = 1; h <= t.horizon; ++h) s += ensemble_mean_batch(t, h);
  return s / t.horizon;
}

inline VectorXd pessimistic_objective_batch(const ReturnTableBatch& t, double beta, int h) {
  if (beta < 0.0) throw std::invalid_argument("pessimistic_objective: beta must be >= 0");
  VectorXd mean = ensemble_mean_batch(t, h);
  if (beta == 0.0) return mean;
  return mean - beta * variance_of_mean_batch(t, h).array().sqrt().matrix();
}

// ---- planner objective modes ----

struct ObjectiveMode {
  enum class Kind { SingleHead, EnsembleMean, AggregateHorizon, Pessimistic };
  Kind kind = Kind::EnsembleMean;
  int head_i = 0, head_j = 0;  // SingleHead only
  double beta = 0.0;           // Pessimistic only

  static ObjectiveMode single_head(int i, int j) {
    ObjectiveMode m;
    m.kind = Kind::SingleHead;
    m.head_i = i;
    m.head_j = j;
    return m;
  }
  static ObjectiveMode ensemble_mean() { return ObjectiveMode{}; }
  static ObjectiveMode aggregate_horizon() {
    ObjectiveMode m;
    m.kind = Kind::AggregateHorizon;
    return m;
  }
  static ObjectiveMode pessimistic(double beta) {
    if (beta < 0.0) throw std::invalid_argument("ObjectiveMode: beta must be >= 0");
    ObjectiveMode m;
    m.kind = Kind::Pessimistic;
    m.beta = beta;
    return m;
  }

  bool needs_all_depths() const { return kind == Kind::AggregateHorizon; }

  const char* name() const {
    switch (kind) {
      case Kind::SingleHead: return "single_head";
      case Kind::EnsembleMean: return "ensemble_mean";
      case Kind::AggregateHorizon: return "aggregate_horizon";
      case Kind::Pessimistic: return "pessimistic";
    }
    return "?";
  }
};

/// Scores candidates under an objective mode; non-aggregate modes score at the
/// terminal depth H.
inline VectorXd score_candidates(const ReturnTableBatch& t, const ObjectiveMode& mode) {
  switch (mode.kind) {
    case ObjectiveMode::Kind::SingleHead: return t.slice(mode.head_i, mode.head_j, t.horizon);
    case ObjectiveMode::Kind::EnsembleMean: return ensemble_mean_batch(t, t.horizon);
    case ObjectiveMode::Kind::AggregateHorizon: return aggregate_horizon_batch(t);
    case ObjectiveMode::Kind::Pessimistic:
      return pessimistic_objective_batch(t, mode.beta, t.horizon);
  }
  throw std::logic_error("score_candidates: bad mode");
}

inline double score_table(const ReturnTable& t, const ObjectiveMode& mode) {
  switch (mode.kind) {
    case ObjectiveMode::Kind::SingleHead: return t.at(mode.head_i, mode.head_j, t.horizon);
    case ObjectiveMode::Kind::EnsembleMean: return ensemble_mean(t, t.horizon);
    case ObjectiveMode::Kind::AggregateHorizon: return aggregate_horizon(t);
    case ObjectiveMode::Kind::Pessimistic: return pessimistic_objective(t, mode.beta, t.horizon);
  }
  throw std::logic_error("score_table: bad mode");
}

// ---- 1-step value target ----

/// y = mean over (i, j) of [R(z, a) + gamma * V_target_j(f_i(z, a))] with
/// a ~ pi(.|z). Uses the EMA value heads; `all_heads` false restricts to the
/// first dynamics head (the pre-ensemble formula).
template <PolicyLatentModel M>
VectorXd value_target_batch(const M& model, const MatrixXd& z, double gamma, Rng& rng,
                            bool all_heads = true) {
  PolicyParams p = model.policy_batch(z);
  const int da = static_cast<int>(p.mean.rows());
  const int batch = static_cast<int>(z.cols());
  MatrixXd eps = rng.normal_matrix(da, batch);
  MatrixXd a = (p.mean.array() + p.log_std.array().exp() * eps.array()).tanh().matrix();
  VectorXd r = model.reward_batch(0, z, a);
  const int heads = all_heads ? model.num_dynamics() : 1;
  VectorXd acc = VectorXd::Zero(batch);
  for (int i = 0; i < heads; ++i) {
    MatrixXd z1 = model.dynamics_batch(i, z, a);
    for (int j = 0; j < model.num_values(); ++j) acc += model.value_batch(j, z1, true);
  }
  acc /= static_cast<double>(heads) * model.num_values();
  return r + gamma * acc;
}

template <PolicyLatentModel M>
double value_target(const M& model, const VectorXd& z, double gamma, Rng& rng,
                    bool all_heads = true) {
  return value_target_batch(model, MatrixXd(z), gamma, rng, all_heads)(0);
}

// ---- serialization ----

inline nlohmann::json return_table_to_json(const ReturnTable& t) {
  nlohmann::json ji = nlohmann::json::array();
  for (int i = 0; i < t.nf; ++i) {
    nlohmann::json jj = nlohmann::json::array();
    for (int j = 0; j < t.nv; ++j) {
      nlohmann::json jh = nlohmann::json::array();
      for (int h = 1; h <= t.horizon; ++h) jh.push_back(t.at(i, j, h));
      jj.push_back(std::move(jh));
    }
    ji.push_back(std::move(jj));
  }
  return nlohmann::json{{"gamma", t.gamma}, {"q", std::move(ji)}};
}

inline ReturnTable return_table_from_json(const nlohmann::json& j) {
  const auto& q = j.at("q");
  const int nf = static_cast<int>(q.size());
  const int nv = static_cast<int>(q.at(0).size());
  const int H = static_cast<int>(q.at(0).at(0).size());
  ReturnTable t = ReturnTable::make(nf, nv, H, j.at("gamma").get<double>());
  for (int i = 0; i < nf; ++i)
    for (int jj = 0; jj < nv; ++jj)
      for (int h = 1; h <= H; ++h) t.at(i, jj, h) = q.at(i).at(jj).at(h - 1).get<double>();
  return t;
}

}  // namespace etdmpc
