#pragma once

#include "etdmpc/returns.hpp"

#include <algorithm>
#include <numeric>
#include <optional>

namespace etdmpc {

/// Per-step diagonal Gaussian over an action sequence; column t is step t.
struct PlanDistribution {
  MatrixXd mu;     // action_dim x horizon
  MatrixXd sigma;  // action_dim x horizon

  int horizon() const { return static_cast<int>(mu.cols()); }

  std::vector<MatrixXd> mean_sequence() const {
    std::vector<MatrixXd> seq;
    for (int t = 0; t < horizon(); ++t) seq.push_back(mu.col(t));
    return seq;
  }
};

struct PlannerConfig {
  int horizon = 6;
  int iterations = 6;  // +2 applied automatically when action_dim > 20
  int num_samples = 512;
  int num_elites = 64;
  int num_policy_trajectories = 24;
  double temperature = 0.5;
  double sigma_min = 0.05;
  double sigma_max = 2.0;
  double gamma = 0.99;
  ObjectiveMode objective = ObjectiveMode::aggregate_horizon();
  int policy_rollout_head = 0;  // dynamics head used for policy-prior rollouts

  void validate() const {
    if (horizon < 1 || iterations < 1 || num_samples < 1 || num_elites < 1 ||
        num_policy_trajectories < 1)
      throw std::invalid_argument("PlannerConfig: all counts must be >= 1");
    if (num_elites > num_samples + num_policy_trajectories)
      throw std::invalid_argument("PlannerConfig: elites exceed candidate count");
    if (!(temperature > 0.0)) throw std::invalid_argument("PlannerConfig: temperature");
    if (!(0.0 < sigma_min && sigma_min <= sigma_max))
      throw std::invalid_argument("PlannerConfig: sigma bounds");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("PlannerConfig: gamma");
  }

  int effective_iterations(int action_dim) const { return iterations + (action_dim > 20 ? 2 : 0); }
};

struct PlanTrace {
  struct Iteration {
    VectorXd elite_scores;  // sorted, best first
    MatrixXd mu, sigma;
  };
  std::vector<Iteration> iterations;

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& it : iterations) {
      nlohmann::json scores = nlohmann::json::array();
      for (int e = 0; e < it.elite_scores.size(); ++e) scores.push_back(it.elite_scores(e));
      out.push_back(nlohmann::json{{"elite_scores", std::move(scores)},
                                   {"mu", matrix_to_json(it.mu)},
                                   {"sigma", matrix_to_json(it.sigma)}});
    }
    return out;
  }
};

namespace detail {

/// Indices of the `k` best scores, best first; ties broken by lower index.
inline std::vector<int> top_k(const VectorXd& scores, int k) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return a < b;
  });
  idx.resize(k);
  return idx;
}

template <LatentModel M>
VectorXd score_sequences(const M& model, const VectorXd& z0, const std::vector<MatrixXd>& actions,
                         const PlannerConfig& cfg) {
  MatrixXd z0cols(z0.size(), actions[0].cols());
  z0cols.colwise() = z0;
  ReturnTableBatch tb =
      rollout_return_tables(model, z0cols, actions, cfg.gamma, cfg.objective.needs_all_depths());
  return score_candidates(tb, cfg.objective);
}

}  // namespace detail

/// MPPI: per iteration, sample candidate action sequences (Gaussian samples
/// plus policy-prior rollouts through one dynamics head), score them under the
/// configured objective, and refit (mu, sigma) to the temperature-weighted
/// elites. Returns the distribution whose mean scored at least as well as the
/// initial mean; falls back to the initial distribution otherwise.
template <PolicyLatentModel M>
PlanDistribution plan(const M& model, const VectorXd& z0, const PlannerConfig& cfg,
                      const PlanDistribution* warm_start, Rng& rng, PlanTrace* trace = nullptr) {
  cfg.validate();
  const int D = model.action_dim();
  const int H = cfg.horizon;
  const int S = cfg.num_samples;
  const int P = cfg.num_policy_trajectories;
  const int C = S + P;

  PlanDistribution dist;
  if (warm_start) {
    if (warm_start->mu.rows() != D || warm_start->mu.cols() != H)
      throw std::invalid_argument("plan: warm start shape mismatch");
    dist = *warm_start;
  } else {
    dist.mu = MatrixXd::Zero(D, H);
    dist.sigma = MatrixXd::Constant(D, H, cfg.sigma_max);
  }
  const PlanDistribution initial = dist;

  std::vector<MatrixXd> actions(H);
  const int iters = cfg.effective_iterations(D);
  for (int it = 0; it < iters; ++it) {
    // Gaussian candidates around the current distribution.
    for (int t = 0; t < H; ++t) {
      MatrixXd eps = rng.normal_matrix(D, S);
      actions[t].resize(D, C);
      actions[t].leftCols(S) =
          clamp(MatrixXd((eps.array().colwise() * dist.sigma.col(t).array()).matrix().colwise() +
                         dist.mu.col(t)),
                -1.0, 1.0);
    }
    // Policy-prior trajectories rolled through one dynamics head.
    MatrixXd z(z0.size(), P);
    z.colwise() = z0;
    for (int t = 0; t < H; ++t) {
      PolicyParams pp = model.policy_batch(z);
      MatrixXd eps = rng.normal_matrix(D, P);
      MatrixXd a = (pp.mean.array() + pp.log_std.array().exp() * eps.array()).tanh().matrix();
      actions[t].rightCols(P) = a;
      if (t + 1 < H) z = model.dynamics_batch(cfg.policy_rollout_head, z, a);
    }

    VectorXd scores = detail::score_sequences(model, z0, actions, cfg);
    int finite = 0;
    for (int c = 0; c < C; ++c) {
      if (std::isfinite(scores(c)))
        ++finite;
      else
        scores(c) = -std::numeric_limits<double>::infinity();
    }
    if (finite == 0)
      throw NumericsError(std::string("plan: all candidate scores non-finite under objective ") +
                          cfg.objective.name());

    std::vector<int> elites = detail::top_k(scores, std::min(cfg.num_elites, finite));
    const double best = scores(elites.front());
    VectorXd w(elites.size());
    for (size_t e = 0; e < elites.size(); ++e)
      w(e) = std::exp((scores(elites[e]) - best) / cfg.temperature);
    w /= w.sum();

    MatrixXd mu_new(D, H), sigma_new(D, H);
    for (int t = 0; t < H; ++t) {
      VectorXd m = VectorXd::Zero(D);
      for (size_t e = 0; e < elites.size(); ++e) m += w(e) * actions[t].col(elites[e]);
      VectorXd var = VectorXd::Zero(D);
      for (size_t e = 0; e < elites.size(); ++e)
        var += w(e) * (actions[t].col(elites[e]) - m).array().square().matrix();
      mu_new.col(t) = clamp(m, -1.0, 1.0);
      sigma_new.col(t) = clamp(VectorXd(var.array().sqrt().matrix()), cfg.sigma_min, cfg.sigma_max);
    }
    dist.mu = mu_new;
    dist.sigma = sigma_new;

    if (trace) {
      VectorXd es(elites.size());
      for (size_t e = 0; e < elites.size(); ++e) es(e) = scores(elites[e]);
      trace->iterations.push_back({es, dist.mu, dist.sigma});
    }
  }

  // Monotone-improvement guard on the returned mean, evaluated once.
  std::vector<MatrixXd> pair(H);
  for (int t = 0; t < H; ++t) {
    pair[t].resize(D, 2);
    pair[t].col(0) = initial.mu.col(t);
    pair[t].col(1) = dist.mu.col(t);
  }
  VectorXd final_scores = detail::score_sequences(model, z0, pair, cfg);
  if (!(final_scores(1) >= final_scores(0))) return initial;
  return dist;
}

/// Gaussian over the first planned action; samples are clamped to [-1, 1].
struct ExpertPolicy {
  VectorXd mu;
  VectorXd sigma;

  Action sample(Rng& rng) const {
    return Action(mu + (sigma.array() * rng.normal_vector(static_cast<int>(mu.size())).array())
                           .matrix());
  }
  Action mean() const { return Action(mu); }
};

inline ExpertPolicy expert_policy(const PlanDistribution& plan) {
  return {plan.mu.col(0), plan.sigma.col(0)};
}

/// Receding-horizon shift: drop step 0, append a zero-mean max-std final step.
inline PlanDistribution shift_warm_start(const PlanDistribution& prev, double sigma_max) {
  const int D = static_cast<int>(prev.mu.rows());
  const int H = prev.horizon();
  PlanDistribution next;
  next.mu.resize(D, H);
  next.sigma.resize(D, H);
  if (H > 1) {
    next.mu.leftCols(H - 1) = prev.mu.rightCols(H - 1);
    next.sigma.leftCols(H - 1) = prev.sigma.rightCols(H - 1);
  }
  next.mu.col(H - 1).setZero();
  next.sigma.col(H - 1).setConstant(sigma_max);
  return next;
}

}  // namespace etdmpc
