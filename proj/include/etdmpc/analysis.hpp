#pragma once

#include "etdmpc/envs.hpp"
#include "etdmpc/planner.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

namespace etdmpc {

// ---- evaluation-curve statistics ----

struct CurvePoint {
  double step = 0.0;
  double value = 0.0;
};

/// Per-seed evaluation series for one task; seeds may use different step grids.
struct TaskCurve {
  std::string task_id;
  std::vector<std::vector<CurvePoint>> seeds;

  int num_seeds() const { return static_cast<int>(seeds.size()); }
};

/// Mean curve with standard errors on a shared step grid. `se` entries are
/// NaN when only one seed is available.
struct CurveStats {
  std::vector<double> steps;
  std::vector<double> mean;
  std::vector<double> se;
  int num_seeds = 0;

  double ci_low(int t) const { return mean.at(t) - 1.96 * se.at(t); }
  double ci_high(int t) const { return mean.at(t) + 1.96 * se.at(t); }
};

namespace detail {

inline double interp_linear(const std::vector<CurvePoint>& series, double x) {
  if (series.empty()) throw std::invalid_argument("interp: empty series");
  if (x < series.front().step || x > series.back().step)
    throw std::invalid_argument("interp: point outside series range");
  for (size_t k = 1; k < series.size(); ++k) {
    if (x <= series[k].step) {
      const double x0 = series[k - 1].step, x1 = series[k].step;
      const double y0 = series[k - 1].value, y1 = series[k].value;
      if (x1 == x0) return y1;
      const double w = (x - x0) / (x1 - x0);
      return y0 * (1.0 - w) + y1 * w;
    }
  }
  return series.back().value;
}

inline void check_sorted(const std::vector<CurvePoint>& series) {
  for (size_t k = 1; k < series.size(); ++k)
    if (series[k].step < series[k - 1].step)
      throw std::invalid_argument("curve series must be sorted by step");
}

}  // namespace detail

/// Union of all seed grids restricted to the range every seed covers.
inline std::vector<double> shared_grid(const TaskCurve& curve) {
  if (curve.seeds.empty()) throw std::invalid_argument("shared_grid: no seeds");
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  std::set<double> pts;
  for (const auto& s : curve.seeds) {
    if (s.empty()) throw std::invalid_argument("shared_grid: empty seed series");
    detail::check_sorted(s);
    lo = std::max(lo, s.front().step);
    hi = std::min(hi, s.back().step);
    for (const auto& p : s) pts.insert(p.step);
  }
  if (lo > hi) throw std::invalid_argument("shared_grid: seed ranges do not overlap");
  std::vector<double> grid;
  for (double x : pts)
    if (x >= lo && x <= hi) grid.push_back(x);
  return grid;
}

/// Seed mean, sample standard deviation (N-1 denominator), and standard error
/// se = sd/sqrt(N) at every shared grid point. One seed: mean only, se = NaN.
inline CurveStats task_mean_and_se(const TaskCurve& curve) {
  CurveStats out;
  out.steps = shared_grid(curve);
  out.num_seeds = curve.num_seeds();
  const int n = out.num_seeds;
  for (double x : out.steps) {
    double m = 0.0;
    std::vector<double> vals(n);
    for (int j = 0; j < n; ++j) {
      vals[j] = detail::interp_linear(curve.seeds[j], x);
      m += vals[j];
    }
    m /= n;
    out.mean.push_back(m);
    if (n >= 2) {
      double ss = 0.0;
      for (int j = 0; j < n; ++j) ss += (vals[j] - m) * (vals[j] - m);
      out.se.push_back(std::sqrt(ss / (n - 1)) / std::sqrt(static_cast<double>(n)));
    } else {
      out.se.push_back(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return out;
}

/// Divide mean and se by the fixed per-task constant c.
inline CurveStats normalize_curve(CurveStats stats, double c) {
  if (!(c > 0.0)) throw std::invalid_argument("normalize_curve: constant must be positive");
  for (auto& v : stats.mean) v /= c;
  for (auto& v : stats.se) v /= c;
  return stats;
}

/// Cross-task aggregate on the common grid: mean of task means, and
/// se_t = (1/T) * sqrt(sum_i se_{i,t}^2) treating tasks as independent.
inline CurveStats aggregate_curves(const std::vector<CurveStats>& tasks) {
  if (tasks.empty()) throw std::invalid_argument("aggregate_curves: no tasks");
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  std::set<double> pts;
  for (const auto& t : tasks) {
    if (t.steps.size() < 1) throw std::invalid_argument("aggregate_curves: empty task");
    lo = std::max(lo, t.steps.front());
    hi = std::min(hi, t.steps.back());
    for (double x : t.steps) pts.insert(x);
  }
  if (lo > hi) throw std::invalid_argument("aggregate_curves: task ranges do not overlap");

  auto as_series = [](const std::vector<double>& xs, const std::vector<double>& ys) {
    std::vector<CurvePoint> s(xs.size());
    for (size_t k = 0; k < xs.size(); ++k) s[k] = {xs[k], ys[k]};
    return s;
  };

  CurveStats out;
  out.num_seeds = 0;
  for (double x : pts)
    if (x >= lo && x <= hi) out.steps.push_back(x);
  const double T = static_cast<double>(tasks.size());
  for (double x : out.steps) {
    double m = 0.0, ss = 0.0;
    for (const auto& t : tasks) {
      m += detail::interp_linear(as_series(t.steps, t.mean), x);
      const double s = detail::interp_linear(as_series(t.steps, t.se), x);
      ss += s * s;
    }
    out.mean.push_back(m / T);
    out.se.push_back(std::sqrt(ss) / T);
  }
  return out;
}

/// Trapezoidal area under (steps, values); needs at least two points.
inline double auc(const std::vector<double>& steps, const std::vector<double>& values) {
  if (steps.size() != values.size()) throw std::invalid_argument("auc: size mismatch");
  if (steps.size() < 2) throw std::invalid_argument("auc: need at least two grid points");
  double area = 0.0;
  for (size_t k = 1; k < steps.size(); ++k) {
    if (steps[k] < steps[k - 1]) throw std::invalid_argument("auc: steps must be sorted");
    area += 0.5 * (values[k] + values[k - 1]) * (steps[k] - steps[k - 1]);
  }
  return area;
}

inline double auc(const CurveStats& stats) { return auc(stats.steps, stats.mean); }

/// Average of benchmark-level AUCs, optionally normalized by a reference AUC.
inline double aggregate_benchmark_auc(const std::vector<double>& benchmark_aucs,
                                      double reference = 1.0) {
  if (benchmark_aucs.empty()) throw std::invalid_argument("aggregate_benchmark_auc: empty");
  if (!(reference > 0.0))
    throw std::invalid_argument("aggregate_benchmark_auc: reference must be positive");
  double m = 0.0;
  for (double a : benchmark_aucs) m += a;
  return m / benchmark_aucs.size() / reference;
}

// ---- planner cross-scoring ----

/// Estimator index order used throughout the study tables.
enum CrossEstimator { kSingleHeadEstimator = 0, kEnsembleEstimator = 1, kOracleEstimator = 2 };
/// Planner-condition index order.
enum CrossPlanner { kSingleHeadPlanner = 0, kEnsemblePlanner = 1 };

struct CrossScoreRecord {
  int state_id = 0;
  std::array<std::array<double, 3>, 2> plan_score{};  // [planner][estimator]
  std::array<double, 3> policy_score{};
  std::array<std::array<double, 3>, 2> delta_r{};  // (plan - policy) * episode/horizon
};

struct CrossScoreSummary {
  std::array<std::array<double, 3>, 2> mean{};
  std::array<std::array<double, 3>, 2> se{};
  int num_states = 0;
  int skipped = 0;
};

struct CrossScoreStudy {
  std::vector<CrossScoreRecord> records;
  CrossScoreSummary summary;
};

namespace detail {

template <LatentModel M>
std::array<double, 2> model_scores(const M& model, const VectorXd& z,
                                   const std::vector<MatrixXd>& actions, double gamma) {
  MatrixXd z0(z.size(), 1);
  z0.col(0) = z;
  ReturnTableBatch tb = rollout_return_tables(model, z0, actions, gamma, false);
  ReturnTable t = tb.extract(0);
  return {t.at(0, 0, t.horizon), ensemble_mean(t, t.horizon)};
}

}  // namespace detail

/// Appendix-style planner cross-scoring. For each state: plan under the
/// single-head objective and under the ensemble-mean objective, roll the
/// policy mean through one dynamics head as the baseline, then score all
/// three action sequences under the single-head estimator, the ensemble
/// estimator, and the true-simulator oracle (h exact steps + value
/// bootstrap). Delta-R extrapolates each 3-step gap linearly to a full
/// episode: (plan score - policy score) * episode_length / horizon.
template <PolicyLatentModel M>
CrossScoreStudy cross_score_study(const EnvSpec& spec, const M& model,
                                  const std::vector<VectorXd>& env_states,
                                  const std::function<VectorXd(const VectorXd&)>& latent_of_state,
                                  const std::function<double(const VectorXd&)>& oracle_value_fn,
                                  PlannerConfig budget, double gamma, Rng& rng, int skipped = 0) {
  budget.gamma = gamma;
  PlannerConfig cfg_single = budget;
  cfg_single.objective = ObjectiveMode::single_head(0, 0);
  PlannerConfig cfg_ens = budget;
  cfg_ens.objective = ObjectiveMode::ensemble_mean();
  const double factor = static_cast<double>(spec.episode_length) / budget.horizon;
  const int H = budget.horizon;

  CrossScoreStudy study;
  study.summary.skipped = skipped;
  for (size_t sidx = 0; sidx < env_states.size(); ++sidx) {
    const VectorXd& s = env_states[sidx];
    const VectorXd z = latent_of_state(s);

    std::array<std::vector<MatrixXd>, 2> plans;
    plans[kSingleHeadPlanner] = plan(model, z, cfg_single, nullptr, rng).mean_sequence();
    plans[kEnsemblePlanner] = plan(model, z, cfg_ens, nullptr, rng).mean_sequence();

    // Policy baseline: deterministic mean actions through the rollout head.
    std::vector<MatrixXd> base(H);
    MatrixXd zc(z.size(), 1);
    zc.col(0) = z;
    for (int u = 0; u < H; ++u) {
      PolicyParams pp = model.policy_batch(zc);
      base[u] = pp.mean.array().tanh().matrix();
      if (u + 1 < H) zc = model.dynamics_batch(budget.policy_rollout_head, zc, base[u]);
    }

    auto oracle_score = [&](const std::vector<MatrixXd>& actions) {
      std::vector<VectorXd> seq(actions.size());
      for (size_t u = 0; u < actions.size(); ++u) seq[u] = actions[u].col(0);
      return oracle_return(spec, s, seq, oracle_value_fn, gamma);
    };

    CrossScoreRecord rec;
    rec.state_id = static_cast<int>(sidx);
    for (int p = 0; p < 2; ++p) {
      const auto ms = detail::model_scores(model, z, plans[p], gamma);
      rec.plan_score[p][kSingleHeadEstimator] = ms[0];
      rec.plan_score[p][kEnsembleEstimator] = ms[1];
      rec.plan_score[p][kOracleEstimator] = oracle_score(plans[p]);
    }
    {
      const auto ms = detail::model_scores(model, z, base, gamma);
      rec.policy_score[kSingleHeadEstimator] = ms[0];
      rec.policy_score[kEnsembleEstimator] = ms[1];
      rec.policy_score[kOracleEstimator] = oracle_score(base);
    }
    for (int p = 0; p < 2; ++p)
      for (int e = 0; e < 3; ++e)
        rec.delta_r[p][e] = (rec.plan_score[p][e] - rec.policy_score[e]) * factor;
    study.records.push_back(rec);
  }

  // Mean and standard error over states per (planner, estimator) cell.
  const int n = static_cast<int>(study.records.size());
  study.summary.num_states = n;
  for (int p = 0; p < 2; ++p) {
    for (int e = 0; e < 3; ++e) {
      double m = 0.0;
      for (const auto& r : study.records) m += r.delta_r[p][e];
      m /= std::max(n, 1);
      double ss = 0.0;
      for (const auto& r : study.records) ss += (r.delta_r[p][e] - m) * (r.delta_r[p][e] - m);
      study.summary.mean[p][e] = m;
      study.summary.se[p][e] =
          n >= 2 ? std::sqrt(ss / (n - 1)) / std::sqrt(static_cast<double>(n))
                 : std::numeric_limits<double>::quiet_NaN();
    }
  }
  return study;
}

}  // namespace etdmpc
