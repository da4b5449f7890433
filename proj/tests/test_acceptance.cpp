#include "test_util.hpp"

#include "etdmpc/analysis.hpp"
#include "etdmpc/config.hpp"
#include "etdmpc/envs.hpp"
#include "etdmpc/planner.hpp"
#include "etdmpc/replay.hpp"
#include "etdmpc/returns.hpp"
#include "etdmpc/trainer.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <array>
#include <chrono>
#include <cstdio>
#include <vector>

using namespace etdmpc;

namespace {

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

void report(int idx, const char* name, bool ok, double secs) {
  std::printf("[%2d/13] %-58s %s  (%.1fs)\n", idx, name, ok ? "PASS" : "FAIL", secs);
  std::fflush(stdout);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double var_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

double corr_of(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

/// One-sided Pitman-Morgan paired test for var(x) < var(y): the correlation of
/// (x+y, x-y) has cov = var(x) - var(y), so a significantly negative r
/// supports the hypothesis. Returns P(T <= t) under H0 of equal variances.
double pitman_morgan_p_less(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  std::vector<double> s(x.size()), d(x.size());
  for (size_t k = 0; k < x.size(); ++k) {
    s[k] = x[k] + y[k];
    d[k] = x[k] - y[k];
  }
  const double r = corr_of(s, d);
  const double t = r * std::sqrt((n - 2.0) / (1.0 - r * r));
  boost::math::students_t dist(n - 2.0);
  return boost::math::cdf(dist, t);
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.obs_dim = 3;
  c.action_dim = 1;
  c.latent_dim = 16;
  c.mlp_dim = 24;
  c.encoder_dim = 24;
  c.simnorm_dim = 8;
  c.dynamics_heads = 2;
  c.value_heads = 2;
  c.value_bins = 31;
  return c;
}

TrainBatch random_batch(const WorldModel& m, int B, int H, Rng& rng) {
  TrainBatch b;
  b.obs.assign(H + 1, MatrixXd());
  b.act.assign(H, MatrixXd());
  b.rew.assign(H, VectorXd());
  for (int u = 0; u <= H; ++u) b.obs[u] = rng.normal_matrix(m.cfg.obs_dim, B);
  for (int u = 0; u < H; ++u) {
    b.act[u] = rng.normal_matrix(m.cfg.action_dim, B, 0.0, 0.5);
    b.rew[u] = VectorXd(B);
    for (int c = 0; c < B; ++c) b.rew[u](c) = rng.uniform(0.0, 1.0);
  }
  b.target_mu = rng.normal_matrix(m.cfg.action_dim, B, 0.0, 0.4);
  b.target_sigma = MatrixXd(m.cfg.action_dim, B);
  for (int c = 0; c < B; ++c) b.target_sigma(0, c) = rng.uniform(0.3, 1.0);
  return b;
}

/// 1-D surrogate with a known 1-step argmax (identity dynamics, V = 0).
struct QuadraticModel {
  double peak = 0.3;

  int num_dynamics() const { return 1; }
  int num_values() const { return 1; }
  int latent_dim() const { return 1; }
  int action_dim() const { return 1; }
  MatrixXd dynamics_batch(int, const MatrixXd& z, const MatrixXd&) const { return z; }
  VectorXd reward_batch(int, const MatrixXd&, const MatrixXd& a) const {
    return -(a.row(0).array() - peak).square().matrix().transpose();
  }
  VectorXd value_batch(int, const MatrixXd& z, bool) const { return VectorXd::Zero(z.cols()); }
  PolicyParams policy_batch(const MatrixXd& z) const {
    return {MatrixXd::Zero(1, z.cols()), MatrixXd::Zero(1, z.cols())};
  }
};

/// Two reward heads that agree on a modest payoff for a < 0 but disagree
/// strongly (mean 1.0, spread +/-1.5) for a >= 0; identity dynamics, V = 0.
struct DisagreementModel {
  int num_dynamics() const { return 2; }
  int num_values() const { return 1; }
  int latent_dim() const { return 1; }
  int action_dim() const { return 1; }
  MatrixXd dynamics_batch(int, const MatrixXd& z, const MatrixXd&) const { return z; }
  VectorXd reward_batch(int i, const MatrixXd&, const MatrixXd& a) const {
    VectorXd r(a.cols());
    for (int c = 0; c < a.cols(); ++c) {
      const double x = a(0, c);
      if (x >= 0.0)
        r(c) = 1.0 - 0.1 * (x - 0.5) * (x - 0.5) + (i == 0 ? 1.5 : -1.5);
      else
        r(c) = 0.6 - 0.1 * (x + 0.5) * (x + 0.5);
    }
    return r;
  }
  VectorXd value_batch(int, const MatrixXd& z, bool) const { return VectorXd::Zero(z.cols()); }
  PolicyParams policy_batch(const MatrixXd& z) const {
    return {MatrixXd::Zero(1, z.cols()), MatrixXd::Zero(1, z.cols())};
  }
};

bool same_vec(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size()) return false;
  if (a.size() == 0) return true;
  return (a.array() == b.array()).all();
}

// ---- shared training arms for the learning studies (criteria 11-13) ----

struct StudyArms {
  std::array<RunResult, 3> per_step_utd2;   // the configuration under test
  std::array<RunResult, 3> per_episode;     // insertion ablation
  std::array<RunResult, 3> utd1;            // update-rate ablation
  std::array<RunResult, 3> rich_reanalyze;  // 8x reanalyze budget
  double exact_planner_best = 0.0;
};

const StudyArms& study_arms() {
  static const StudyArms arms = [] {
    StudyArms a;
    const RunConfig preset = preset_pendulum_desk();
    const EnvSpec spec = env_spec_by_name(preset.env);

    auto run_arm = [&](const char* label, std::array<RunResult, 3>& out,
                       BufferMode mode, int utd, const PlannerConfig& reanalyze) {
      for (uint64_t s = 0; s < 3; ++s) {
        TrainConfig t = preset.train;
        t.seed = s;
        t.buffer_mode = mode;
        t.utd = utd;
        const double t0 = now_s();
        out[s] = run(spec, preset.model, preset.acting, reanalyze, t);
        std::printf("    %-12s seed %llu: best %7.2f final %7.2f  reanalyze %6.1fs  (%.0fs)\n",
                    label, static_cast<unsigned long long>(s), out[s].best_eval_mean,
                    out[s].final_eval_mean, out[s].reanalyze_ms / 1000.0, now_s() - t0);
        std::fflush(stdout);
      }
    };

    PlannerConfig rich = preset.reanalyze;
    rich.num_samples = 512;
    rich.num_elites = 64;
    rich.num_policy_trajectories = 24;

    std::printf("  building shared training arms (12 runs):\n");
    run_arm("per-step", a.per_step_utd2, BufferMode::per_step, preset.train.utd,
            preset.reanalyze);
    run_arm("per-episode", a.per_episode, BufferMode::per_episode, preset.train.utd,
            preset.reanalyze);
    run_arm("utd-1", a.utd1, BufferMode::per_step, 1, preset.reanalyze);
    run_arm("reanalyze-8x", a.rich_reanalyze, BufferMode::per_step, preset.train.utd, rich);

    // best return a planner can reach when handed the exact simulator: long
    // horizon, pure reward-sum objective, no learned components involved
    ExactModel em;
    em.spec = spec;
    PlannerConfig bp;
    bp.horizon = 32;
    bp.iterations = 6;
    bp.num_samples = 64;
    bp.num_elites = 8;
    bp.num_policy_trajectories = 2;
    bp.gamma = discount_for_episode_length(spec.episode_length, preset.train.gamma_min,
                                           preset.train.gamma_max);
    bp.objective = ObjectiveMode::ensemble_mean();
    Rng br(424242);
    EvalResult ev = evaluate_policy_with(spec, em, bp, 10, br,
                                         [](const Env& e) { return e.state; });
    a.exact_planner_best = ev.mean;
    std::printf("    exact-planner baseline over 10 episodes: %.2f\n", a.exact_planner_best);
    std::fflush(stdout);
    return a;
  }();
  return arms;
}

}  // namespace

TEST_CASE("estimator identities and closed-form reductions") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const int nf = rng.uniform_int(1, 4);
    const int nv = rng.uniform_int(1, 3);
    const int H = rng.uniform_int(1, 8);
    const double gamma = rng.uniform(0.9, 0.999);
    ReturnTable t = ReturnTable::make(nf, nv, H, gamma);
    for (double& q : t.q) q = rng.normal(0.0, 5.0);

    for (int h = 1; h <= H; ++h) {
      // beta = 0 pessimism must be bit-identical to the plain mean
      chk(pessimistic_objective(t, 0.0, h) == ensemble_mean(t, h));

      // naive reference for the ensemble mean (Eq. 2)
      double s = 0.0;
      for (int i = 0; i < nf; ++i)
        for (int j = 0; j < nv; ++j) s += t.at(i, j, h);
      chk(ensemble_mean(t, h) == s / (static_cast<double>(nf) * nv));

      // naive reference for the variance of the mean (Eq. 3)
      const double n = static_cast<double>(nf) * nv;
      double expect = 0.0;
      if (n > 1.0) {
        const double m = s / n;
        for (int i = 0; i < nf; ++i)
          for (int j = 0; j < nv; ++j) expect += (t.at(i, j, h) - m) * (t.at(i, j, h) - m);
        expect /= n * (n - 1.0);
      }
      chk(variance_of_mean(t, h) == expect);
    }

    // one-depth tables: averaging over horizons of a single depth is the mean
    ReturnTable t1 = ReturnTable::make(nf, nv, 1, gamma);
    for (double& q : t1.q) q = rng.normal(0.0, 5.0);
    chk(aggregate_horizon(t1) == ensemble_mean(t1, 1));
  }
  report(1, "return-estimator identities (1000 random tables)", ok, now_s() - t0);
}

TEST_CASE("exact-simulator rollouts reproduce the oracle return") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  const EnvSpec spec = pendulum_spec();
  auto value_fn = [](const VectorXd& s) { return std::cos(s(0)) + 0.05 * s(1) * s(1); };
  ExactModel em;
  em.spec = spec;
  em.nf = 2;
  em.nv = 2;
  em.value_fn = value_fn;
  const double gamma = 0.97;
  const int H = 7;

  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    Env env(spec);
    env.reset(rng);
    const VectorXd s0 = env.state;
    std::vector<VectorXd> acts;
    for (int u = 0; u < H; ++u) {
      VectorXd a(1);
      a << rng.uniform(-1.0, 1.0);
      acts.push_back(a);
    }
    ReturnTable t = rollout_returns(em, s0, acts, gamma);
    for (int h = 1; h <= H; ++h) {
      std::vector<VectorXd> prefix(acts.begin(), acts.begin() + h);
      const double oracle = oracle_return(spec, s0, prefix, value_fn, gamma);
      for (int i = 0; i < em.nf; ++i)
        for (int j = 0; j < em.nv; ++j) chk(std::abs(t.at(i, j, h) - oracle) <= 1e-9);
    }
  }
  report(2, "oracle equivalence on pendulum (100 states, all depths)", ok, now_s() - t0);
}

TEST_CASE("ensembling and horizon aggregation reduce estimator variance") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  const EnvSpec spec = pendulum_spec();
  const int H = 5, draws = 10000;
  Rng rng(31);
  Env env(spec);
  env.reset(rng);
  const VectorXd s0 = env.state;
  std::vector<VectorXd> acts;
  for (int u = 0; u < H; ++u) {
    VectorXd a(1);
    a << rng.uniform(-1.0, 1.0);
    acts.push_back(a);
  }

  // (a) mean over four perturbed heads vs the best single head
  std::vector<double> ens_mean(draws);
  std::array<std::vector<double>, 4> single;
  for (auto& s : single) s.resize(draws);
  for (int k = 0; k < draws; ++k) {
    PerturbedModelEnsemble e = make_perturbed_ensemble(spec, 0.05, 0.3, 4, 1000 + k);
    ReturnTable t = rollout_returns(e, s0, acts, 0.97);
    ens_mean[k] = ensemble_mean(t, H);
    for (int i = 0; i < 4; ++i) single[i][k] = t.at(i, 0, H);
  }
  int best = 0;
  for (int i = 1; i < 4; ++i)
    if (var_of(single[i]) < var_of(single[best])) best = i;
  chk(var_of(ens_mean) < var_of(single[best]));
  const double p_ens = pitman_morgan_p_less(ens_mean, single[best]);
  CAPTURE(p_ens);
  chk(p_ens < 0.01);

  // (b) averaging one head's per-depth estimates vs its terminal depth alone
  std::vector<double> agg(draws), term(draws), depth1(draws);
  for (int k = 0; k < draws; ++k) {
    PerturbedModelEnsemble e = make_perturbed_ensemble(spec, 0.05, 0.3, 2, 500000 + k);
    ReturnTable t = rollout_returns(e, s0, acts, 0.97);
    double s = 0.0;
    for (int h = 1; h <= H; ++h) s += t.at(0, 0, h);
    agg[k] = s / H;
    term[k] = t.at(0, 0, H);
    depth1[k] = t.at(0, 0, 1);
  }
  const double depth_corr = corr_of(depth1, term);
  CAPTURE(depth_corr);
  chk(depth_corr < 0.999);  // the per-depth estimates are imperfectly correlated
  chk(var_of(agg) < var_of(term));
  const double p_agg = pitman_morgan_p_less(agg, term);
  CAPTURE(p_agg);
  chk(p_agg < 0.01);

  report(3, "variance reduction (10000 perturbation draws, p < 0.01)", ok, now_s() - t0);
}

TEST_CASE("planner recovers the analytic quadratic argmax on every seed") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  QuadraticModel model;
  PlannerConfig cfg;
  cfg.horizon = 1;
  cfg.iterations = 6;
  cfg.num_samples = 512;
  cfg.num_elites = 64;
  cfg.num_policy_trajectories = 24;
  cfg.temperature = 0.5;
  cfg.objective = ObjectiveMode::ensemble_mean();
  VectorXd z0 = VectorXd::Zero(1);
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    PlanDistribution p = plan(model, z0, cfg, nullptr, rng);
    chk(std::abs(p.mu(0, 0) - model.peak) <= 0.02);
  }
  report(4, "planner argmax within 0.02 on 20/20 seeds", ok, now_s() - t0);
}

TEST_CASE("pessimism flips the planner out of the disagreement region") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  DisagreementModel model;
  PlannerConfig cfg;
  cfg.horizon = 1;
  cfg.iterations = 3;
  cfg.num_samples = 64;
  cfg.num_elites = 8;
  cfg.num_policy_trajectories = 2;
  VectorXd z0 = VectorXd::Zero(1);
  int flips = 0;
  for (int seed = 0; seed < 20; ++seed) {
    Rng r_mean(seed), r_pess(seed);
    cfg.objective = ObjectiveMode::pessimistic(0.0);
    PlanDistribution pm = plan(model, z0, cfg, nullptr, r_mean);
    cfg.objective = ObjectiveMode::pessimistic(10.0);
    PlanDistribution pp = plan(model, z0, cfg, nullptr, r_pess);
    if (pm.mu(0, 0) >= 0.0 && pp.mu(0, 0) < 0.0) ++flips;
  }
  CAPTURE(flips);
  chk(flips >= 19);
  report(5, "pessimism steering flips the chosen region (>= 19/20)", ok, now_s() - t0);
}

TEST_CASE("a corrupted head inflates its own planner score") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  const EnvSpec spec = pendulum_spec();
  VectorXd state_scales(4), reward_scales(4);
  state_scales << 1.0, 0.0, 0.0, 0.0;  // head 0 alone is corrupted
  reward_scales << 0.8, 0.0, 0.0, 0.0;

  PlannerConfig budget;
  budget.horizon = 4;
  budget.iterations = 3;
  budget.num_samples = 48;
  budget.num_elites = 8;
  budget.num_policy_trajectories = 2;

  std::array<std::array<double, 3>, 2> avg{};
  for (uint64_t seed = 0; seed < 3; ++seed) {
    PerturbedModelEnsemble ens =
        make_perturbed_ensemble(spec, state_scales, reward_scales, 77 + seed);
    Rng rng(900 + seed);
    std::vector<VectorXd> states;
    for (int s = 0; s < 512; ++s) {
      Env env(spec);
      env.reset(rng);
      states.push_back(env.state);
    }
    CrossScoreStudy study = cross_score_study(
        spec, ens, states, [](const VectorXd& s) { return s; },
        [](const VectorXd&) { return 0.0; }, budget, 0.97, rng);
    for (int p = 0; p < 2; ++p)
      for (int e = 0; e < 3; ++e) avg[p][e] += study.summary.mean[p][e] / 3.0;
  }

  const double self_single = avg[kSingleHeadPlanner][kSingleHeadEstimator];
  const double oracle_single = avg[kSingleHeadPlanner][kOracleEstimator];
  const double self_ens = avg[kEnsemblePlanner][kEnsembleEstimator];
  const double oracle_ens = avg[kEnsemblePlanner][kOracleEstimator];
  CAPTURE(self_single);
  CAPTURE(oracle_single);
  CAPTURE(self_ens);
  CAPTURE(oracle_ens);
  chk(self_single >= 2.0 * oracle_single);
  chk((self_ens - oracle_ens) < (self_single - oracle_single));
  report(6, "single-head self-scoring exploits its corrupted head", ok, now_s() - t0);
}

TEST_CASE("every loss term matches central finite differences") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  Rng rng(47);
  WorldModel m = WorldModel::make(tiny_model_config(), rng);
  TrainBatch b = random_batch(m, 4, 2, rng);
  VectorXd y(4);
  for (int c = 0; c < 4; ++c) y(c) = rng.uniform(0.0, 5.0);

  struct Term {
    const char* name;
    TrainConfig cfg;
    std::vector<Mlp*> params;  // parameter blocks this term reaches
    std::vector<Mlp*> grads;
  };
  auto only = [](double c, double r, double v, double p) {
    TrainConfig t;
    t.w_consistency = c;
    t.w_reward = r;
    t.w_value = v;
    t.w_policy = p;
    return t;
  };

  ModelGrads g = ModelGrads::make(m);
  std::vector<Term> terms;
  terms.push_back({"consistency", only(1, 0, 0, 0), {&m.encoder}, {&g.encoder}});
  terms.push_back({"reward", only(0, 1, 0, 0), {&m.encoder, &m.reward}, {&g.encoder, &g.reward}});
  terms.push_back({"value", only(0, 0, 1, 0), {&m.encoder}, {&g.encoder}});
  terms.push_back({"policy", only(0, 0, 0, 1), {&m.policy}, {&g.policy}});
  for (int i = 0; i < m.num_dynamics(); ++i) {
    terms[0].params.push_back(&m.dynamics[i]);
    terms[0].grads.push_back(&g.dynamics[i]);
    terms[1].params.push_back(&m.dynamics[i]);  // depth-u rewards flow through dynamics
    terms[1].grads.push_back(&g.dynamics[i]);
  }
  for (int j = 0; j < m.num_values(); ++j) {
    terms[2].params.push_back(&m.value[j]);
    terms[2].grads.push_back(&g.value[j]);
  }

  for (Term& term : terms) {
    loss_and_grad(m, b, y, term.cfg, &g);
    auto loss = [&]() { return loss_and_grad(m, b, y, term.cfg, nullptr).total_loss; };
    for (int k = 0; k < 64; ++k) {
      const int blk = rng.uniform_int(0, static_cast<int>(term.params.size()) - 1);
      Mlp& param = *term.params[static_cast<size_t>(blk)];
      const Mlp& grad = *term.grads[static_cast<size_t>(blk)];
      const int l = rng.uniform_int(0, static_cast<int>(param.layers.size()) - 1);
      auto& lay = param.layers[static_cast<size_t>(l)];
      const auto& glay = grad.layers[static_cast<size_t>(l)];
      double fd, an;
      if (rng.uniform(0.0, 1.0) < 0.5) {
        const int r = rng.uniform_int(0, static_cast<int>(lay.w.rows()) - 1);
        const int c = rng.uniform_int(0, static_cast<int>(lay.w.cols()) - 1);
        fd = testutil::fd_scalar(lay.w(r, c), loss);
        an = glay.w(r, c);
      } else {
        const int r = rng.uniform_int(0, static_cast<int>(lay.b.rows()) - 1);
        fd = testutil::fd_scalar(lay.b(r), loss);
        an = glay.b(r);
      }
      INFO(term.name << " block " << blk << " layer " << l);
      chk(testutil::rel_err(fd, an) < 1e-4);
    }
  }

  // the distillation latent is stopped: a policy-only pass leaves the encoder
  ModelGrads pg = ModelGrads::make(m);
  loss_and_grad(m, b, y, only(0, 0, 0, 1), &pg);
  chk(squared_norm(pg.encoder) == 0.0);

  report(7, "loss gradients vs finite differences (64 coords/term)", ok, now_s() - t0);
}

TEST_CASE("two-hot codec round-trips ten thousand values") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  TwoHotCodec codec;
  Rng rng(53);
  for (int k = 0; k < 10000; ++k) {
    const double v = rng.uniform(-10.0, 10.0);
    chk(std::abs(codec.decode(codec.encode(v)) - v) < 1e-6);
  }
  chk(codec.decode(codec.encode(-10.0)) == -10.0);
  chk(codec.decode(codec.encode(10.0)) == 10.0);
  // out-of-range values clamp onto the boundary bins exactly
  chk(codec.decode(codec.encode(-12.5)) == -10.0);
  chk(codec.decode(codec.encode(11.0)) == 10.0);

  report(8, "two-hot roundtrip < 1e-6, boundaries exact", ok, now_s() - t0);
}

TEST_CASE("replay buffer semantics follow the scripted scenarios") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  const EnvSpec spec = pendulum_spec();
  Rng rng(59);
  auto make_tr = [&](long ep, int step, bool done) {
    Transition tr;
    tr.obs = rng.normal_vector(3);
    tr.action = rng.normal_vector(1, 0.0, 0.5);
    tr.reward = rng.uniform(0.0, 1.0);
    tr.done = done;
    tr.target_mu = tr.action;
    tr.target_sigma = VectorXd::Constant(1, 1.0);
    tr.episode_id = ep;
    tr.step_index = step;
    tr.env_state = rng.normal_vector(2);
    return tr;
  };

  // per-step: one insert is sampleable at the very next tick
  {
    ReplayBuffer buf(16, BufferMode::per_step);
    buf.insert(make_tr(0, 0, false));
    chk(buf.size() == 1);
    chk(buf.sample_starts(1, 1, rng) == std::vector<int>{0});
  }

  // per-episode: nothing is sampleable until the episode terminates
  {
    ReplayBuffer buf(16, BufferMode::per_episode);
    for (int s = 0; s < 3; ++s) {
      buf.insert(make_tr(0, s, false));
      chk(buf.size() == 0);
      bool threw = false;
      try {
        buf.sample_starts(1, 1, rng);
      } catch (const InsufficientDataError&) {
        threw = true;
      }
      chk(threw);
    }
    chk(buf.staged() == 3);
    buf.insert(make_tr(0, 3, true));
    chk(buf.size() == 4);
    chk(buf.staged() == 0);
  }

  // reanalyze refreshes only the stored policy targets
  {
    Rng mr(61);
    WorldModel m = WorldModel::make(tiny_model_config(), mr);
    ReplayBuffer buf(64, BufferMode::per_step);
    Env env(spec);
    env.reset(mr);
    for (int s = 0; s < 30; ++s) {
      Transition tr;
      tr.obs = spec.observe(env.state);
      Action a(mr.normal_vector(1, 0.0, 0.6));
      Env::StepResult sr = env.step(a);
      tr.action = a.values;
      tr.reward = sr.reward;
      tr.done = sr.done;
      tr.target_mu = a.values;
      tr.target_sigma = VectorXd::Constant(1, 1.0);
      tr.episode_id = 0;
      tr.step_index = s;
      tr.env_state = env.state;
      buf.insert(std::move(tr));
    }
    std::vector<Transition> before;
    for (int i = 0; i < buf.size(); ++i) before.push_back(buf.at(i));

    PlannerConfig pc;
    pc.horizon = 2;
    pc.iterations = 1;
    pc.num_samples = 8;
    pc.num_elites = 2;
    pc.num_policy_trajectories = 1;
    ReanalyzeStats stats = reanalyze_pass(buf, m, pc, 10, rng);
    chk(stats.attempted == 10);
    chk(stats.refreshed + stats.skipped == 10);

    long version_bumps = 0;
    for (int i = 0; i < buf.size(); ++i) {
      const Transition& now = buf.at(i);
      const Transition& was = before[static_cast<size_t>(i)];
      chk(same_vec(now.obs, was.obs));
      chk(same_vec(now.action, was.action));
      chk(same_vec(now.env_state, was.env_state));
      chk(now.reward == was.reward);
      chk(now.done == was.done);
      chk(now.episode_id == was.episode_id);
      chk(now.step_index == was.step_index);
      chk(now.target_version >= was.target_version);
      version_bumps += now.target_version - was.target_version;
      if (now.target_version == was.target_version) {
        chk(same_vec(now.target_mu, was.target_mu));
        chk(same_vec(now.target_sigma, was.target_sigma));
      }
    }
    chk(version_bumps == stats.refreshed);
  }

  // FIFO eviction is exact
  {
    ReplayBuffer buf(3, BufferMode::per_step);
    for (long e = 1; e <= 4; ++e) buf.insert(make_tr(e, 0, false));
    chk(buf.size() == 3);
    chk(buf.evictions() == 1);
    chk(buf.at(0).episode_id == 2);
    chk(buf.at(1).episode_id == 3);
    chk(buf.at(2).episode_id == 4);
  }

  report(9, "replay semantics (insertion, staging, reanalyze, FIFO)", ok, now_s() - t0);
}

TEST_CASE("aggregation arithmetic matches hand-computed fixtures") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  // two seeds {1, 3}: mean 2, sd sqrt(2), se sqrt(2)/sqrt(2) = 1
  {
    TaskCurve task;
    task.task_id = "fixture";
    task.seeds = {{{0.0, 1.0}, {100.0, 1.0}}, {{0.0, 3.0}, {100.0, 3.0}}};
    CurveStats st = task_mean_and_se(task);
    chk(st.mean[0] == 2.0);
    chk(st.se[0] == 1.0);
  }

  // seeds {760, 840} normalized by 400: mean 2.0, se 40/400 = 0.1
  {
    TaskCurve task;
    task.task_id = "fixture";
    task.seeds = {{{0.0, 760.0}}, {{0.0, 840.0}}};
    CurveStats st = task_mean_and_se(task);
    chk(st.mean[0] == 800.0);
    chk(st.se[0] == 40.0);
    CurveStats norm = normalize_curve(st, 400.0);
    chk(norm.mean[0] == 2.0);
    chk(norm.se[0] == 0.1);
  }

  // aggregate of task means {3, 4} with ses {3, 4}: mean 3.5, se 5/2 = 2.5
  {
    CurveStats a, b;
    a.steps = b.steps = {0.0};
    a.mean = {3.0};
    a.se = {3.0};
    a.num_seeds = b.num_seeds = 2;
    b.mean = {4.0};
    b.se = {4.0};
    CurveStats agg = aggregate_curves({a, b});
    chk(agg.mean[0] == 3.5);
    chk(agg.se[0] == 2.5);
  }

  // the confidence band multiplier is exactly 1.96
  {
    CurveStats c;
    c.steps = {0.0};
    c.mean = {2.0};
    c.se = {0.25};
    chk(c.ci_low(0) == 2.0 - 1.96 * 0.25);
    chk(c.ci_high(0) == 2.0 + 1.96 * 0.25);
  }

  // trapezoid AUC: unit triangle and a constant curve
  chk(auc({0.0, 1.0}, {0.0, 1.0}) == 0.5);
  chk(auc({0.0, 4.0, 10.0}, {1.5, 1.5, 1.5}) == 15.0);

  // three-benchmark average normalized by a reference method
  chk(aggregate_benchmark_auc({2.0, 4.0, 6.0}, 2.0) == 2.0);

  report(10, "aggregation math fixtures exact", ok, now_s() - t0);
}

TEST_CASE("the configured agent learns pendulum swing-up") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  const StudyArms& arms = study_arms();
  const double target = 0.85 * arms.exact_planner_best;
  int reached = 0;
  for (const RunResult& r : arms.per_step_utd2)
    if (r.best_eval_mean >= target) ++reached;
  std::printf("    target %.2f (0.85 x %.2f); per-seed best:", target, arms.exact_planner_best);
  for (const RunResult& r : arms.per_step_utd2) std::printf(" %.2f", r.best_eval_mean);
  std::printf(" -> %d/3\n", reached);
  chk(reached >= 2);

  report(11, "learning reaches 0.85x the exact-planner return (2/3 seeds)", ok, now_s() - t0);
}

TEST_CASE("per-step insertion and higher update rates improve the curve") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  const StudyArms& arms = study_arms();
  auto curve_auc = [](const RunResult& r) { return auc(r.eval_steps, r.eval_means); };

  int step_wins = 0, utd_wins = 0;
  for (int s = 0; s < 3; ++s) {
    if (curve_auc(arms.per_step_utd2[s]) >= curve_auc(arms.per_episode[s])) ++step_wins;
    if (curve_auc(arms.per_step_utd2[s]) >= curve_auc(arms.utd1[s])) ++utd_wins;
  }
  std::printf("    per-step AUC wins %d/3, utd-2 AUC wins %d/3\n", step_wins, utd_wins);
  chk(step_wins >= 2);
  chk(utd_wins >= 2);

  report(12, "freshness and UTD directions hold (2/3 seeds each)", ok, now_s() - t0);
}

TEST_CASE("an 8x cheaper reanalyze budget preserves final performance") {
  const double t0 = now_s();
  bool ok = true;
  auto chk = [&](bool v) { ok = ok && v; CHECK(v); };

  const StudyArms& arms = study_arms();
  double final_cheap = 0.0, final_rich = 0.0, ms_cheap = 0.0, ms_rich = 0.0;
  for (int s = 0; s < 3; ++s) {
    final_cheap += arms.per_step_utd2[s].final_eval_mean / 3.0;
    final_rich += arms.rich_reanalyze[s].final_eval_mean / 3.0;
    ms_cheap += arms.per_step_utd2[s].reanalyze_ms;
    ms_rich += arms.rich_reanalyze[s].reanalyze_ms;
  }
  const double rel_change = std::abs(final_cheap - final_rich) / std::abs(final_rich);
  const double speedup = ms_rich / ms_cheap;
  std::printf("    final cheap %.2f vs rich %.2f (%.1f%% change), reanalyze time %.1fx\n",
              final_cheap, final_rich, 100.0 * rel_change, speedup);
  chk(rel_change < 0.10);
  chk(speedup >= 4.0);

  report(13, "cheap reanalyze: < 10% return change, >= 4x less replan time", ok, now_s() - t0);
}
