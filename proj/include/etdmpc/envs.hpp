#pragma once

#include "etdmpc/io.hpp"
#include "etdmpc/model.hpp"

#include <functional>
#include <string>
#include <vector>

namespace etdmpc {

/// Deterministic analytic environment: pure dynamics/reward functions, fixed
/// episode length, no early termination.
struct EnvSpec {
  std::string name;
  int state_dim = 0;
  int obs_dim = 0;
  int action_dim = 0;
  int episode_length = 500;
  std::function<VectorXd(const VectorXd&, const VectorXd&)> step;
  std::function<double(const VectorXd&, const VectorXd&)> reward;
  std::function<VectorXd(const VectorXd&)> observe;
  std::function<VectorXd(Rng&)> reset_state;
  std::function<VectorXd(const VectorXd&)> clamp_state;  // projects onto the valid state set
};

/// Torque-limited pendulum swing-up. State (theta, theta_dot) with theta
/// measured from upright; torque = 2 * action; semi-implicit Euler, dt 0.05;
/// reward 1 - |angle from upright| / pi.
inline EnvSpec pendulum_spec() {
  constexpr double g = 10.0, m = 1.0, l = 1.0, dt = 0.05, max_torque = 2.0, max_speed = 8.0;
  EnvSpec spec;
  spec.name = "pendulum";
  spec.state_dim = 2;
  spec.obs_dim = 3;
  spec.action_dim = 1;
  spec.clamp_state = [](const VectorXd& s) {
    VectorXd out = s;
    out(1) = clamp(out(1), -max_speed, max_speed);
    return out;
  };
  spec.step = [](const VectorXd& s, const VectorXd& a) {
    const double th = s(0), thdot = s(1);
    const double u = max_torque * clamp(a(0), -1.0, 1.0);
    const double acc = 3.0 * g / (2.0 * l) * std::sin(th) + 3.0 / (m * l * l) * u;
    const double new_thdot = clamp(thdot + acc * dt, -max_speed, max_speed);
    VectorXd out(2);
    out(0) = th + new_thdot * dt;
    out(1) = new_thdot;
    return out;
  };
  spec.reward = [](const VectorXd& s, const VectorXd&) {
    const double angle = std::remainder(s(0), 2.0 * M_PI);  // in [-pi, pi], 0 = upright
    return 1.0 - std::abs(angle) / M_PI;
  };
  spec.observe = [](const VectorXd& s) {
    VectorXd obs(3);
    obs << std::cos(s(0)), std::sin(s(0)), s(1);
    return obs;
  };
  spec.reset_state = [](Rng& rng) {
    VectorXd s(2);
    s << rng.uniform(-M_PI, M_PI), rng.uniform(-1.0, 1.0);
    return s;
  };
  return spec;
}

/// Damped 2-D point mass pushed by force actions toward a fixed goal;
/// reward exp(-||pos - goal||^2).
inline EnvSpec pointmass_spec() {
  constexpr double dt = 0.05, accel = 4.0, damping = 0.95, pos_lim = 2.0, vel_lim = 2.0;
  const Eigen::Vector2d goal(0.5, 0.5);
  EnvSpec spec;
  spec.name = "pointmass";
  spec.state_dim = 4;  // (px, py, vx, vy)
  spec.obs_dim = 4;
  spec.action_dim = 2;
  spec.clamp_state = [](const VectorXd& s) {
    VectorXd out = s;
    out(0) = clamp(out(0), -pos_lim, pos_lim);
    out(1) = clamp(out(1), -pos_lim, pos_lim);
    out(2) = clamp(out(2), -vel_lim, vel_lim);
    out(3) = clamp(out(3), -vel_lim, vel_lim);
    return out;
  };
  spec.step = [](const VectorXd& s, const VectorXd& a) {
    VectorXd out(4);
    out(2) = clamp(damping * s(2) + accel * clamp(a(0), -1.0, 1.0) * dt, -vel_lim, vel_lim);
    out(3) = clamp(damping * s(3) + accel * clamp(a(1), -1.0, 1.0) * dt, -vel_lim, vel_lim);
    out(0) = clamp(s(0) + out(2) * dt, -pos_lim, pos_lim);
    out(1) = clamp(s(1) + out(3) * dt, -pos_lim, pos_lim);
    return out;
  };
  spec.reward = [goal](const VectorXd& s, const VectorXd&) {
    const double dx = s(0) - goal(0), dy = s(1) - goal(1);
    return std::exp(-(dx * dx + dy * dy));
  };
  spec.observe = [](const VectorXd& s) { return s; };
  spec.reset_state = [](Rng& rng) {
    VectorXd s(4);
    s << rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0, 0.0;
    return s;
  };
  return spec;
}

inline EnvSpec env_spec_by_name(const std::string& name) {
  if (name == "pendulum") return pendulum_spec();
  if (name == "pointmass") return pointmass_spec();
  throw std::invalid_argument("unknown env: " + name);
}

struct Env {
  EnvSpec spec;
  VectorXd state;
  int t = 0;

  explicit Env(EnvSpec s) : spec(std::move(s)) {}

  VectorXd reset(Rng& rng) {
    state = spec.reset_state(rng);
    t = 0;
    return spec.observe(state);
  }

  struct StepResult {
    VectorXd obs;
    double reward;
    bool done;
  };

  StepResult step(const Action& a) {
    const double r = spec.reward(state, a.values);
    state = spec.step(state, a.values);
    ++t;
    return {spec.observe(state), r, t >= spec.episode_length};
  }
};

/// Ground-truth scorer: h exact simulator steps, then a value bootstrap.
/// Never consults learned dynamics or reward heads.
inline double oracle_return(const EnvSpec& spec, const VectorXd& state,
                            const std::vector<VectorXd>& actions,
                            const std::function<double(const VectorXd&)>& value_fn, double gamma) {
  if (actions.empty()) throw std::invalid_argument("oracle_return: need h >= 1");
  VectorXd s = state;
  double acc = 0.0, disc = 1.0;
  for (const auto& a : actions) {
    acc += disc * spec.reward(s, a);
    s = spec.step(s, a);
    disc *= gamma;
  }
  return acc + disc * (value_fn ? value_fn(s) : 0.0);
}

/// The exact simulator wrapped in the latent-model interface: "latents" are
/// raw environment states, all heads are the true dynamics. The trivial
/// policy prior is a unit Gaussian around zero torque.
struct ExactModel {
  EnvSpec spec;
  int nf = 1, nv = 1;
  std::function<double(const VectorXd&)> value_fn;  // empty -> 0

  int num_dynamics() const { return nf; }
  int num_values() const { return nv; }
  int latent_dim() const { return spec.state_dim; }
  int action_dim() const { return spec.action_dim; }

  MatrixXd dynamics_batch(int head, const MatrixXd& z, const MatrixXd& a) const {
    check_head(head, nf);
    MatrixXd out(z.rows(), z.cols());
    for (int c = 0; c < z.cols(); ++c) out.col(c) = spec.step(z.col(c), a.col(c));
    return out;
  }

  VectorXd reward_batch(int head, const MatrixXd& z, const MatrixXd& a) const {
    check_head(head, nf);
    VectorXd r(z.cols());
    for (int c = 0; c < z.cols(); ++c) r(c) = spec.reward(z.col(c), a.col(c));
    return r;
  }

  VectorXd value_batch(int head, const MatrixXd& z, bool) const {
    check_head(head, nv);
    VectorXd v = VectorXd::Zero(z.cols());
    if (value_fn)
      for (int c = 0; c < z.cols(); ++c) v(c) = value_fn(z.col(c));
    return v;
  }

  PolicyParams policy_batch(const MatrixXd& z) const {
    return {MatrixXd::Zero(spec.action_dim, z.cols()), MatrixXd::Zero(spec.action_dim, z.cols())};
  }

  static void check_head(int head, int n) {
    if (head < 0 || head >= n) throw std::out_of_range("ExactModel: head index");
  }
};

/// Smooth random vector field built from shared random Fourier features with
/// per-head coefficients that sum to zero across heads, so the head-averaged
/// field is the zero field.
struct BiasFieldSet {
  MatrixXd omega;               // K x in_dim
  VectorXd phase;               // K
  std::vector<MatrixXd> coeff;  // per head, out_dim x K

  static BiasFieldSet make(int heads, int in_dim, int out_dim, int features, double lengthscale,
                           Rng& rng) {
    BiasFieldSet f;
    f.omega = rng.normal_matrix(features, in_dim, 0.0, 1.0 / lengthscale);
    f.phase = VectorXd(features);
    for (int k = 0; k < features; ++k) f.phase(k) = rng.uniform(0.0, 2.0 * M_PI);
    MatrixXd mean = MatrixXd::Zero(out_dim, features);
    for (int i = 0; i < heads; ++i) {
      f.coeff.push_back(rng.normal_matrix(out_dim, features, 0.0, 1.0 / std::sqrt(features)));
      mean += f.coeff.back();
    }
    mean /= heads;
    for (auto& c : f.coeff) c -= mean;
    return f;
  }

  MatrixXd eval(int head, const MatrixXd& states) const {
    MatrixXd arg = omega * states;  // K x B
    arg.colwise() += phase;
    return coeff[head] * arg.array().cos().matrix();
  }
};

/// Exact simulator plus fixed per-head bias fields on next-state and reward
/// predictions. Scale 0 on a head reproduces the exact model bitwise for that
/// head; the unscaled bias fields average to zero across heads.
struct PerturbedModelEnsemble {
  EnvSpec spec;
  BiasFieldSet state_fields;
  BiasFieldSet reward_fields;
  VectorXd state_scale;   // per head
  VectorXd reward_scale;  // per head
  int nv = 1;
  std::function<double(const VectorXd&)> value_fn;  // empty -> 0

  int num_dynamics() const { return static_cast<int>(state_scale.size()); }
  int num_values() const { return nv; }
  int latent_dim() const { return spec.state_dim; }
  int action_dim() const { return spec.action_dim; }

  MatrixXd dynamics_batch(int head, const MatrixXd& z, const MatrixXd& a) const {
    check_head(head);
    MatrixXd out(z.rows(), z.cols());
    for (int c = 0; c < z.cols(); ++c) out.col(c) = spec.step(z.col(c), a.col(c));
    if (state_scale(head) != 0.0) {
      out += state_scale(head) * state_fields.eval(head, z);
      for (int c = 0; c < z.cols(); ++c) out.col(c) = spec.clamp_state(out.col(c));
    }
    return out;
  }

  VectorXd reward_batch(int head, const MatrixXd& z, const MatrixXd& a) const {
    check_head(head);
    VectorXd r(z.cols());
    for (int c = 0; c < z.cols(); ++c) r(c) = spec.reward(z.col(c), a.col(c));
    if (reward_scale(head) != 0.0)
      r += reward_scale(head) * reward_fields.eval(head, z).row(0).transpose();
    return r;
  }

  VectorXd value_batch(int head, const MatrixXd& z, bool) const {
    if (head < 0 || head >= nv) throw std::out_of_range("PerturbedModelEnsemble: value head");
    VectorXd v = VectorXd::Zero(z.cols());
    if (value_fn)
      for (int c = 0; c < z.cols(); ++c) v(c) = value_fn(z.col(c));
    return v;
  }

  PolicyParams policy_batch(const MatrixXd& z) const {
    return {MatrixXd::Zero(spec.action_dim, z.cols()), MatrixXd::Zero(spec.action_dim, z.cols())};
  }

  void check_head(int head) const {
    if (head < 0 || head >= num_dynamics())
      throw std::out_of_range("PerturbedModelEnsemble: dynamics head");
  }
};

inline PerturbedModelEnsemble make_perturbed_ensemble(const EnvSpec& spec,
                                                      const VectorXd& state_scales,
                                                      const VectorXd& reward_scales,
                                                      uint64_t seed, int features = 16,
                                                      double lengthscale = 2.0) {
  if (state_scales.size() != reward_scales.size() || state_scales.size() < 1)
    throw std::invalid_argument("make_perturbed_ensemble: per-head scale vectors must match");
  if (state_scales.minCoeff() < 0.0 || reward_scales.minCoeff() < 0.0)
    throw std::invalid_argument("make_perturbed_ensemble: scales must be >= 0");
  const int heads = static_cast<int>(state_scales.size());
  Rng rng(seed);
  Rng r_state = rng.derive(1), r_reward = rng.derive(2);
  PerturbedModelEnsemble e;
  e.spec = spec;
  e.state_fields = BiasFieldSet::make(heads, spec.state_dim, spec.state_dim, features,
                                      lengthscale, r_state);
  e.reward_fields = BiasFieldSet::make(heads, spec.state_dim, 1, features, lengthscale, r_reward);
  e.state_scale = state_scales;
  e.reward_scale = reward_scales;
  return e;
}

inline PerturbedModelEnsemble make_perturbed_ensemble(const EnvSpec& spec, double state_scale,
                                                      double reward_scale, int heads,
                                                      uint64_t seed) {
  return make_perturbed_ensemble(spec, VectorXd::Constant(heads, state_scale),
                                 VectorXd::Constant(heads, reward_scale), seed);
}

/// Debug dump of an exact-simulator rollout.
inline CsvTable trajectory_csv(const EnvSpec& spec, const VectorXd& start,
                               const std::vector<VectorXd>& actions) {
  CsvTable t;
  t.header.push_back("step");
  for (int d = 0; d < spec.state_dim; ++d) t.header.push_back("state" + std::to_string(d));
  for (int d = 0; d < spec.action_dim; ++d) t.header.push_back("action" + std::to_string(d));
  t.header.push_back("reward");
  VectorXd s = start;
  for (size_t u = 0; u < actions.size(); ++u) {
    std::vector<double> row;
    row.push_back(static_cast<double>(u));
    for (int d = 0; d < spec.state_dim; ++d) row.push_back(s(d));
    for (int d = 0; d < spec.action_dim; ++d) row.push_back(actions[u](d));
    row.push_back(spec.reward(s, actions[u]));
    t.rows.push_back(std::move(row));
    s = spec.step(s, actions[u]);
  }
  return t;
}

}  // namespace etdmpc
