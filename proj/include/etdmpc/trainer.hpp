#pragma once

#include "etdmpc/envs.hpp"
#include "etdmpc/replay.hpp"

#include <chrono>
#include <cmath>
#include <optional>

namespace etdmpc {

/// Episode-length discount heuristic: gamma = clamp(1 - 5/L, gamma_min, gamma_max).
inline double discount_for_episode_length(int length, double gamma_min, double gamma_max) {
  if (length < 1) throw std::invalid_argument("discount_for_episode_length: length >= 1");
  return std::clamp(1.0 - 5.0 / static_cast<double>(length), gamma_min, gamma_max);
}

struct TrainConfig {
  int utd = 4;                // gradient updates per env step (0 = frozen-model debug mode)
  int reanalyze_interval = 2;  // env steps between reanalyze passes
  int reanalyze_batch = 20;
  int batch_size = 64;
  int train_horizon = 3;  // unroll depth; segments span train_horizon + 1 transitions
  double learning_rate = 3e-4;
  double encoder_lr_scale = 0.3;
  double grad_clip_norm = 20.0;
  double tau_ema = 0.01;
  double rho = 0.5;
  double entropy_coeff = 1e-4;
  double gamma_min = 0.95;
  double gamma_max = 0.995;
  double beta = 10.0;  // reanalyze pessimism coefficient
  uint64_t seed = 0;
  double w_consistency = 20.0;
  double w_reward = 0.1;
  double w_value = 0.1;
  double w_policy = 1.0;
  bool value_target_all_heads = true;  // average all dynamics heads in the 1-step target
  int buffer_capacity = 100000;
  BufferMode buffer_mode = BufferMode::per_step;
  int seed_steps = 500;         // uniform-random acting before planning starts
  int reanalyze_warmup = 1000;  // buffer size required before reanalyze passes run
  long total_env_steps = 10000;
  int eval_interval = 2000;
  int eval_episodes = 5;
  double early_stop_return = std::numeric_limits<double>::infinity();

  void validate() const {
    if (utd < 0) throw std::invalid_argument("TrainConfig: utd >= 0");
    if (reanalyze_interval < 1) throw std::invalid_argument("TrainConfig: reanalyze_interval >= 1");
    if (reanalyze_batch < 1 || batch_size < 1 || train_horizon < 1 || eval_interval < 1 ||
        eval_episodes < 1 || total_env_steps < 1)
      throw std::invalid_argument("TrainConfig: counts must be >= 1");
    if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("TrainConfig: rho in (0, 1]");
    if (!(tau_ema > 0.0 && tau_ema <= 1.0)) throw std::invalid_argument("TrainConfig: tau_ema");
    if (!(gamma_min <= gamma_max && gamma_max < 1.0))
      throw std::invalid_argument("TrainConfig: gamma bounds");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate > 0");
    if (beta < 0.0) throw std::invalid_argument("TrainConfig: beta >= 0");
    if (seed_steps < 0 || reanalyze_warmup < 0)
      throw std::invalid_argument("TrainConfig: warmup counts >= 0");
    if (buffer_capacity < train_horizon + 1)
      throw std::invalid_argument("TrainConfig: buffer_capacity too small for train_horizon");
  }
};

struct LossReport {
  double consistency_loss = 0.0;
  double reward_loss = 0.0;
  double value_loss = 0.0;
  double policy_kl = 0.0;
  double policy_entropy = 0.0;
  double total_loss = 0.0;  // weighted sum actually differentiated
  double grad_norm = 0.0;   // post-clip global norm
  long update_index = 0;
};

/// Column-batched training segments: obs[u] for u = 0..H, actions/rewards for
/// u = 0..H-1, and the stored policy target of the first transition.
struct TrainBatch {
  std::vector<MatrixXd> obs;
  std::vector<MatrixXd> act;
  std::vector<VectorXd> rew;
  MatrixXd target_mu;
  MatrixXd target_sigma;

  int batch() const { return static_cast<int>(obs.empty() ? 0 : obs[0].cols()); }
  int unroll() const { return static_cast<int>(act.size()); }
};

inline TrainBatch pack_batch(const std::vector<std::vector<const Transition*>>& seqs) {
  const int B = static_cast<int>(seqs.size());
  const int span = static_cast<int>(seqs.at(0).size());
  const int H = span - 1;
  const int obs_dim = static_cast<int>(seqs[0][0]->obs.size());
  const int act_dim = static_cast<int>(seqs[0][0]->action.size());
  TrainBatch b;
  b.obs.assign(span, MatrixXd(obs_dim, B));
  b.act.assign(H, MatrixXd(act_dim, B));
  b.rew.assign(H, VectorXd(B));
  b.target_mu.resize(act_dim, B);
  b.target_sigma.resize(act_dim, B);
  for (int c = 0; c < B; ++c) {
    for (int u = 0; u < span; ++u) b.obs[u].col(c) = seqs[c][u]->obs;
    for (int u = 0; u < H; ++u) {
      b.act[u].col(c) = seqs[c][u]->action;
      b.rew[u](c) = seqs[c][u]->reward;
    }
    b.target_mu.col(c) = seqs[c][0]->target_mu;
    b.target_sigma.col(c) = seqs[c][0]->target_sigma;
  }
  return b;
}

inline TrainBatch assemble_batch(const ReplayBuffer& buffer, int batch_size, int train_horizon,
                                 Rng& rng) {
  return pack_batch(buffer.sample_sequences(batch_size, train_horizon + 1, rng));
}

/// Loss suite over one batch; `y` is the frozen per-column value target.
///   consistency: ||f_i-unroll - encoded truth||^2 per depth, weight rho^u,
///                gradient through both branches;
///   reward:      two-hot CE along each head's imagined latents, weight rho^u;
///   value:       two-hot CE of each online head at z_0 against y;
///   policy:      KL(stored target Gaussian || pi(.|z_0)) in pre-squash space
///                minus entropy bonus, encoder-detached.
/// Reported per-term losses exclude the w_* weights; total_loss includes them.
inline LossReport loss_and_grad(const WorldModel& m, const TrainBatch& b, const VectorXd& y,
                                const TrainConfig& cfg, ModelGrads* grads) {
  const int Hn = b.unroll();
  const int B = b.batch();
  const int Dz = m.latent_dim();
  const int Da = m.action_dim();
  const int G = m.cfg.simnorm_dim;
  const int Nf = m.num_dynamics();
  const int Nv = m.num_values();
  if (Hn < 1 || B < 1) throw std::invalid_argument("loss_and_grad: empty batch");
  if (y.size() != B) throw std::invalid_argument("loss_and_grad: target size mismatch");

  std::vector<double> w(Hn);
  for (int u = 0; u < Hn; ++u) w[u] = std::pow(cfg.rho, u);
  const double cnorm = 1.0 / (static_cast<double>(Nf) * Hn * B);

  // Encoder forwards for every depth.
  std::vector<MlpCache> enc_cache(Hn + 1);
  std::vector<MatrixXd> z_enc(Hn + 1);
  for (int u = 0; u <= Hn; ++u) {
    MatrixXd pre = mlp_forward(m.encoder, b.obs[u], &enc_cache[u]);
    simnorm_inplace(pre, G);
    z_enc[u] = std::move(pre);
  }

  // Per-head dynamics unrolls from the shared first latent.
  std::vector<std::vector<MlpCache>> dyn_cache(Nf, std::vector<MlpCache>(Hn));
  std::vector<std::vector<MatrixXd>> zhat(Nf, std::vector<MatrixXd>(Hn + 1));
  for (int i = 0; i < Nf; ++i) {
    zhat[i][0] = z_enc[0];
    for (int u = 0; u < Hn; ++u) {
      MatrixXd out =
          mlp_forward(m.dynamics[i], WorldModel::stack(zhat[i][u], b.act[u]), &dyn_cache[i][u]);
      simnorm_inplace(out, G);
      zhat[i][u + 1] = std::move(out);
    }
  }

  std::vector<MatrixXd> dz_enc;
  std::vector<std::vector<MatrixXd>> dzhat;
  if (grads) {
    dz_enc.assign(Hn + 1, MatrixXd::Zero(Dz, B));
    dzhat.assign(Nf, std::vector<MatrixXd>(Hn + 1, MatrixXd::Zero(Dz, B)));
  }

  LossReport rep;

  // Reward loss, backpropagated immediately into each imagined latent.
  for (int i = 0; i < Nf; ++i) {
    for (int u = 0; u < Hn; ++u) {
      MlpCache cache;
      MatrixXd rlog = mlp_forward(m.reward, WorldModel::stack(zhat[i][u], b.act[u]),
                                  grads ? &cache : nullptr);
      MatrixXd dlog;
      const double ce = m.codec.cross_entropy_batch(rlog, b.rew[u], grads ? &dlog : nullptr,
                                                    cfg.w_reward * w[u] * cnorm);
      rep.reward_loss += w[u] * cnorm * ce;
      if (grads) {
        MatrixXd dstack = mlp_backward(m.reward, cache, dlog, grads->reward);
        dzhat[i][u] += dstack.topRows(Dz);
      }
    }
  }

  // Latent consistency, gradient through prediction and encoder target alike.
  for (int i = 0; i < Nf; ++i) {
    for (int u = 0; u < Hn; ++u) {
      const MatrixXd diff = zhat[i][u + 1] - z_enc[u + 1];
      rep.consistency_loss += w[u] * cnorm * diff.squaredNorm();
      if (grads) {
        const MatrixXd d = (2.0 * cfg.w_consistency * w[u] * cnorm) * diff;
        dzhat[i][u + 1] += d;
        dz_enc[u + 1] -= d;
      }
    }
  }

  // Value loss at the first latent against the frozen target.
  for (int j = 0; j < Nv; ++j) {
    MlpCache cache;
    MatrixXd vlog = mlp_forward(m.value[j], z_enc[0], grads ? &cache : nullptr);
    MatrixXd dlog;
    const double scale = cfg.w_value / (static_cast<double>(Nv) * B);
    const double ce = m.codec.cross_entropy_batch(vlog, y, grads ? &dlog : nullptr, scale);
    rep.value_loss += ce / (static_cast<double>(Nv) * B);
    if (grads) dz_enc[0] += mlp_backward(m.value[j], cache, dlog, grads->value[j]);
  }

  // Policy distillation at the first latent, detached from the encoder.
  {
    MlpCache cache;
    MatrixXd pol = mlp_forward(m.policy, z_enc[0], grads ? &cache : nullptr);
    const MatrixXd mu = pol.topRows(Da);
    const MatrixXd ls_raw = pol.bottomRows(Da);
    const MatrixXd ls = clamp(MatrixXd(ls_raw), m.cfg.log_std_min, m.cfg.log_std_max);
    const MatrixXd var = (2.0 * ls).array().exp().matrix();
    const MatrixXd diff = b.target_mu - mu;
    const MatrixXd tvar = b.target_sigma.array().square().matrix();
    const double kl_sum = (ls.array() - b.target_sigma.array().log() +
                           (tvar.array() + diff.array().square()) / (2.0 * var.array()) - 0.5)
                              .sum();
    rep.policy_kl = kl_sum / B;
    rep.policy_entropy =
        ls.sum() / B + 0.5 * Da * std::log(2.0 * M_PI * std::exp(1.0));
    if (grads) {
      const MatrixXd mask = (ls_raw.array() >= m.cfg.log_std_min &&
                             ls_raw.array() <= m.cfg.log_std_max)
                                .cast<double>()
                                .matrix();
      MatrixXd dpol(2 * Da, B);
      dpol.topRows(Da) = (cfg.w_policy / B) * (-diff.array() / var.array()).matrix();
      dpol.bottomRows(Da) =
          ((cfg.w_policy / B) *
           (1.0 - (tvar.array() + diff.array().square()) / var.array() - cfg.entropy_coeff) *
           mask.array())
              .matrix();
      mlp_backward(m.policy, cache, dpol, grads->policy);  // dX discarded: detached
    }
  }

  if (grads) {
    // Dynamics chains back to the shared first latent, then the encoders.
    for (int i = 0; i < Nf; ++i) {
      for (int u = Hn - 1; u >= 0; --u) {
        MatrixXd dpre = simnorm_backward(zhat[i][u + 1], dzhat[i][u + 1], G);
        MatrixXd dstack = mlp_backward(m.dynamics[i], dyn_cache[i][u], dpre, grads->dynamics[i]);
        dzhat[i][u] += dstack.topRows(Dz);
      }
      dz_enc[0] += dzhat[i][0];
    }
    for (int u = 0; u <= Hn; ++u) {
      MatrixXd dpre = simnorm_backward(z_enc[u], dz_enc[u], G);
      mlp_backward(m.encoder, enc_cache[u], dpre, grads->encoder);
    }
  }

  rep.total_loss = cfg.w_consistency * rep.consistency_loss + cfg.w_reward * rep.reward_loss +
                   cfg.w_value * rep.value_loss +
                   cfg.w_policy * (rep.policy_kl - cfg.entropy_coeff * rep.policy_entropy);
  return rep;
}

/// One gradient step on a freshly sampled batch: clip, encoder scale, Adam,
/// then the EMA target update. A non-finite loss aborts before any parameter
/// change and names the offending term.
inline LossReport update_step(ReplayBuffer& buffer, WorldModel& model, ModelOptimizer& opt,
                              const TrainConfig& cfg, double gamma, Rng& rng) {
  TrainBatch batch = assemble_batch(buffer, cfg.batch_size, cfg.train_horizon, rng);
  MatrixXd z0 = model.encode_batch(batch.obs[0]);
  VectorXd y = value_target_batch(model, z0, gamma, rng, cfg.value_target_all_heads);
  ModelGrads grads = ModelGrads::make(model);
  LossReport rep = loss_and_grad(model, batch, y, cfg, &grads);
  auto check = [](double v, const char* term) {
    if (!std::isfinite(v)) throw NumericsError(std::string("update_step: non-finite ") + term);
  };
  check(rep.consistency_loss, "consistency_loss");
  check(rep.reward_loss, "reward_loss");
  check(rep.value_loss, "value_loss");
  check(rep.policy_kl, "policy_kl");
  check(rep.policy_entropy, "policy_entropy");
  rep.grad_norm = opt.step(model, grads, cfg.learning_rate, cfg.encoder_lr_scale,
                           cfg.grad_clip_norm);
  model.ema_update(cfg.tau_ema);
  return rep;
}

struct ActStep {
  Transition transition;
  std::optional<PlanDistribution> warm;  // shifted warm start; empty when the episode ended
};

/// Plan from the current observation, sample the expert policy, step the env,
/// and package the transition with its stored policy target.
inline ActStep act_step(Env& env, const WorldModel& model, const PlannerConfig& cfg,
                        const std::optional<PlanDistribution>& warm, long episode_id, Rng& rng) {
  Transition tr;
  tr.env_state = env.state;
  tr.obs = env.spec.observe(env.state);
  MatrixXd z = model.encode_batch(tr.obs);
  PlanDistribution p = plan(model, VectorXd(z.col(0)), cfg, warm ? &*warm : nullptr, rng);
  Action a = expert_policy(p).sample(rng);
  tr.action = a.values;
  tr.target_mu = p.mu.col(0);
  tr.target_sigma = p.sigma.col(0);
  tr.episode_id = episode_id;
  tr.step_index = env.t;
  Env::StepResult sr = env.step(a);
  tr.reward = sr.reward;
  tr.done = sr.done;
  ActStep out;
  if (!sr.done) out.warm = shift_warm_start(p, cfg.sigma_max);
  out.transition = std::move(tr);
  return out;
}

struct EvalResult {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> returns;
};

/// Deterministic-mean acting over full episodes; `latent_of` maps the live env
/// to the planning latent (learned encoder, or raw state for exact models).
template <class M, class LatentFn>
EvalResult evaluate_policy_with(const EnvSpec& spec, const M& model, const PlannerConfig& cfg,
                                int episodes, Rng& rng, LatentFn&& latent_of) {
  EvalResult out;
  for (int e = 0; e < episodes; ++e) {
    Env env(spec);
    Rng er = rng.derive(static_cast<uint64_t>(e));
    env.reset(er);
    std::optional<PlanDistribution> warm;
    double total = 0.0;
    while (true) {
      VectorXd z = latent_of(env);
      PlanDistribution p = plan(model, z, cfg, warm ? &*warm : nullptr, er);
      Env::StepResult sr = env.step(expert_policy(p).mean());
      total += sr.reward;
      if (sr.done) break;
      warm = shift_warm_start(p, cfg.sigma_max);
    }
    out.returns.push_back(total);
  }
  const int n = static_cast<int>(out.returns.size());
  for (double r : out.returns) out.mean += r;
  out.mean /= n;
  if (n > 1) {
    double ss = 0.0;
    for (double r : out.returns) ss += (r - out.mean) * (r - out.mean);
    out.stddev = std::sqrt(ss / (n - 1));
  }
  return out;
}

inline EvalResult evaluate_policy(const EnvSpec& spec, const WorldModel& model,
                                  const PlannerConfig& cfg, int episodes, Rng& rng) {
  return evaluate_policy_with(spec, model, cfg, episodes, rng, [&](const Env& env) {
    return VectorXd(model.encode_batch(env.spec.observe(env.state)).col(0));
  });
}

struct RunResult {
  CsvTable metrics;
  std::vector<double> eval_steps;
  std::vector<double> eval_means;
  std::vector<double> eval_stds;
  double final_eval_mean = std::numeric_limits<double>::quiet_NaN();
  double best_eval_mean = -std::numeric_limits<double>::infinity();
  long env_steps_run = 0;
  long updates = 0;
  long reanalyze_refreshed = 0;
  long reanalyze_skipped = 0;
  double reanalyze_ms = 0.0;
  double total_ms = 0.0;
  bool early_stopped = false;
  WorldModel model;
  std::optional<ReplayBuffer> buffer;
};

/// The acting/learning loop: plan-act-insert each env step, `utd` gradient
/// updates per step, a reanalyze pass every `reanalyze_interval` steps once
/// the buffer is warm, and periodic deterministic evaluations.
inline RunResult run(const EnvSpec& spec, ModelConfig mcfg, PlannerConfig acting,
                     PlannerConfig reanalyze, TrainConfig cfg) {
  using clock = std::chrono::steady_clock;
  const auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };
  cfg.validate();
  const double gamma =
      discount_for_episode_length(spec.episode_length, cfg.gamma_min, cfg.gamma_max);
  acting.gamma = gamma;
  reanalyze.gamma = gamma;
  reanalyze.objective = ObjectiveMode::pessimistic(cfg.beta);
  acting.validate();
  reanalyze.validate();
  mcfg.obs_dim = spec.obs_dim;
  mcfg.action_dim = spec.action_dim;

  Rng root(cfg.seed);
  Rng r_model = root.derive(0x11);
  Rng r_env = root.derive(0x12);
  Rng r_act = root.derive(0x13);
  Rng r_update = root.derive(0x14);
  Rng r_reanalyze = root.derive(0x15);
  Rng r_eval = root.derive(0x16);

  RunResult res;
  res.model = WorldModel::make(mcfg, r_model);
  ModelOptimizer opt = ModelOptimizer::make(res.model);
  ReplayBuffer buffer(cfg.buffer_capacity, cfg.buffer_mode);
  Env env(spec);
  env.reset(r_env);
  std::optional<PlanDistribution> warm;
  long episode = 0;
  const int span = cfg.train_horizon + 1;

  res.metrics.header = {"env_step",    "eval_return_mean", "eval_return_std",
                        "consistency_loss", "reward_loss",  "value_loss",
                        "policy_kl",   "policy_entropy",   "grad_norm",
                        "updates",     "reanalyze_refreshed", "reanalyze_skipped",
                        "reanalyze_ms", "wall_ms"};

  double acc_c = 0, acc_r = 0, acc_v = 0, acc_kl = 0, acc_ent = 0, acc_gn = 0;
  long acc_n = 0;
  const auto t_start = clock::now();

  for (long step = 1; step <= cfg.total_env_steps; ++step) {
    if (step <= cfg.seed_steps) {
      Transition tr;
      tr.env_state = env.state;
      tr.obs = spec.observe(env.state);
      VectorXd a(spec.action_dim);
      for (int d = 0; d < spec.action_dim; ++d) a(d) = r_act.uniform(-1.0, 1.0);
      Action act(a);
      tr.action = act.values;
      tr.target_mu = act.values;
      tr.target_sigma = VectorXd::Ones(spec.action_dim);
      tr.episode_id = episode;
      tr.step_index = env.t;
      Env::StepResult sr = env.step(act);
      tr.reward = sr.reward;
      tr.done = sr.done;
      buffer.insert(std::move(tr));
      if (sr.done) {
        ++episode;
        env.reset(r_env);
        warm.reset();
      }
    } else {
      ActStep astep = act_step(env, res.model, acting, warm, episode, r_act);
      const bool done = astep.transition.done;
      buffer.insert(std::move(astep.transition));
      warm = std::move(astep.warm);
      if (done) {
        ++episode;
        env.reset(r_env);
      }
    }
    res.env_steps_run = step;

    if (step > cfg.seed_steps && buffer.size() >= std::max(span, cfg.batch_size)) {
      for (int u = 0; u < cfg.utd; ++u) {
        LossReport rep = update_step(buffer, res.model, opt, cfg, gamma, r_update);
        ++res.updates;
        acc_c += rep.consistency_loss;
        acc_r += rep.reward_loss;
        acc_v += rep.value_loss;
        acc_kl += rep.policy_kl;
        acc_ent += rep.policy_entropy;
        acc_gn += rep.grad_norm;
        ++acc_n;
      }
    }

    if (step % cfg.reanalyze_interval == 0 &&
        buffer.size() >= std::max(cfg.reanalyze_warmup, 1)) {
      const auto t0 = clock::now();
      ReanalyzeStats st =
          reanalyze_pass(buffer, res.model, reanalyze, cfg.reanalyze_batch, r_reanalyze);
      res.reanalyze_ms += ms_since(t0);
      res.reanalyze_refreshed += st.refreshed;
      res.reanalyze_skipped += st.skipped;
    }

    if (step % cfg.eval_interval == 0 || step == cfg.total_env_steps) {
      Rng er = r_eval.derive(static_cast<uint64_t>(step));
      EvalResult ev = evaluate_policy(spec, res.model, acting, cfg.eval_episodes, er);
      res.eval_steps.push_back(static_cast<double>(step));
      res.eval_means.push_back(ev.mean);
      res.eval_stds.push_back(ev.stddev);
      res.final_eval_mean = ev.mean;
      res.best_eval_mean = std::max(res.best_eval_mean, ev.mean);
      const double inv = acc_n > 0 ? 1.0 / acc_n : 0.0;
      res.metrics.rows.push_back({static_cast<double>(step), ev.mean, ev.stddev, acc_c * inv,
                                  acc_r * inv, acc_v * inv, acc_kl * inv, acc_ent * inv,
                                  acc_gn * inv, static_cast<double>(acc_n),
                                  static_cast<double>(res.reanalyze_refreshed),
                                  static_cast<double>(res.reanalyze_skipped), res.reanalyze_ms,
                                  ms_since(t_start)});
      acc_c = acc_r = acc_v = acc_kl = acc_ent = acc_gn = 0.0;
      acc_n = 0;
      if (ev.mean >= cfg.early_stop_return) {
        res.early_stopped = true;
        break;
      }
    }
  }

  res.total_ms = ms_since(t_start);
  res.buffer.emplace(std::move(buffer));
  return res;
}

}  // namespace etdmpc
