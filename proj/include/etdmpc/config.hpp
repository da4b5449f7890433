#pragma once

#include "etdmpc/trainer.hpp"

#include <set>
#include <string>
#include <vector>

namespace etdmpc {

/// Full experiment description: env, seeds, model/planner/train blocks.
/// JSON parsing is strict — unknown keys are rejected at every level.
struct RunConfig {
  std::string env = "pendulum";
  std::vector<uint64_t> seeds = {0};
  std::string out_dir = "runs/default";
  bool save_buffer = true;
  ModelConfig model;
  TrainConfig train;
  PlannerConfig acting;
  PlannerConfig reanalyze;
  bool pessimistic_acting = false;  // scope knob: apply beta to the acting objective too

  RunConfig() {
    acting.horizon = 6;
    acting.iterations = 6;
    acting.num_samples = 512;
    acting.num_elites = 64;
    acting.num_policy_trajectories = 24;
    acting.temperature = 0.5;
    acting.objective = ObjectiveMode::aggregate_horizon();
    reanalyze.horizon = 3;
    reanalyze.iterations = 6;
    reanalyze.num_samples = 64;
    reanalyze.num_elites = 8;
    reanalyze.num_policy_trajectories = 3;
    reanalyze.temperature = 0.5;
  }

  void validate() const {
    const EnvSpec spec = env_spec_by_name(env);  // throws on unknown env
    if (seeds.empty()) throw std::invalid_argument("RunConfig: need at least one seed");
    ModelConfig mc = model;  // obs/action dims come from the env at run time
    mc.obs_dim = spec.obs_dim;
    mc.action_dim = spec.action_dim;
    mc.validate();
    train.validate();
    acting.validate();
    reanalyze.validate();
  }

  /// Planner configs as the trainer will actually use them.
  PlannerConfig resolved_acting() const {
    PlannerConfig p = acting;
    if (pessimistic_acting) p.objective = ObjectiveMode::pessimistic(train.beta);
    return p;
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw std::invalid_argument("config: unknown key \"" + key + "\" in " + where);
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline ObjectiveMode objective_from_json(const nlohmann::json& j, const std::string& where) {
  check_keys(j, {"kind", "beta", "head_i", "head_j"}, where);
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "aggregate") return ObjectiveMode::aggregate_horizon();
  if (kind == "ensemble_mean" || kind == "final") return ObjectiveMode::ensemble_mean();
  if (kind == "pessimistic") return ObjectiveMode::pessimistic(j.at("beta").get<double>());
  if (kind == "single_head")
    return ObjectiveMode::single_head(j.value("head_i", 0), j.value("head_j", 0));
  throw std::invalid_argument("config: unknown objective kind \"" + kind + "\" in " + where);
}

inline nlohmann::json objective_to_json(const ObjectiveMode& m) {
  switch (m.kind) {
    case ObjectiveMode::Kind::SingleHead:
      return {{"kind", "single_head"}, {"head_i", m.head_i}, {"head_j", m.head_j}};
    case ObjectiveMode::Kind::EnsembleMean: return {{"kind", "ensemble_mean"}};
    case ObjectiveMode::Kind::AggregateHorizon: return {{"kind", "aggregate"}};
    case ObjectiveMode::Kind::Pessimistic: return {{"kind", "pessimistic"}, {"beta", m.beta}};
  }
  throw std::logic_error("objective_to_json: bad kind");
}

}  // namespace detail

inline ModelConfig model_config_from_block(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"latent_dim", "mlp_dim", "mlp_layers", "encoder_dim", "encoder_layers",
                      "simnorm_dim", "dynamics_heads", "value_heads", "value_bins", "value_min",
                      "value_max", "log_std_min", "log_std_max"},
                     "model");
  ModelConfig c;
  detail::maybe(j, "latent_dim", c.latent_dim);
  detail::maybe(j, "mlp_dim", c.mlp_dim);
  detail::maybe(j, "mlp_layers", c.mlp_layers);
  detail::maybe(j, "encoder_dim", c.encoder_dim);
  detail::maybe(j, "encoder_layers", c.encoder_layers);
  detail::maybe(j, "simnorm_dim", c.simnorm_dim);
  detail::maybe(j, "dynamics_heads", c.dynamics_heads);
  detail::maybe(j, "value_heads", c.value_heads);
  detail::maybe(j, "value_bins", c.value_bins);
  detail::maybe(j, "value_min", c.value_min);
  detail::maybe(j, "value_max", c.value_max);
  detail::maybe(j, "log_std_min", c.log_std_min);
  detail::maybe(j, "log_std_max", c.log_std_max);
  return c;
}

inline nlohmann::json model_config_block(const ModelConfig& c) {
  return {{"latent_dim", c.latent_dim},       {"mlp_dim", c.mlp_dim},
          {"mlp_layers", c.mlp_layers},       {"encoder_dim", c.encoder_dim},
          {"encoder_layers", c.encoder_layers}, {"simnorm_dim", c.simnorm_dim},
          {"dynamics_heads", c.dynamics_heads}, {"value_heads", c.value_heads},
          {"value_bins", c.value_bins},       {"value_min", c.value_min},
          {"value_max", c.value_max},         {"log_std_min", c.log_std_min},
          {"log_std_max", c.log_std_max}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::check_keys(
      j, {"updates_per_env_step", "reanalyze_interval", "reanalyze_batch",  "batch_size",
          "train_horizon",        "learning_rate",      "encoder_lr_scale", "grad_clip_norm",
          "ema_tau",              "rho",                "entropy_coeff",    "gamma_min",
          "gamma_max",            "beta",               "w_consistency",    "w_reward",
          "w_value",              "w_policy",           "value_target_all_heads",
          "buffer_capacity",      "buffer_insertion",   "seed_steps",       "reanalyze_warmup",
          "total_env_steps",      "eval_interval",      "eval_episodes",    "early_stop_return"},
      "train");
  TrainConfig c;
  detail::maybe(j, "updates_per_env_step", c.utd);
  detail::maybe(j, "reanalyze_interval", c.reanalyze_interval);
  detail::maybe(j, "reanalyze_batch", c.reanalyze_batch);
  detail::maybe(j, "batch_size", c.batch_size);
  detail::maybe(j, "train_horizon", c.train_horizon);
  detail::maybe(j, "learning_rate", c.learning_rate);
  detail::maybe(j, "encoder_lr_scale", c.encoder_lr_scale);
  detail::maybe(j, "grad_clip_norm", c.grad_clip_norm);
  detail::maybe(j, "ema_tau", c.tau_ema);
  detail::maybe(j, "rho", c.rho);
  detail::maybe(j, "entropy_coeff", c.entropy_coeff);
  detail::maybe(j, "gamma_min", c.gamma_min);
  detail::maybe(j, "gamma_max", c.gamma_max);
  detail::maybe(j, "beta", c.beta);
  detail::maybe(j, "w_consistency", c.w_consistency);
  detail::maybe(j, "w_reward", c.w_reward);
  detail::maybe(j, "w_value", c.w_value);
  detail::maybe(j, "w_policy", c.w_policy);
  detail::maybe(j, "value_target_all_heads", c.value_target_all_heads);
  detail::maybe(j, "buffer_capacity", c.buffer_capacity);
  if (j.contains("buffer_insertion"))
    c.buffer_mode = buffer_mode_from_name(j.at("buffer_insertion").get<std::string>());
  detail::maybe(j, "seed_steps", c.seed_steps);
  detail::maybe(j, "reanalyze_warmup", c.reanalyze_warmup);
  detail::maybe(j, "total_env_steps", c.total_env_steps);
  detail::maybe(j, "eval_interval", c.eval_interval);
  detail::maybe(j, "eval_episodes", c.eval_episodes);
  detail::maybe(j, "early_stop_return", c.early_stop_return);
  return c;
}

inline nlohmann::json train_config_block(const TrainConfig& c) {
  nlohmann::json j{{"updates_per_env_step", c.utd},
                   {"reanalyze_interval", c.reanalyze_interval},
                   {"reanalyze_batch", c.reanalyze_batch},
                   {"batch_size", c.batch_size},
                   {"train_horizon", c.train_horizon},
                   {"learning_rate", c.learning_rate},
                   {"encoder_lr_scale", c.encoder_lr_scale},
                   {"grad_clip_norm", c.grad_clip_norm},
                   {"ema_tau", c.tau_ema},
                   {"rho", c.rho},
                   {"entropy_coeff", c.entropy_coeff},
                   {"gamma_min", c.gamma_min},
                   {"gamma_max", c.gamma_max},
                   {"beta", c.beta},
                   {"w_consistency", c.w_consistency},
                   {"w_reward", c.w_reward},
                   {"w_value", c.w_value},
                   {"w_policy", c.w_policy},
                   {"value_target_all_heads", c.value_target_all_heads},
                   {"buffer_capacity", c.buffer_capacity},
                   {"buffer_insertion", buffer_mode_name(c.buffer_mode)},
                   {"seed_steps", c.seed_steps},
                   {"reanalyze_warmup", c.reanalyze_warmup},
                   {"total_env_steps", c.total_env_steps},
                   {"eval_interval", c.eval_interval},
                   {"eval_episodes", c.eval_episodes}};
  if (std::isfinite(c.early_stop_return)) j["early_stop_return"] = c.early_stop_return;
  return j;
}

inline PlannerConfig planner_config_from_json(const nlohmann::json& j, const std::string& where,
                                              const PlannerConfig& base) {
  detail::check_keys(j,
                     {"horizon", "iterations", "num_samples", "num_elites",
                      "num_policy_trajectories", "temperature", "std_min", "std_max", "objective"},
                     where);
  PlannerConfig c = base;
  detail::maybe(j, "horizon", c.horizon);
  detail::maybe(j, "iterations", c.iterations);
  detail::maybe(j, "num_samples", c.num_samples);
  detail::maybe(j, "num_elites", c.num_elites);
  detail::maybe(j, "num_policy_trajectories", c.num_policy_trajectories);
  detail::maybe(j, "temperature", c.temperature);
  detail::maybe(j, "std_min", c.sigma_min);
  detail::maybe(j, "std_max", c.sigma_max);
  if (j.contains("objective"))
    c.objective = detail::objective_from_json(j.at("objective"), where + ".objective");
  return c;
}

inline nlohmann::json planner_config_block(const PlannerConfig& c) {
  return {{"horizon", c.horizon},
          {"iterations", c.iterations},
          {"num_samples", c.num_samples},
          {"num_elites", c.num_elites},
          {"num_policy_trajectories", c.num_policy_trajectories},
          {"temperature", c.temperature},
          {"std_min", c.sigma_min},
          {"std_max", c.sigma_max},
          {"objective", detail::objective_to_json(c.objective)}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"env", "seeds", "out_dir", "save_buffer", "model", "train",
                      "acting_planner", "reanalyze_planner", "pessimistic_acting"},
                     "config");
  RunConfig c;
  detail::maybe(j, "env", c.env);
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  detail::maybe(j, "out_dir", c.out_dir);
  detail::maybe(j, "save_buffer", c.save_buffer);
  if (j.contains("model")) c.model = model_config_from_block(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("acting_planner"))
    c.acting = planner_config_from_json(j.at("acting_planner"), "acting_planner", c.acting);
  if (j.contains("reanalyze_planner"))
    c.reanalyze =
        planner_config_from_json(j.at("reanalyze_planner"), "reanalyze_planner", c.reanalyze);
  detail::maybe(j, "pessimistic_acting", c.pessimistic_acting);
  c.validate();
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"env", c.env},
          {"seeds", c.seeds},
          {"out_dir", c.out_dir},
          {"save_buffer", c.save_buffer},
          {"model", model_config_block(c.model)},
          {"train", train_config_block(c.train)},
          {"acting_planner", planner_config_block(c.acting)},
          {"reanalyze_planner", planner_config_block(c.reanalyze)},
          {"pessimistic_acting", c.pessimistic_acting}};
}

// ---- presets ----

/// Table-2 EfficientTDMPC column at toy model scale: UTD 4, reanalyze
/// interval 2, H6 mean-aggregated acting, pessimistic reduced-budget reanalyze.
inline RunConfig preset_efficienttdmpc_utd4() {
  RunConfig c;
  c.out_dir = "runs/efficienttdmpc-utd4";
  c.train.utd = 4;
  c.train.reanalyze_interval = 2;
  return c;
}

/// Table-2 BMPC column: UTD 1, interval 10, H3 terminal-mean acting, beta 0,
/// full acting-budget reanalyze, per-episode insertion.
inline RunConfig preset_bmpc_like() {
  RunConfig c;
  c.out_dir = "runs/bmpc-like";
  c.train.utd = 1;
  c.train.reanalyze_interval = 10;
  c.train.beta = 0.0;
  c.train.buffer_mode = BufferMode::per_episode;
  c.acting.horizon = 3;
  c.acting.objective = ObjectiveMode::ensemble_mean();
  c.reanalyze.num_samples = 512;
  c.reanalyze.num_elites = 64;
  c.reanalyze.num_policy_trajectories = 24;
  return c;
}

/// Small single-core configuration sized so pendulum swing-up learns in a few
/// thousand env steps: tiny model, reduced planner budget, UTD 2.
inline RunConfig preset_pendulum_desk() {
  RunConfig c;
  c.env = "pendulum";
  c.out_dir = "runs/pendulum-desk";
  c.seeds = {0, 1, 2};
  c.model.latent_dim = 16;
  c.model.mlp_dim = 32;
  c.model.encoder_dim = 32;
  c.model.simnorm_dim = 8;
  c.model.dynamics_heads = 4;
  c.model.value_heads = 2;
  c.model.value_bins = 51;
  c.model.value_min = -5.0;
  c.model.value_max = 40.0;
  c.train.utd = 2;
  c.train.reanalyze_interval = 5;
  c.train.reanalyze_batch = 8;
  c.train.batch_size = 48;
  c.train.gamma_max = 0.97;
  c.train.beta = 10.0;
  c.train.buffer_capacity = 30000;
  c.train.seed_steps = 400;
  c.train.reanalyze_warmup = 1000;
  c.train.total_env_steps = 5000;
  c.train.eval_interval = 1000;
  c.train.eval_episodes = 2;
  c.acting.horizon = 6;
  c.acting.iterations = 3;
  c.acting.num_samples = 24;
  c.acting.num_elites = 6;
  c.acting.num_policy_trajectories = 2;
  c.acting.objective = ObjectiveMode::aggregate_horizon();
  c.reanalyze.horizon = 3;
  c.reanalyze.iterations = 3;
  c.reanalyze.num_samples = 64;
  c.reanalyze.num_elites = 8;
  c.reanalyze.num_policy_trajectories = 3;
  return c;
}

inline RunConfig preset_by_name(const std::string& name) {
  if (name == "efficienttdmpc-utd4") return preset_efficienttdmpc_utd4();
  if (name == "bmpc-like") return preset_bmpc_like();
  if (name == "pendulum-desk") return preset_pendulum_desk();
  throw std::invalid_argument("unknown preset: " + name);
}

}  // namespace etdmpc
