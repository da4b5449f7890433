#pragma once

#include "etdmpc/codec.hpp"
#include "etdmpc/io.hpp"
#include "etdmpc/nn.hpp"

#include "json.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace etdmpc {

struct ModelConfig {
  int obs_dim = 0;
  int action_dim = 0;
  int latent_dim = 64;
  int mlp_dim = 128;
  int mlp_layers = 2;
  int encoder_dim = 256;
  int encoder_layers = 2;
  int simnorm_dim = 8;
  int dynamics_heads = 4;
  int value_heads = 2;
  int value_bins = 101;
  double value_min = -10.0;
  double value_max = 10.0;
  double log_std_min = -3.0;
  double log_std_max = 1.0;

  void validate() const {
    if (obs_dim < 1 || action_dim < 1) throw std::invalid_argument("ModelConfig: obs/action dims");
    if (latent_dim < 1 || latent_dim % simnorm_dim != 0)
      throw std::invalid_argument("ModelConfig: latent_dim must be a positive multiple of simnorm_dim");
    if (dynamics_heads < 1 || value_heads < 1)
      throw std::invalid_argument("ModelConfig: need at least one dynamics and one value head");
    if (value_bins < 2 || !(value_min < value_max))
      throw std::invalid_argument("ModelConfig: bad value bin grid");
    if (!(log_std_min <= log_std_max)) throw std::invalid_argument("ModelConfig: log std bounds");
    if (mlp_dim < 1 || mlp_layers < 0 || encoder_dim < 1 || encoder_layers < 0)
      throw std::invalid_argument("ModelConfig: network sizes");
  }
};

/// SimNorm-structured latent state: contiguous groups of simnorm_dim entries,
/// each on the probability simplex.
struct Latent {
  VectorXd values;
};

inline void validate_latent(const VectorXd& v, int group, double tol = 1e-6) {
  if (v.size() % group != 0) throw std::invalid_argument("Latent: dimension not divisible by group");
  for (int g = 0; g < v.size() / group; ++g) {
    double sum = v.segment(g * group, group).sum();
    if (std::abs(sum - 1.0) > tol) throw NumericsError("Latent: group does not sum to 1");
  }
  if (v.minCoeff() < -tol) throw NumericsError("Latent: negative entry");
}

struct Action {
  VectorXd values;
  Action() = default;
  explicit Action(VectorXd v) : values(clamp(std::move(v), -1.0, 1.0)) {}
};

/// Diagonal Gaussian in pre-squash space; actions are tanh(mean + sigma * eps).
struct PolicyDistribution {
  VectorXd mean;     // pre-squash
  VectorXd log_std;  // already clamped to config bounds

  VectorXd sample_presquash(Rng& rng) const {
    return mean + (log_std.array().exp() * rng.normal_vector(static_cast<int>(mean.size())).array())
                      .matrix();
  }
  Action sample(Rng& rng) const { return Action(sample_presquash(rng).array().tanh().matrix()); }
  Action mode() const { return Action(mean.array().tanh().matrix()); }

  double log_prob(const Action& a) const {
    constexpr double kEdge = 1.0 - 1e-9;
    double lp = 0.0;
    for (int d = 0; d < mean.size(); ++d) {
      double ad = clamp(a.values(d), -kEdge, kEdge);
      double u = std::atanh(ad);
      double s = std::exp(log_std(d));
      double zd = (u - mean(d)) / s;
      lp += -0.5 * zd * zd - log_std(d) - 0.5 * std::log(2.0 * M_PI);
      lp -= std::log(1.0 - ad * ad);
    }
    return lp;
  }

  /// Entropy of the pre-squash Gaussian.
  double entropy() const {
    return log_std.sum() + 0.5 * mean.size() * std::log(2.0 * M_PI * std::exp(1.0));
  }
};

struct PolicyParams {
  MatrixXd mean;     // action_dim x batch, pre-squash
  MatrixXd log_std;  // action_dim x batch, clamped
};

struct WorldModel {
  ModelConfig cfg;
  TwoHotCodec codec;
  Mlp encoder;                    // obs -> latent logits (SimNorm applied)
  std::vector<Mlp> dynamics;      // (latent+action) -> latent logits, one per head
  Mlp reward;                     // (latent+action) -> bin logits
  std::vector<Mlp> value;         // latent -> bin logits
  std::vector<Mlp> value_target;  // EMA copies of value
  Mlp policy;                     // latent -> (mean, raw log_std)

  static WorldModel make(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    WorldModel m;
    m.cfg = cfg;
    m.codec = TwoHotCodec{cfg.value_bins, cfg.value_min, cfg.value_max};
    Rng r_enc = rng.derive(0x100);
    m.encoder = Mlp::make(cfg.obs_dim, cfg.encoder_dim, cfg.encoder_layers, cfg.latent_dim, r_enc);
    for (int i = 0; i < cfg.dynamics_heads; ++i) {
      Rng r = rng.derive(0x200 + static_cast<uint64_t>(i));
      m.dynamics.push_back(
          Mlp::make(cfg.latent_dim + cfg.action_dim, cfg.mlp_dim, cfg.mlp_layers, cfg.latent_dim, r));
    }
    Rng r_rew = rng.derive(0x300);
    m.reward = Mlp::make(cfg.latent_dim + cfg.action_dim, cfg.mlp_dim, cfg.mlp_layers,
                         cfg.value_bins, r_rew);
    for (int j = 0; j < cfg.value_heads; ++j) {
      Rng r = rng.derive(0x400 + static_cast<uint64_t>(j));
      m.value.push_back(Mlp::make(cfg.latent_dim, cfg.mlp_dim, cfg.mlp_layers, cfg.value_bins, r));
    }
    m.value_target = m.value;  // targets start in sync with online heads
    Rng r_pol = rng.derive(0x500);
    m.policy = Mlp::make(cfg.latent_dim, cfg.mlp_dim, cfg.mlp_layers, 2 * cfg.action_dim, r_pol);
    return m;
  }

  int obs_dim() const { return cfg.obs_dim; }
  int action_dim() const { return cfg.action_dim; }
  int latent_dim() const { return cfg.latent_dim; }
  int num_dynamics() const { return cfg.dynamics_heads; }
  int num_values() const { return cfg.value_heads; }

  MatrixXd encode_batch(const MatrixXd& obs) const {
    if (obs.rows() != cfg.obs_dim) throw std::invalid_argument("encode: obs dimension mismatch");
    MatrixXd z = mlp_forward(encoder, obs);
    simnorm_inplace(z, cfg.simnorm_dim);
    return z;
  }

  Latent encode(const VectorXd& obs) const { return Latent{encode_batch(obs)}; }

  MatrixXd dynamics_batch(int head, const MatrixXd& z, const MatrixXd& a) const {
    check_dynamics_head(head);
    MatrixXd out = mlp_forward(dynamics[head], stack(z, a));
    simnorm_inplace(out, cfg.simnorm_dim);
    return out;
  }

  Latent dynamics_step(const Latent& z, const Action& a, int head) const {
    return Latent{dynamics_batch(head, z.values, a.values)};
  }

  MatrixXd reward_logits(const MatrixXd& z, const MatrixXd& a) const {
    return mlp_forward(reward, stack(z, a));
  }

  /// `head` is accepted for interface uniformity with per-head study models;
  /// the learned model has a single shared reward head.
  VectorXd reward_batch(int /*head*/, const MatrixXd& z, const MatrixXd& a) const {
    return codec.decode_logits(reward_logits(z, a));
  }

  double predict_reward(const Latent& z, const Action& a) const {
    return reward_batch(0, z.values, a.values)(0);
  }

  MatrixXd value_logits(int head, const MatrixXd& z, bool use_target) const {
    check_value_head(head);
    return mlp_forward(use_target ? value_target[head] : value[head], z);
  }

  VectorXd value_batch(int head, const MatrixXd& z, bool use_target) const {
    return codec.decode_logits(value_logits(head, z, use_target));
  }

  double predict_value(const Latent& z, int head, bool use_target) const {
    return value_batch(head, z.values, use_target)(0);
  }

  PolicyParams policy_batch(const MatrixXd& z) const {
    MatrixXd out = mlp_forward(policy, z);
    PolicyParams p;
    p.mean = out.topRows(cfg.action_dim);
    p.log_std =
        clamp(MatrixXd(out.bottomRows(cfg.action_dim)), cfg.log_std_min, cfg.log_std_max);
    return p;
  }

  PolicyDistribution policy_prior(const Latent& z) const {
    PolicyParams p = policy_batch(z.values);
    return PolicyDistribution{p.mean.col(0), p.log_std.col(0)};
  }

  /// target <- (1 - tau) * target + tau * online, exact per parameter.
  void ema_update(double tau) {
    for (size_t j = 0; j < value.size(); ++j)
      visit_zip(value_target[j], value[j], [tau](auto& tgt, auto& online) {
        tgt = (1.0 - tau) * tgt + tau * online;
      });
  }

  static MatrixXd stack(const MatrixXd& z, const MatrixXd& a) {
    if (z.cols() != a.cols()) throw std::invalid_argument("model: batch size mismatch");
    MatrixXd x(z.rows() + a.rows(), z.cols());
    x.topRows(z.rows()) = z;
    x.bottomRows(a.rows()) = a;
    return x;
  }

  void check_dynamics_head(int head) const {
    if (head < 0 || head >= cfg.dynamics_heads)
      throw std::out_of_range("dynamics head index " + std::to_string(head));
  }
  void check_value_head(int head) const {
    if (head < 0 || head >= cfg.value_heads)
      throw std::out_of_range("value head index " + std::to_string(head));
  }
};

// ---- gradients and optimizer ----

struct ModelGrads {
  Mlp encoder;
  std::vector<Mlp> dynamics;
  Mlp reward;
  std::vector<Mlp> value;
  Mlp policy;

  static ModelGrads make(const WorldModel& m) {
    ModelGrads g;
    g.encoder = zeros_like(m.encoder);
    for (const auto& d : m.dynamics) g.dynamics.push_back(zeros_like(d));
    g.reward = zeros_like(m.reward);
    for (const auto& v : m.value) g.value.push_back(zeros_like(v));
    g.policy = zeros_like(m.policy);
    return g;
  }

  void set_zero() {
    etdmpc::set_zero(encoder);
    for (auto& d : dynamics) etdmpc::set_zero(d);
    etdmpc::set_zero(reward);
    for (auto& v : value) etdmpc::set_zero(v);
    etdmpc::set_zero(policy);
  }

  double squared_norm() const {
    double s = etdmpc::squared_norm(encoder) + etdmpc::squared_norm(reward) +
               etdmpc::squared_norm(policy);
    for (const auto& d : dynamics) s += etdmpc::squared_norm(d);
    for (const auto& v : value) s += etdmpc::squared_norm(v);
    return s;
  }

  void scale_all(double f) {
    etdmpc::scale(encoder, f);
    for (auto& d : dynamics) etdmpc::scale(d, f);
    etdmpc::scale(reward, f);
    for (auto& v : value) etdmpc::scale(v, f);
    etdmpc::scale(policy, f);
  }
};

struct ModelOptimizer {
  AdamState encoder, reward, policy;
  std::vector<AdamState> dynamics, value;

  static ModelOptimizer make(const WorldModel& m) {
    ModelOptimizer o;
    o.encoder = AdamState::make(m.encoder);
    for (const auto& d : m.dynamics) o.dynamics.push_back(AdamState::make(d));
    o.reward = AdamState::make(m.reward);
    for (const auto& v : m.value) o.value.push_back(AdamState::make(v));
    o.policy = AdamState::make(m.policy);
    return o;
  }

  /// Clips the global gradient norm, scales the encoder gradient, and applies
  /// Adam to every component. Returns the post-clip global norm.
  double step(WorldModel& m, ModelGrads& g, double lr, double encoder_lr_scale,
              double grad_clip_norm) {
    double norm = std::sqrt(g.squared_norm());
    if (grad_clip_norm > 0.0 && norm > grad_clip_norm) {
      g.scale_all(grad_clip_norm / norm);
      norm = grad_clip_norm;
    }
    etdmpc::scale(g.encoder, encoder_lr_scale);
    encoder.step(m.encoder, g.encoder, lr);
    for (size_t i = 0; i < dynamics.size(); ++i) dynamics[i].step(m.dynamics[i], g.dynamics[i], lr);
    reward.step(m.reward, g.reward, lr);
    for (size_t j = 0; j < value.size(); ++j) value[j].step(m.value[j], g.value[j], lr);
    policy.step(m.policy, g.policy, lr);
    return norm;
  }
};

// ---- checkpoint serialization ----

inline nlohmann::json vector_to_json(const VectorXd& v) {
  nlohmann::json out = nlohmann::json::array();
  for (int r = 0; r < v.size(); ++r) out.push_back(v(r));
  return out;
}

inline VectorXd vector_from_json(const nlohmann::json& j) {
  VectorXd v(static_cast<int>(j.size()));
  for (int r = 0; r < v.size(); ++r) v(r) = j.at(r).get<double>();
  return v;
}

inline nlohmann::json matrix_to_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline MatrixXd matrix_from_json(const nlohmann::json& j) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows == 0 ? 0 : static_cast<int>(j.at(0).size());
  MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

inline nlohmann::json mlp_to_json(const Mlp& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) {
    nlohmann::json jl;
    jl["w"] = matrix_to_json(l.w);
    nlohmann::json b = nlohmann::json::array();
    for (int r = 0; r < l.b.size(); ++r) b.push_back(l.b(r));
    jl["b"] = std::move(b);
    layers.push_back(std::move(jl));
  }
  return layers;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp m;
  for (const auto& jl : j) {
    Linear l;
    l.w = matrix_from_json(jl.at("w"));
    const auto& jb = jl.at("b");
    l.b.resize(static_cast<int>(jb.size()));
    for (int r = 0; r < l.b.size(); ++r) l.b(r) = jb.at(r).get<double>();
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"obs_dim", c.obs_dim},
                        {"action_dim", c.action_dim},
                        {"latent_dim", c.latent_dim},
                        {"mlp_dim", c.mlp_dim},
                        {"mlp_layers", c.mlp_layers},
                        {"encoder_dim", c.encoder_dim},
                        {"encoder_layers", c.encoder_layers},
                        {"simnorm_dim", c.simnorm_dim},
                        {"dynamics_heads", c.dynamics_heads},
                        {"value_heads", c.value_heads},
                        {"value_bins", c.value_bins},
                        {"value_min", c.value_min},
                        {"value_max", c.value_max},
                        {"log_std_min", c.log_std_min},
                        {"log_std_max", c.log_std_max}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.obs_dim = j.at("obs_dim").get<int>();
  c.action_dim = j.at("action_dim").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.mlp_dim = j.at("mlp_dim").get<int>();
  c.mlp_layers = j.at("mlp_layers").get<int>();
  c.encoder_dim = j.at("encoder_dim").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.simnorm_dim = j.at("simnorm_dim").get<int>();
  c.dynamics_heads = j.at("dynamics_heads").get<int>();
  c.value_heads = j.at("value_heads").get<int>();
  c.value_bins = j.at("value_bins").get<int>();
  c.value_min = j.at("value_min").get<double>();
  c.value_max = j.at("value_max").get<double>();
  c.log_std_min = j.at("log_std_min").get<double>();
  c.log_std_max = j.at("log_std_max").get<double>();
  return c;
}

inline constexpr const char* kCheckpointFormat = "etdmpc.checkpoint.v1";

inline nlohmann::json checkpoint_to_json(const WorldModel& m) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["config"] = model_config_to_json(m.cfg);
  j["encoder"] = mlp_to_json(m.encoder);
  j["dynamics"] = nlohmann::json::array();
  for (const auto& d : m.dynamics) j["dynamics"].push_back(mlp_to_json(d));
  j["reward"] = mlp_to_json(m.reward);
  j["value"] = nlohmann::json::array();
  for (const auto& v : m.value) j["value"].push_back(mlp_to_json(v));
  j["value_target"] = nlohmann::json::array();
  for (const auto& v : m.value_target) j["value_target"].push_back(mlp_to_json(v));
  j["policy"] = mlp_to_json(m.policy);
  return j;
}

inline WorldModel checkpoint_from_json(const nlohmann::json& j) {
  if (j.at("format").get<std::string>() != kCheckpointFormat)
    throw std::runtime_error("checkpoint: unknown format tag");
  WorldModel m;
  m.cfg = model_config_from_json(j.at("config"));
  m.cfg.validate();
  m.codec = TwoHotCodec{m.cfg.value_bins, m.cfg.value_min, m.cfg.value_max};
  m.encoder = mlp_from_json(j.at("encoder"));
  for (const auto& d : j.at("dynamics")) m.dynamics.push_back(mlp_from_json(d));
  m.reward = mlp_from_json(j.at("reward"));
  for (const auto& v : j.at("value")) m.value.push_back(mlp_from_json(v));
  for (const auto& v : j.at("value_target")) m.value_target.push_back(mlp_from_json(v));
  m.policy = mlp_from_json(j.at("policy"));
  if (static_cast<int>(m.dynamics.size()) != m.cfg.dynamics_heads ||
      static_cast<int>(m.value.size()) != m.cfg.value_heads ||
      m.value_target.size() != m.value.size())
    throw std::runtime_error("checkpoint: head count mismatch");
  return m;
}

inline void save_checkpoint(const WorldModel& m, const std::filesystem::path& path) {
  atomic_write_file(path, checkpoint_to_json(m).dump());
}

inline WorldModel load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(nlohmann::json::parse(read_file(path)));
}

}  // namespace etdmpc
