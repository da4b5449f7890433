#include "test_util.hpp"

#include "etdmpc/model.hpp"

#include <filesystem>

using namespace etdmpc;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.obs_dim = 3;
  c.action_dim = 1;
  c.latent_dim = 16;
  c.mlp_dim = 24;
  c.encoder_dim = 24;
  c.simnorm_dim = 8;
  c.dynamics_heads = 3;
  c.value_heads = 2;
  c.value_bins = 31;
  return c;
}

bool mlp_equal(const Mlp& a, const Mlp& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (size_t l = 0; l < a.layers.size(); ++l)
    if (a.layers[l].w != b.layers[l].w || a.layers[l].b != b.layers[l].b) return false;
  return true;
}

bool model_equal(const WorldModel& a, const WorldModel& b) {
  if (!mlp_equal(a.encoder, b.encoder) || !mlp_equal(a.reward, b.reward) ||
      !mlp_equal(a.policy, b.policy))
    return false;
  if (a.dynamics.size() != b.dynamics.size() || a.value.size() != b.value.size()) return false;
  for (size_t i = 0; i < a.dynamics.size(); ++i)
    if (!mlp_equal(a.dynamics[i], b.dynamics[i])) return false;
  for (size_t j = 0; j < a.value.size(); ++j)
    if (!mlp_equal(a.value[j], b.value[j]) || !mlp_equal(a.value_target[j], b.value_target[j]))
      return false;
  return true;
}

}  // namespace

TEST_CASE("model config validation rejects bad shapes") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  ModelConfig bad = c;
  bad.latent_dim = 15;  // not a multiple of simnorm_dim
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.obs_dim = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.value_bins = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.value_min = 2.0;
  bad.value_max = -2.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.dynamics_heads = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("model construction is seed-deterministic") {
  Rng r1(42), r2(42), r3(43);
  WorldModel a = WorldModel::make(small_config(), r1);
  WorldModel b = WorldModel::make(small_config(), r2);
  WorldModel c = WorldModel::make(small_config(), r3);
  CHECK(model_equal(a, b));
  CHECK_FALSE(mlp_equal(a.encoder, c.encoder));
}

TEST_CASE("encode produces valid simnorm latents deterministically") {
  Rng rng(7);
  WorldModel m = WorldModel::make(small_config(), rng);
  Rng data(1);
  for (int trial = 0; trial < 20; ++trial) {
    VectorXd obs = data.normal_vector(3, 0.0, 2.0);
    Latent z = m.encode(obs);
    CHECK_NOTHROW(validate_latent(z.values, m.cfg.simnorm_dim));
    CHECK(m.encode(obs).values == z.values);
  }
  MatrixXd wrong(4, 1);
  wrong.setZero();
  CHECK_THROWS_AS(m.encode_batch(wrong), std::invalid_argument);
}

TEST_CASE("dynamics heads keep the simnorm invariant and differ from each other") {
  Rng rng(8);
  WorldModel m = WorldModel::make(small_config(), rng);
  Rng data(2);
  Latent z = m.encode(data.normal_vector(3));
  Action a(data.normal_vector(1));
  std::vector<VectorXd> nexts;
  for (int i = 0; i < m.num_dynamics(); ++i) {
    Latent zn = m.dynamics_step(z, a, i);
    CHECK_NOTHROW(validate_latent(zn.values, m.cfg.simnorm_dim));
    nexts.push_back(zn.values);
  }
  for (size_t i = 0; i + 1 < nexts.size(); ++i)
    for (size_t k = i + 1; k < nexts.size(); ++k)
      CHECK((nexts[i] - nexts[k]).cwiseAbs().maxCoeff() > 0.0);
  CHECK_THROWS_AS(m.dynamics_step(z, a, m.num_dynamics()), std::out_of_range);
  CHECK_THROWS_AS(m.dynamics_step(z, a, -1), std::out_of_range);
}

TEST_CASE("reward and value predictions stay inside the decode range") {
  Rng rng(9);
  WorldModel m = WorldModel::make(small_config(), rng);
  Rng data(3);
  for (int trial = 0; trial < 20; ++trial) {
    Latent z = m.encode(data.normal_vector(3, 0.0, 3.0));
    Action a(data.normal_vector(1));
    double r = m.predict_reward(z, a);
    CHECK(r >= m.cfg.value_min);
    CHECK(r <= m.cfg.value_max);
    for (int j = 0; j < m.num_values(); ++j) {
      double v = m.predict_value(z, j, false);
      CHECK(v >= m.cfg.value_min);
      CHECK(v <= m.cfg.value_max);
    }
  }
  Latent z = m.encode(VectorXd::Zero(3));
  CHECK_THROWS_AS(m.predict_value(z, m.num_values(), false), std::out_of_range);
}

TEST_CASE("value targets start in sync with the online heads") {
  Rng rng(10);
  WorldModel m = WorldModel::make(small_config(), rng);
  Rng data(4);
  Latent z = m.encode(data.normal_vector(3));
  for (int j = 0; j < m.num_values(); ++j)
    CHECK(m.predict_value(z, j, true) == m.predict_value(z, j, false));
  // independently initialized heads disagree on the same latent
  CHECK(m.predict_value(z, 0, false) != m.predict_value(z, 1, false));
}

TEST_CASE("ema update follows the exact blend rule per parameter") {
  Rng rng(11);
  WorldModel m = WorldModel::make(small_config(), rng);
  // desynchronize targets so the blend is visible
  scale(m.value_target[0], 0.5);
  std::vector<Mlp> before = m.value_target;
  const double tau = 0.25;
  m.ema_update(tau);
  for (size_t j = 0; j < m.value.size(); ++j) {
    for (size_t l = 0; l < m.value[j].layers.size(); ++l) {
      MatrixXd expect =
          (1.0 - tau) * before[j].layers[l].w + tau * m.value[j].layers[l].w;
      CHECK((m.value_target[j].layers[l].w - expect).cwiseAbs().maxCoeff() == 0.0);
      VectorXd expect_b =
          (1.0 - tau) * before[j].layers[l].b + tau * m.value[j].layers[l].b;
      CHECK((m.value_target[j].layers[l].b - expect_b).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("policy log std is clamped to the configured bounds") {
  Rng rng(12);
  WorldModel m = WorldModel::make(small_config(), rng);
  // force a huge raw log-std output: zero final layer, bias 5 on the std rows
  Mlp& pol = m.policy;
  pol.layers.back().w.setZero();
  pol.layers.back().b.setZero();
  pol.layers.back().b(m.cfg.action_dim) = 5.0;  // raw log_std -> 5
  Latent z = m.encode(VectorXd::Zero(3));
  PolicyDistribution d = m.policy_prior(z);
  CHECK(d.log_std(0) == m.cfg.log_std_max);  // clamp(5) = 1
  pol.layers.back().b(m.cfg.action_dim) = -9.0;
  d = m.policy_prior(m.encode(VectorXd::Zero(3)));
  CHECK(d.log_std(0) == m.cfg.log_std_min);
}

TEST_CASE("policy samples are squashed and concentrate near the mode") {
  Rng rng(13);
  WorldModel m = WorldModel::make(small_config(), rng);
  Latent z = m.encode(VectorXd::Ones(3));
  PolicyDistribution d = m.policy_prior(z);
  d.log_std.setConstant(-3.0);  // near-deterministic
  Rng sampler(99);
  double mean_of_samples = 0.0;
  for (int s = 0; s < 1000; ++s) {
    Action a = d.sample(sampler);
    CHECK(a.values.cwiseAbs().maxCoeff() <= 1.0);
    mean_of_samples += a.values(0);
  }
  mean_of_samples /= 1000.0;
  CHECK(std::abs(mean_of_samples - d.mode().values(0)) < 0.05);
  CHECK(std::isfinite(d.log_prob(d.mode())));
  CHECK(d.entropy() ==
        doctest::Approx(-3.0 + 0.5 * std::log(2.0 * M_PI * std::exp(1.0))).epsilon(1e-12));
}

TEST_CASE("action constructor clamps into the unit box") {
  VectorXd v(3);
  v << -5.0, 0.25, 7.0;
  Action a(v);
  CHECK(a.values(0) == -1.0);
  CHECK(a.values(1) == 0.25);
  CHECK(a.values(2) == 1.0);
}

TEST_CASE("checkpoint roundtrip preserves every parameter bitwise") {
  Rng rng(14);
  WorldModel m = WorldModel::make(small_config(), rng);
  m.ema_update(0.3);  // make targets distinct from a fresh model
  const auto path = std::filesystem::temp_directory_path() / "etdmpc_test_ckpt.json";
  save_checkpoint(m, path);
  WorldModel loaded = load_checkpoint(path);
  CHECK(model_equal(m, loaded));
  Rng data(5);
  VectorXd obs = data.normal_vector(3);
  CHECK(m.encode(obs).values == loaded.encode(obs).values);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loading validates format and head counts") {
  Rng rng(15);
  WorldModel m = WorldModel::make(small_config(), rng);
  nlohmann::json j = checkpoint_to_json(m);
  nlohmann::json bad = j;
  bad["format"] = "other.v0";
  CHECK_THROWS_AS(checkpoint_from_json(bad), std::runtime_error);
  bad = j;
  bad["dynamics"].erase(0);  // head count no longer matches config
  CHECK_THROWS_AS(checkpoint_from_json(bad), std::runtime_error);
}

TEST_CASE("optimizer clips the global gradient norm") {
  Rng rng(16);
  WorldModel m = WorldModel::make(small_config(), rng);
  ModelOptimizer opt = ModelOptimizer::make(m);
  ModelGrads g = ModelGrads::make(m);
  g.encoder.layers[0].w.setConstant(1.0);  // large known gradient
  const double raw = std::sqrt(g.squared_norm());
  REQUIRE(raw > 5.0);
  const double clipped = opt.step(m, g, 1e-3, 1.0, 5.0);
  CHECK(clipped == doctest::Approx(5.0).epsilon(1e-12));

  ModelGrads small = ModelGrads::make(m);
  small.policy.layers[0].b(0) = 0.25;
  CHECK(opt.step(m, small, 1e-3, 1.0, 5.0) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("encoder lr scale zero freezes the encoder") {
  Rng rng(17);
  WorldModel m = WorldModel::make(small_config(), rng);
  ModelOptimizer opt = ModelOptimizer::make(m);
  Mlp enc_before = m.encoder;
  Mlp pol_before = m.policy;
  ModelGrads g = ModelGrads::make(m);
  g.encoder.layers[0].w.setConstant(0.5);
  g.policy.layers[0].b.setConstant(0.5);
  opt.step(m, g, 1e-2, 0.0, 0.0);
  CHECK(mlp_equal(m.encoder, enc_before));
  CHECK_FALSE(mlp_equal(m.policy, pol_before));
}

TEST_CASE("stack rejects mismatched batch sizes") {
  CHECK_THROWS_AS(WorldModel::stack(MatrixXd::Zero(2, 3), MatrixXd::Zero(1, 2)),
                  std::invalid_argument);
}
