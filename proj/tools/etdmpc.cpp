#include "CLI11.hpp"
#include "etdmpc/analysis.hpp"
#include "etdmpc/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace etdmpc;

namespace {

void apply_thread_cap() {
  if (const char* v = std::getenv("ETDMPC_THREADS")) {
    const int n = std::atoi(v);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

RunConfig resolve_config(const std::string& preset, const std::string& config_path,
                         const std::vector<uint64_t>& seeds, const std::string& out_dir) {
  nlohmann::json doc;
  if (!preset.empty()) doc = run_config_to_json(preset_by_name(preset));
  if (!config_path.empty()) {
    nlohmann::json file = nlohmann::json::parse(read_file(config_path));
    if (doc.is_null())
      doc = std::move(file);
    else
      doc.merge_patch(file);
  }
  if (doc.is_null()) doc = run_config_to_json(RunConfig{});
  RunConfig cfg = run_config_from_json(doc);
  if (!seeds.empty()) cfg.seeds = seeds;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  cfg.validate();
  return cfg;
}

std::string seed_dir_name(uint64_t seed) { return "seed_" + std::to_string(seed); }

struct SeedOutcome {
  uint64_t seed;
  double final_eval = 0.0;
  double best_eval = 0.0;
  double curve_auc = 0.0;
  double reanalyze_ms = 0.0;
  double total_ms = 0.0;
  long env_steps = 0;
};

SeedOutcome run_one_seed(const RunConfig& cfg, uint64_t seed, const fs::path& dir) {
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  RunResult r = run(env_spec_by_name(cfg.env), cfg.model, cfg.resolved_acting(), cfg.reanalyze, tc);
  fs::create_directories(dir);
  r.metrics.write(dir / "metrics.csv");
  save_checkpoint(r.model, dir / "checkpoint.json");
  if (cfg.save_buffer && r.buffer)
    r.buffer->save_snapshot(dir / "buffer.jsonl",
                            {{"env", cfg.env}, {"checkpoint", "checkpoint.json"}});
  if (r.eval_steps.size() >= 2) {
    SvgSeries s{"eval return", "#1f77b4", r.eval_steps, r.eval_means};
    atomic_write_file(dir / "eval_curve.svg",
                      svg_line_chart({s}, cfg.env + " " + seed_dir_name(seed)));
  }
  SeedOutcome out;
  out.seed = seed;
  out.final_eval = r.final_eval_mean;
  out.best_eval = r.best_eval_mean;
  out.curve_auc = r.eval_steps.size() >= 2 ? auc(r.eval_steps, r.eval_means) : 0.0;
  out.reanalyze_ms = r.reanalyze_ms;
  out.total_ms = r.total_ms;
  out.env_steps = r.env_steps_run;
  return out;
}

int cmd_train(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  atomic_write_file(fs::path(cfg.out_dir) / "resolved_config.json",
                    run_config_to_json(cfg).dump(2) + "\n");
  CsvTable summary;
  summary.header = {"seed", "final_eval_mean", "best_eval_mean", "auc", "reanalyze_ms",
                    "total_ms", "env_steps"};
  for (uint64_t seed : cfg.seeds) {
    SeedOutcome o = run_one_seed(cfg, seed, fs::path(cfg.out_dir) / seed_dir_name(seed));
    summary.rows.push_back({static_cast<double>(o.seed), o.final_eval, o.best_eval, o.curve_auc,
                            o.reanalyze_ms, o.total_ms, static_cast<double>(o.env_steps)});
    std::cout << cfg.env << " seed " << seed << ": final " << o.final_eval << " best "
              << o.best_eval << " (" << o.env_steps << " steps, " << o.total_ms / 1000.0 << " s)"
              << std::endl;
  }
  summary.write(fs::path(cfg.out_dir) / "summary.csv");
  return 0;
}

std::vector<std::pair<std::string, RunConfig>> expand_axis(const RunConfig& base,
                                                           const std::string& axis) {
  std::vector<std::pair<std::string, RunConfig>> out;
  auto add = [&](const std::string& name, RunConfig c) { out.emplace_back(name, std::move(c)); };
  if (axis == "ensemble") {
    for (int nf : {1, 2, 4, 8}) {
      RunConfig c = base;
      c.model.dynamics_heads = nf;
      add("heads_" + std::to_string(nf), c);
    }
  } else if (axis == "buffer_mode") {
    for (BufferMode m : {BufferMode::per_step, BufferMode::per_episode}) {
      RunConfig c = base;
      c.train.buffer_mode = m;
      add(buffer_mode_name(m), c);
    }
  } else if (axis == "aggregation") {
    RunConfig mean = base;
    mean.acting.objective = ObjectiveMode::aggregate_horizon();
    add("mean", mean);
    RunConfig fin = base;
    fin.acting.objective = ObjectiveMode::ensemble_mean();
    add("final", fin);
  } else if (axis == "pessimism") {
    for (double beta : {0.0, 1.0, 3.0, 10.0, 30.0}) {
      RunConfig c = base;
      c.train.beta = beta;
      add("beta_" + std::to_string(static_cast<int>(beta)), c);
    }
  } else if (axis == "reanalyze_budget") {
    RunConfig expensive = base;
    expensive.reanalyze.num_samples = 512;
    expensive.reanalyze.num_elites = 64;
    expensive.reanalyze.num_policy_trajectories = 24;
    add("budget_512_64_24", expensive);
    RunConfig cheap = base;
    cheap.reanalyze.num_samples = 64;
    cheap.reanalyze.num_elites = 8;
    cheap.reanalyze.num_policy_trajectories = 3;
    add("budget_64_8_3", cheap);
  } else if (axis == "pessimism_scope") {
    RunConfig re = base;
    re.pessimistic_acting = false;
    add("reanalyze_only", re);
    RunConfig both = base;
    both.pessimistic_acting = true;
    add("acting_and_reanalyze", both);
  } else if (axis == "utd") {
    const std::vector<std::pair<int, int>> grid = {{1, 10}, {2, 5}, {4, 2}};
    for (auto [u, k] : grid) {
      RunConfig c = base;
      c.train.utd = u;
      c.train.reanalyze_interval = k;
      add("utd_" + std::to_string(u), c);
    }
  } else {
    throw std::invalid_argument("unknown ablation axis: " + axis);
  }
  return out;
}

int cmd_ablate(const RunConfig& base, const std::string& axis) {
  const auto variants = expand_axis(base, axis);
  fs::create_directories(base.out_dir);
  atomic_write_file(fs::path(base.out_dir) / "resolved_config.json",
                    run_config_to_json(base).dump(2) + "\n");
  CsvTable combined;
  combined.header = {"variant_index", "seed",         "final_eval_mean", "best_eval_mean",
                     "auc",           "reanalyze_ms", "total_ms",        "env_steps"};
  std::vector<std::string> names;
  for (size_t v = 0; v < variants.size(); ++v) {
    const auto& [name, cfg] = variants[v];
    names.push_back(name);
    const fs::path vdir = fs::path(base.out_dir) / name;
    fs::create_directories(vdir);
    atomic_write_file(vdir / "resolved_config.json", run_config_to_json(cfg).dump(2) + "\n");
    for (uint64_t seed : cfg.seeds) {
      SeedOutcome o = run_one_seed(cfg, seed, vdir / seed_dir_name(seed));
      combined.rows.push_back({static_cast<double>(v), static_cast<double>(o.seed), o.final_eval,
                               o.best_eval, o.curve_auc, o.reanalyze_ms, o.total_ms,
                               static_cast<double>(o.env_steps)});
      std::cout << axis << "/" << name << " seed " << seed << ": final " << o.final_eval
                << std::endl;
    }
  }
  combined.write(fs::path(base.out_dir) / ("ablation_" + axis + ".csv"));
  std::string legend = "variant_index legend:";
  for (size_t v = 0; v < names.size(); ++v) legend += " " + std::to_string(v) + "=" + names[v];
  std::cout << legend << std::endl;
  return 0;
}

int cmd_crossscore(const std::string& checkpoint_path, const std::string& snapshot_path,
                   int num_states, uint64_t seed, const std::string& out_dir,
                   PlannerConfig budget) {
  WorldModel model = load_checkpoint(checkpoint_path);
  auto [buffer, header] = ReplayBuffer::load_snapshot(snapshot_path);
  const std::string env_name = header.value("env", std::string("pendulum"));
  EnvSpec spec = env_spec_by_name(env_name);
  const double gamma = discount_for_episode_length(spec.episode_length, 0.95, 0.995);

  Rng rng(seed);
  std::vector<VectorXd> states;
  int skipped = 0;
  for (int k = 0; k < num_states && buffer.size() > 0; ++k) {
    const Transition& tr = buffer.at(rng.uniform_int(0, buffer.size() - 1));
    if (tr.env_state.size() != spec.state_dim) {
      ++skipped;
      continue;
    }
    states.push_back(tr.env_state);
  }

  auto latent_of = [&](const VectorXd& s) {
    return VectorXd(model.encode_batch(spec.observe(s)).col(0));
  };
  auto oracle_value = [&](const VectorXd& s) {
    MatrixXd z = model.encode_batch(spec.observe(s));
    double v = 0.0;
    for (int j = 0; j < model.num_values(); ++j) v += model.value_batch(j, z, false)(0);
    return v / model.num_values();
  };
  CrossScoreStudy study =
      cross_score_study(spec, model, states, latent_of, oracle_value, budget, gamma, rng, skipped);

  fs::create_directories(out_dir);
  const char* planner_names[2] = {"single_head", "ensemble"};
  const char* estimator_names[3] = {"single_head", "ensemble", "oracle"};
  CsvTable records;
  records.header = {"state_id"};
  for (int p = 0; p < 2; ++p)
    for (int e = 0; e < 3; ++e)
      records.header.push_back(std::string("plan_") + planner_names[p] + "_score_" +
                               estimator_names[e]);
  for (int e = 0; e < 3; ++e)
    records.header.push_back(std::string("policy_score_") + estimator_names[e]);
  for (int p = 0; p < 2; ++p)
    for (int e = 0; e < 3; ++e)
      records.header.push_back(std::string("delta_r_") + planner_names[p] + "_" +
                               estimator_names[e]);
  for (const auto& r : study.records) {
    std::vector<double> row{static_cast<double>(r.state_id)};
    for (int p = 0; p < 2; ++p)
      for (int e = 0; e < 3; ++e) row.push_back(r.plan_score[p][e]);
    for (int e = 0; e < 3; ++e) row.push_back(r.policy_score[e]);
    for (int p = 0; p < 2; ++p)
      for (int e = 0; e < 3; ++e) row.push_back(r.delta_r[p][e]);
    records.rows.push_back(std::move(row));
  }
  records.write(fs::path(out_dir) / "crossscore_records.csv");

  CsvTable summary;
  summary.header = {"planner", "estimator", "delta_r_mean", "delta_r_se", "num_states", "skipped"};
  for (int p = 0; p < 2; ++p)
    for (int e = 0; e < 3; ++e)
      summary.rows.push_back({static_cast<double>(p), static_cast<double>(e),
                              study.summary.mean[p][e], study.summary.se[p][e],
                              static_cast<double>(study.summary.num_states),
                              static_cast<double>(study.summary.skipped)});
  summary.write(fs::path(out_dir) / "crossscore_summary.csv");
  std::cout << "crossscore: " << study.summary.num_states << " states (" << study.summary.skipped
            << " skipped); single-head planner dR self " << study.summary.mean[0][0] << " oracle "
            << study.summary.mean[0][2] << "; ensemble planner dR self " << study.summary.mean[1][1]
            << " oracle " << study.summary.mean[1][2] << std::endl;
  return 0;
}

struct TaskInput {
  std::string name;
  std::vector<std::string> files;
  std::string norm;  // empty, "final", or a number
};

int cmd_aggregate(const std::vector<TaskInput>& tasks, double reference,
                  const std::string& out_dir) {
  std::vector<CurveStats> normalized;
  CsvTable per_task;
  per_task.header = {"task_index", "step", "mean", "se", "norm_mean", "norm_se"};
  CsvTable aucs;
  aucs.header = {"task_index", "auc", "normalized_auc"};
  std::vector<std::string> names;
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    const TaskInput& in = tasks[ti];
    names.push_back(in.name);
    TaskCurve curve;
    curve.task_id = in.name;
    for (const auto& f : in.files) {
      CsvTable t = CsvTable::read(f);
      const int cs = t.column("env_step");
      const int cr = t.column("eval_return_mean");
      std::vector<CurvePoint> series;
      for (const auto& row : t.rows) series.push_back({row.at(cs), row.at(cr)});
      curve.seeds.push_back(std::move(series));
    }
    CurveStats stats = task_mean_and_se(curve);
    double c = 1.0;
    if (in.norm == "final")
      c = stats.mean.back();
    else if (!in.norm.empty())
      c = std::stod(in.norm);
    CurveStats norm = normalize_curve(stats, c);
    for (size_t k = 0; k < stats.steps.size(); ++k)
      per_task.rows.push_back({static_cast<double>(ti), stats.steps[k], stats.mean[k], stats.se[k],
                               norm.mean[k], norm.se[k]});
    aucs.rows.push_back({static_cast<double>(ti), auc(stats), auc(norm)});
    normalized.push_back(std::move(norm));
  }
  CurveStats agg = aggregate_curves(normalized);

  fs::create_directories(out_dir);
  per_task.write(fs::path(out_dir) / "task_curves.csv");
  CsvTable agg_csv;
  agg_csv.header = {"step", "mean", "se", "ci_low", "ci_high"};
  for (size_t k = 0; k < agg.steps.size(); ++k)
    agg_csv.rows.push_back({agg.steps[k], agg.mean[k], agg.se[k],
                            agg.mean[k] - 1.96 * agg.se[k], agg.mean[k] + 1.96 * agg.se[k]});
  agg_csv.write(fs::path(out_dir) / "aggregate_curve.csv");

  std::vector<double> task_aucs;
  for (const auto& row : aucs.rows) task_aucs.push_back(row[2]);
  const double bench = aggregate_benchmark_auc(task_aucs, reference);
  CsvTable auc_out = aucs;
  auc_out.header.push_back("benchmark_average_normalized");
  for (auto& row : auc_out.rows) row.push_back(bench);
  auc_out.write(fs::path(out_dir) / "auc_summary.csv");

  std::vector<SvgSeries> series;
  const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  for (size_t ti = 0; ti < normalized.size(); ++ti)
    series.push_back(
        {names[ti], palette[ti % 6], normalized[ti].steps, normalized[ti].mean});
  series.push_back({"aggregate", "#000000", agg.steps, agg.mean});
  atomic_write_file(fs::path(out_dir) / "aggregate_curve.svg",
                    svg_line_chart(series, "normalized evaluation return"));
  std::cout << "aggregate: " << tasks.size() << " task(s), benchmark-average normalized AUC "
            << bench << std::endl;
  return 0;
}

std::vector<TaskInput> parse_task_args(const std::vector<std::string>& task_args,
                                       const std::vector<std::string>& norm_args) {
  std::map<std::string, std::string> norms;
  for (const auto& n : norm_args) {
    const auto eq = n.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--norm expects NAME=VALUE: " + n);
    norms[n.substr(0, eq)] = n.substr(eq + 1);
  }
  std::vector<TaskInput> tasks;
  for (const auto& t : task_args) {
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--task expects NAME=FILE[,FILE...]: " + t);
    TaskInput in;
    in.name = t.substr(0, eq);
    std::string rest = t.substr(eq + 1);
    size_t pos = 0;
    while (pos != std::string::npos) {
      const size_t comma = rest.find(',', pos);
      in.files.push_back(rest.substr(pos, comma == std::string::npos ? comma : comma - pos));
      pos = comma == std::string::npos ? comma : comma + 1;
    }
    if (auto it = norms.find(in.name); it != norms.end()) in.norm = it->second;
    tasks.push_back(std::move(in));
  }
  return tasks;
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_cap();
  CLI::App app{"EfficientTDMPC toy stack: train, ablate, cross-score, aggregate"};
  app.require_subcommand(1);

  std::string config_path, preset, out_dir;
  std::vector<uint64_t> seeds;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config (overrides preset)");
    sub->add_option("--preset", preset, "named preset: efficienttdmpc-utd4, bmpc-like, pendulum-desk");
    sub->add_option("--seed", seeds, "seed override (repeatable)");
    sub->add_option("--out", out_dir, "output directory override");
  };

  CLI::App* train = app.add_subcommand("train", "run the acting/learning loop per seed");
  add_common(train);

  CLI::App* ablate = app.add_subcommand("ablate", "run a variant grid along one axis");
  add_common(ablate);
  std::string axis;
  ablate
      ->add_option("--axis", axis,
                   "ensemble | buffer_mode | aggregation | pessimism | reanalyze_budget | "
                   "pessimism_scope | utd")
      ->required();

  CLI::App* cross = app.add_subcommand("crossscore", "planner cross-scoring study");
  std::string checkpoint_path, snapshot_path;
  int num_states = 512;
  uint64_t cross_seed = 0;
  std::string cross_out = "runs/crossscore";
  PlannerConfig budget;
  budget.horizon = 3;
  budget.iterations = 6;
  budget.num_samples = 64;
  budget.num_elites = 8;
  budget.num_policy_trajectories = 3;
  budget.temperature = 0.5;
  cross->add_option("--checkpoint", checkpoint_path, "model checkpoint JSON")->required();
  cross->add_option("--snapshot", snapshot_path, "replay buffer snapshot JSONL")->required();
  cross->add_option("--num-states", num_states, "replay states to score (default 512)");
  cross->add_option("--seed", cross_seed, "study seed");
  cross->add_option("--out", cross_out, "output directory");
  cross->add_option("--horizon", budget.horizon, "planning horizon (default 3)");
  cross->add_option("--iterations", budget.iterations, "MPPI iterations (default 6)");
  cross->add_option("--samples", budget.num_samples, "samples per iteration (default 64)");
  cross->add_option("--elites", budget.num_elites, "elite count (default 8)");
  cross->add_option("--policy-trajectories", budget.num_policy_trajectories,
                    "policy rollouts per iteration (default 3)");
  cross->add_option("--temperature", budget.temperature, "elite softmax temperature");

  CLI::App* agg = app.add_subcommand("aggregate", "curve aggregation and AUC pipeline");
  std::vector<std::string> task_args, norm_args;
  double reference = 1.0;
  std::string agg_out = "runs/aggregate";
  agg->add_option("--task", task_args, "NAME=metrics.csv[,metrics.csv...] (repeatable)")
      ->required();
  agg->add_option("--norm", norm_args, "NAME=CONSTANT or NAME=final (repeatable)");
  agg->add_option("--reference", reference, "reference AUC for benchmark normalization");
  agg->add_option("--out", agg_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(resolve_config(preset, config_path, seeds, out_dir));
    if (ablate->parsed())
      return cmd_ablate(resolve_config(preset, config_path, seeds, out_dir), axis);
    if (cross->parsed())
      return cmd_crossscore(checkpoint_path, snapshot_path, num_states, cross_seed, cross_out,
                            budget);
    if (agg->parsed())
      return cmd_aggregate(parse_task_args(task_args, norm_args), reference, agg_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
