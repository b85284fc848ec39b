// winddispatch CLI: calibrate | simulate | power | optimize | evaluate
// (plus a hidden `synth` generator for benchmark series). Config-file driven;
// every run is deterministic given its config and --seed override.
//
// Exit codes: 0 success, 2 input/config error, 3 numerical divergence,
// 4 constraint violation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "winddispatch/winddispatch.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace winddispatch;

namespace {

struct RunContext {
  json config;
  fs::path base;     // config file's directory; relative input paths resolve here
  fs::path out_dir;  // --out override or base; relative output paths resolve here
  std::optional<std::uint64_t> seed_override;

  std::string in_path(const std::string& key) const {
    fs::path p = config.at(key).get<std::string>();
    return (p.is_absolute() ? p : base / p).string();
  }

  std::string out_path(const std::string& key, const std::string& fallback) const {
    fs::path p = config.value(key, fallback);
    return (p.is_absolute() ? p : out_dir / p).string();
  }

  std::uint64_t seed_or(const std::string& key, std::uint64_t fallback) const {
    if (seed_override) return *seed_override;
    return config.value(key, fallback);
  }
};

RunContext load_context(const std::string& config_path, const std::string& out_dir,
                        std::optional<std::uint64_t> seed) {
  std::ifstream in(config_path);
  if (!in) throw std::invalid_argument("cannot open config " + config_path);
  RunContext ctx;
  ctx.config = json::parse(in);
  ctx.base = fs::absolute(config_path).parent_path();
  ctx.out_dir = out_dir.empty() ? ctx.base : fs::absolute(out_dir);
  if (!out_dir.empty()) fs::create_directories(ctx.out_dir);
  ctx.seed_override = seed;
  return ctx;
}

SimulationGrid grid_from_json(const json& j) {
  SimulationGrid g;
  g.t0 = j.at("t0").get<double>();
  g.horizon = j.at("T").get<double>();
  g.dt = j.at("dt").get<double>();
  g.validate();
  return g;
}

CalibrationHyperparams hyperparams_from_json(const json& cfg) {
  CalibrationHyperparams hp;
  if (cfg.contains("hyperparams")) {
    const json& h = cfg.at("hyperparams");
    hp.kappa = h.value("kappa", hp.kappa);
    hp.target_c = h.value("C", hp.target_c);
    hp.learning_rate = h.value("learning_rate", hp.learning_rate);
    hp.steps = h.value("steps", hp.steps);
    hp.batch_len = h.value("batch_len", hp.batch_len);
    hp.seed = h.value("seed", hp.seed);
    hp.fd_step = h.value("fd_step", hp.fd_step);
    hp.one_sided_penalty = h.value("one_sided_penalty", hp.one_sided_penalty);
  }
  hp.validate();
  return hp;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

int cmd_synth(const RunContext& ctx) {
  const json& c = ctx.config;
  std::string kind = c.at("kind").get<std::string>();
  double x0 = c.at("x0").get<double>();
  double dt = c.at("dt").get<double>();
  long n = c.at("n").get<long>();
  double t0 = c.value("t0", 0.0);
  std::uint64_t seed = ctx.seed_or("seed", 0);
  TimeSeries series;
  if (kind == "ou") {
    series = make_ou_series(c.at("theta").get<double>(), c.at("mu").get<double>(),
                            c.at("sigma").get<double>(), x0, dt, n, seed, t0);
  } else if (kind == "gbm") {
    series = make_gbm_series(c.at("a").get<double>(), c.at("b").get<double>(), x0, dt, n, seed,
                             t0);
  } else {
    throw std::invalid_argument("synth kind must be ou or gbm");
  }
  std::string out = ctx.out_path("out", "series.csv");
  write_timeseries_csv(out, series);
  std::cout << "wrote " << out << " (" << series.size() << " samples)\n";
  return 0;
}

int cmd_calibrate(const RunContext& ctx) {
  const json& c = ctx.config;
  TimeSeries series = read_timeseries_csv(ctx.in_path("series_csv"));
  StateKind kind = state_kind_from_string(c.value("state_kind", std::string("wind_speed")));
  if (kind == StateKind::WindSpeed)
    for (double v : series.values)
      require(v >= 0.0, "wind_speed series values must be >= 0");

  CalibrationHyperparams hp = hyperparams_from_json(c);
  std::uint64_t init_seed = c.value("init_seed", 0ULL);
  if (ctx.seed_override) {
    init_seed = *ctx.seed_override;
    hp.seed = *ctx.seed_override;
  }

  FitResult result = fit(series, hp, init_seed, kind);
  std::string model_out = ctx.out_path("model_out", "model.json");
  std::string log_out = ctx.out_path("training_log_out", "training_log.csv");
  save_model_json(model_out, result.model);
  write_training_log_csv(log_out, result.log);
  std::cout << "wrote " << model_out << " and " << log_out << '\n';
  return 0;
}

int cmd_simulate(const RunContext& ctx) {
  const json& c = ctx.config;
  SdeModel model = load_model_json(ctx.in_path("model"));
  SimulationGrid grid = grid_from_json(c.at("grid"));
  double x0 = c.at("x0").get<double>();
  long n_paths = c.at("n_paths").get<long>();
  require(n_paths >= 1, "n_paths must be >= 1");
  std::uint64_t seed = ctx.seed_or("seed", 0);

  long n_steps = grid.step_count();
  std::vector<TimeSeries> paths(static_cast<std::size_t>(n_paths));
  parallel_for(static_cast<std::size_t>(n_paths),
               [&](std::size_t p) { paths[p] = simulate_path(model, x0, grid, seed + p); });

  std::string ensemble_out = ctx.out_path("ensemble_out", "ensemble.csv");
  {
    std::ofstream out(ensemble_out, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + ensemble_out);
    out << 't';
    for (long p = 0; p < n_paths; ++p) out << ",path_" << p;
    out << '\n';
    for (long k = 0; k <= n_steps; ++k) {
      out << format_g17(grid.t0 + k * grid.dt);
      for (long p = 0; p < n_paths; ++p)
        out << ',' << format_g17(paths[static_cast<std::size_t>(p)].values[k]);
      out << '\n';
    }
  }

  std::vector<double> mean(static_cast<std::size_t>(n_steps) + 1, 0.0);
  std::vector<double> stddev(static_cast<std::size_t>(n_steps) + 1, 0.0);
  for (long k = 0; k <= n_steps; ++k) {
    double m = 0.0;
    for (long p = 0; p < n_paths; ++p) m += paths[static_cast<std::size_t>(p)].values[k];
    m /= static_cast<double>(n_paths);
    double var = 0.0;
    for (long p = 0; p < n_paths; ++p) {
      double d = paths[static_cast<std::size_t>(p)].values[k] - m;
      var += d * d;
    }
    mean[static_cast<std::size_t>(k)] = m;
    stddev[static_cast<std::size_t>(k)] =
        n_paths > 1 ? std::sqrt(var / static_cast<double>(n_paths - 1)) : 0.0;
  }
  json summary{{"n_paths", n_paths},
               {"t0", grid.t0},
               {"dt", grid.dt},
               {"mean", mean},
               {"std", stddev}};
  std::string summary_out = ctx.out_path("summary_out", "summary.json");
  write_json_file(summary_out, summary);
  std::cout << "wrote " << ensemble_out << " and " << summary_out << '\n';
  return 0;
}

json energy_report(const EnergyEstimate& e, const std::string& mode) {
  return json{{"mode", mode},
              {"estimate_J", e.estimate_J},
              {"std_error_J", e.std_error_J},
              {"n_paths", e.n_paths}};
}

int cmd_power(const RunContext& ctx) {
  const json& c = ctx.config;
  SdeModel model = load_model_json(ctx.in_path("model"));
  PowerParams pp;
  pp.rho = c.at("power_params").at("rho").get<double>();
  pp.area = c.at("power_params").at("area").get<double>();
  SimulationGrid grid = grid_from_json(c.at("grid"));
  double v0 = c.at("v0").get<double>();
  long n_paths = c.at("n_paths").get<long>();
  std::uint64_t seed = ctx.seed_or("seed", 0);

  EnergyEstimate ito = expected_energy_detail(model, pp, v0, grid, ItoMode::ItoConsistent,
                                              n_paths, seed);
  EnergyEstimate literal = expected_energy_detail(model, pp, v0, grid, ItoMode::PaperLiteral,
                                                  n_paths, seed);
  EnergyEstimate physical =
      expected_energy_detail(model, pp, v0, grid, ItoMode::ItoConsistent, n_paths, seed,
                             EnergyVariant::PhysicalIntegral);

  json report{{"n_paths", n_paths},
              {"grid", {{"t0", grid.t0}, {"T", grid.horizon}, {"dt", grid.dt}}},
              {"ito_consistent", energy_report(ito, "ito_consistent")},
              {"paper_literal", energy_report(literal, "paper_literal")},
              {"physical", energy_report(physical, "physical")}};
  std::string report_out = ctx.out_path("report_out", "power_report.json");
  write_json_file(report_out, report);
  std::cout << "wrote " << report_out << '\n';
  return 0;
}

DispatchProblem problem_from_config(const json& c, const fs::path& base) {
  DispatchProblem pb;
  auto in_path = [&](const std::string& key) {
    fs::path p = c.at(key).get<std::string>();
    return (p.is_absolute() ? p : base / p).string();
  };
  pb.wind_model = load_model_json(in_path("wind_model"));
  pb.demand_model = load_model_json(in_path("demand_model"));
  pb.power_params.rho = c.at("power_params").at("rho").get<double>();
  pb.power_params.area = c.at("power_params").at("area").get<double>();
  pb.eta_w = c.at("eta_w").get<double>();
  pb.eta_a = c.at("eta_a").get<double>();
  pb.capacity = c.at("capacity").get<double>();
  pb.max_charge = c.at("max_charge").get<double>();
  pb.max_discharge = c.at("max_discharge").get<double>();
  pb.horizon_steps = c.at("horizon_steps").get<int>();
  pb.dt = c.at("dt").get<double>();
  pb.soc_bins = c.at("soc_bins").get<int>();
  pb.wind_bins = c.at("wind_bins").get<int>();
  pb.demand_bins = c.at("demand_bins").get<int>();
  pb.wind_min = c.at("wind_range").at(0).get<double>();
  pb.wind_max = c.at("wind_range").at(1).get<double>();
  pb.demand_min = c.at("demand_range").at(0).get<double>();
  pb.demand_max = c.at("demand_range").at(1).get<double>();
  pb.initial_soc = c.value("initial_soc", 0.0);
  pb.initial_wind = c.at("initial_wind").get<double>();
  pb.initial_demand = c.at("initial_demand").get<double>();
  pb.wind_through_battery_only = c.value("wind_through_battery_only", false);
  pb.terminal_soc_credit = c.value("terminal_soc_credit", false);
  pb.validate();
  return pb;
}

int cmd_optimize(const RunContext& ctx, bool run_oracle) {
  DispatchProblem pb = problem_from_config(ctx.config, ctx.base);
  auto [policy, value] = solve_dp(pb);

  TransitionKernel kw = discretize(pb.wind_model, pb.wind_bins, pb.wind_min, pb.wind_max, pb.dt);
  TransitionKernel kd =
      discretize(pb.demand_model, pb.demand_bins, pb.demand_min, pb.demand_max, pb.dt);
  double v0 = value.at(0, pb.snap_soc(pb.initial_soc), kw.bin_of(pb.initial_wind),
                       kd.bin_of(pb.initial_demand));

  json solution{{"policy", policy}, {"value", value}, {"value_at_initial_J", v0}};
  if (run_oracle) {
    double oracle = brute_force_optimal(pb);
    solution["oracle_value_J"] = oracle;
    std::cout << "oracle value: " << format_g17(oracle) << " J\n";
  }
  std::string out = ctx.out_path("solution_out", "solution.json");
  write_json_file(out, solution);
  std::cout << "optimal expected fossil energy from initial state: " << format_g17(v0)
            << " J\nwrote " << out << '\n';
  return 0;
}

int cmd_evaluate(const RunContext& ctx) {
  const json& c = ctx.config;
  fs::path problem_cfg_path = c.at("problem_config").get<std::string>();
  if (!problem_cfg_path.is_absolute()) problem_cfg_path = ctx.base / problem_cfg_path;
  std::ifstream pin(problem_cfg_path);
  if (!pin) throw std::invalid_argument("cannot open problem config " + problem_cfg_path.string());
  json pc = json::parse(pin);
  DispatchProblem pb = problem_from_config(pc, problem_cfg_path.parent_path());

  std::ifstream sin(ctx.in_path("solution"));
  if (!sin) throw std::invalid_argument("cannot open solution file");
  json sj = json::parse(sin);
  Policy policy = sj.at("policy").get<Policy>();
  validate_policy(policy, pb);

  long n_rollouts = c.at("n_rollouts").get<long>();
  std::uint64_t seed = ctx.seed_or("seed", 0);
  RolloutStats stats = evaluate_policy(policy, pb, n_rollouts, seed);
  auto trace = rollout_trace(policy, pb, seed);

  std::string stats_out = ctx.out_path("stats_out", "rollout_stats.json");
  write_json_file(stats_out, json(stats));
  std::string trace_out = ctx.out_path("trace_out", "trace.csv");
  write_trace_csv(trace_out, trace);
  std::cout << "mean fossil energy: " << format_g17(stats.mean_fossil_J) << " J over "
            << n_rollouts << " rollouts\nwrote " << stats_out << " and " << trace_out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural-SDE wind/demand modeling, power statistics, and storage dispatch"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--seed", seed, "override every seed in the config");
    sub->add_option("--out", out_dir, "directory for output files");
  };

  CLI::App* calibrate = app.add_subcommand("calibrate", "fit an SDE model to a series CSV");
  CLI::App* simulate = app.add_subcommand("simulate", "simulate a path ensemble");
  CLI::App* power = app.add_subcommand("power", "wind power/energy report");
  CLI::App* optimize = app.add_subcommand("optimize", "solve the dispatch problem");
  CLI::App* evaluate = app.add_subcommand("evaluate", "Monte Carlo rollout of a policy");
  CLI::App* synth = app.add_subcommand("synth", "generate benchmark series");
  synth->group("");  // hidden
  bool oracle = false;
  optimize->add_flag("--oracle", oracle, "also run the exhaustive oracle")->group("");
  for (CLI::App* sub : {calibrate, simulate, power, optimize, evaluate, synth}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunContext ctx = load_context(config_path, out_dir, seed);
    if (calibrate->parsed()) return cmd_calibrate(ctx);
    if (simulate->parsed()) return cmd_simulate(ctx);
    if (power->parsed()) return cmd_power(ctx);
    if (optimize->parsed()) return cmd_optimize(ctx, oracle);
    if (evaluate->parsed()) return cmd_evaluate(ctx);
    if (synth->parsed()) return cmd_synth(ctx);
  } catch (const csv_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const balance_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const divergence_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
