// Command-line front end: training, evaluation, latency benchmarking, oracle
// validation, and gradient checking, all driven by JSON configs.
//
// Exit codes: 0 success, 2 config error, 3 acceptance-threshold failure,
// 4 runtime divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "transmpc/config.hpp"
#include "transmpc/evaluator.hpp"
#include "transmpc/gradcheck.hpp"
#include "transmpc/kernels.hpp"
#include "transmpc/trainer.hpp"

namespace {

using namespace transmpc;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitAcceptance = 3;
constexpr int kExitDivergence = 4;

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::string profile = "desk";
  std::string checkpoint;
  long seed = -1;  // -1: take the config's seed
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_checkpoint) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--profile", args.profile, "desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", args.seed, "seed override");
  cmd->add_option("--set", args.overrides, "key=value override (repeatable)");
  if (needs_checkpoint)
    cmd->add_option("--checkpoint", args.checkpoint, "policy checkpoint")
        ->required();
}

Config load_config(const CommonArgs& args) {
  Config cfg = Config::build(args.profile, args.config_path, args.overrides);
  if (args.seed >= 0) cfg.set_seed(static_cast<std::uint64_t>(args.seed));
  return cfg;
}

// every run directory gets the effective config, seed, and version string
void write_run_info(const Config& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream os(out_dir + "/config_effective.json", std::ios::trunc);
  os << cfg.dump() << '\n';
  nlohmann::json info;
  info["version"] = kVersion;
  info["seed"] = cfg.seed();
  info["config_hash"] = cfg.hash();
  std::ofstream is(out_dir + "/run_info.json", std::ios::trunc);
  is << info.dump(2) << '\n';
}

void write_error_report(const std::string& out_dir, int code,
                        const std::string& what) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  nlohmann::json j;
  j["error"] = what;
  j["exit_code"] = code;
  std::ofstream os(out_dir + "/error.json", std::ios::trunc);
  os << j.dump(2) << '\n';
}

int cmd_train(const CommonArgs& args) {
  const Config cfg = load_config(args);
  write_run_info(cfg, args.out_dir);
  const TrainTask task = cfg.train_task();
  const TrainConfig tc = cfg.train_config();
  const TrainResult result = train(task, tc, args.out_dir);
  const double final_loss =
      result.log.empty() ? std::nan("") : result.log.back().loss;
  std::printf("trained %d iterations, final loss %.6g, %d divergence resets, "
              "%d aborted steps\n",
              tc.iterations, final_loss, result.divergence_resets,
              result.aborted_steps);
  std::printf("checkpoint: %s/policy_final.tmpc\n", args.out_dir.c_str());
  return kExitOk;
}

int cmd_eval(const CommonArgs& args) {
  const Config cfg = load_config(args);
  write_run_info(cfg, args.out_dir);
  const Policy policy = load_policy(args.checkpoint);
  const Plant plant = cfg.plant();
  const Scenario scenario = cfg.scenario_by_name(cfg.eval_scenario_name());
  const EvalSettings eval = cfg.eval_settings();
  const OracleSettings oracle = cfg.oracle_settings();
  const TrainConfig tc = cfg.train_config();
  kernels::set_max_threads(eval.threads);

  std::vector<std::tuple<int, std::string, std::string, double>> long_rows;

  if (!cfg.robot_task()) {
    const int acc_n = cfg.json().at("eval").at("accuracy_horizon").get<int>();
    const auto reports =
        accuracy_sweep({&policy}, {"policy"}, plant, scenario, tc.reset,
                       acc_n, oracle, eval, cfg.seed());
    write_accuracy_csv(reports, args.out_dir + "/accuracy.csv");
    long_rows.emplace_back(acc_n, "first_element_mean_rel_err", "policy",
                           reports[0].first_element_mean());

    const auto fe_list = cfg.json()
                             .at("eval")
                             .at("first_element_horizons")
                             .get<std::vector<int>>();
    if (!fe_list.empty()) {
      const FirstElementSweep sweep = accuracy_sweep_first_element(
          policy, plant, scenario, tc.reset, fe_list, oracle, eval,
          cfg.seed());
      write_first_element_csv(sweep, "policy",
                              args.out_dir + "/accuracy_first_element.csv");
      for (std::size_t i = 0; i < sweep.horizons.size(); ++i)
        for (std::size_t d = 0; d < sweep.mean_err.size(); ++d)
          long_rows.emplace_back(sweep.horizons[i],
                                 "first_element_mean_rel_err_dim" +
                                     std::to_string(d),
                                 "policy", sweep.mean_err[d][i]);
    }
  }

  std::vector<ClosedLoopReport> cl_reports;
  bool diverged = false;
  for (int n : cfg.closed_loop_horizons()) {
    if (policy.params.hyper.arch == PolicyArch::kMlp &&
        n != policy.params.hyper.mlp_horizon)
      continue;  // the MLP evaluates only at its trained horizon
    ClosedLoopReport r;
    if (cfg.robot_task()) {
      const CostWeights w = cfg.cost_weights();
      const long obs_step =
          cfg.json().at("eval").at("obstacle_step").get<long>();
      const auto obs = scenario.row(obs_step);
      r = obstacle_eval(policy, plant, scenario, obs[0], obs[1], n, w, eval);
    } else {
      r = closed_loop_eval(policy_controller(policy, scenario, n), "policy",
                           plant, scenario, n, eval);
    }
    diverged = diverged || r.diverged;
    write_trace_csv(r, args.out_dir + "/trace_" + scenario.name() + "_N" +
                           std::to_string(n) + ".csv");
    long_rows.emplace_back(n, "dy_mean", "policy", r.dy_mean);
    long_rows.emplace_back(n, "cost_mean", "policy", r.cost_mean);
    if (cfg.robot_task())
      long_rows.emplace_back(n, "min_clearance", "policy", r.min_clearance);
    cl_reports.push_back(std::move(r));
  }
  write_closed_loop_csv(cl_reports, args.out_dir + "/closed_loop.csv");
  write_long_format_csv(long_rows, args.out_dir + "/metrics_long.csv");

  std::vector<std::pair<std::string, double>> kv;
  for (const auto& r : cl_reports) {
    kv.emplace_back("dy_mean_N" + std::to_string(r.horizon), r.dy_mean);
    kv.emplace_back("cost_mean_N" + std::to_string(r.horizon), r.cost_mean);
  }
  write_summary_json(cfg.hash(), cfg.seed(), args.checkpoint, kv,
                     args.out_dir + "/summary.json");
  std::printf("eval reports written to %s\n", args.out_dir.c_str());
  if (diverged) {
    write_error_report(args.out_dir, kExitDivergence,
                       "closed-loop run diverged");
    return kExitDivergence;
  }
  return kExitOk;
}

int cmd_bench(const CommonArgs& args) {
  const Config cfg = load_config(args);
  write_run_info(cfg, args.out_dir);
  const Policy policy = load_policy(args.checkpoint);
  const Scenario scenario = cfg.scenario_by_name(cfg.eval_scenario_name());
  const EvalSettings eval = cfg.eval_settings();
  std::vector<int> horizons = cfg.bench_horizons();
  if (policy.params.hyper.arch == PolicyArch::kMlp)
    horizons = {policy.params.hyper.mlp_horizon};
  const auto rows =
      latency_bench(policy, scenario, horizons, eval.bench_repetitions);
  write_latency_csv(rows, "policy", args.out_dir + "/latency.csv");
  for (const auto& r : rows)
    std::printf("N=%2d  median %.1f us  p95 %.1f us\n", r.horizon,
                1e6 * r.median_s, 1e6 * r.p95_s);
  return kExitOk;
}

int cmd_oracle(const CommonArgs& args) {
  const Config cfg = load_config(args);
  write_run_info(cfg, args.out_dir);
  const OracleSettings oracle = cfg.oracle_settings();

  // finite-horizon LQ instance: discrete double integrator
  const double dt = 0.1;
  const std::vector<double> A{1.0, dt, 0.0, 1.0};
  const std::vector<double> B{0.5 * dt * dt, dt};
  const std::vector<double> Q{1.0, 0.0, 0.0, 1.0};
  const std::vector<double> R{1.0};
  const std::vector<double> x0{1.0, -0.5};
  const int horizon = 10;

  ActionBounds wide{{-1e9}, {1e9}};
  const Plant lq = make_lq_plant(A, B, Q, R, 2, 1, wide);
  OracleProblem problem;
  problem.plant = &lq;
  problem.x0 = x0;
  problem.refs.rows.assign(static_cast<std::size_t>(horizon),
                           {0.0, 0.0, 0.0, 0.0});
  problem.settings = oracle;
  const OracleSolution sol = solve(problem);
  const std::vector<double> riccati =
      lqr_closed_form(A, B, Q, R, 2, 1, horizon, x0);

  double max_diff = 0.0;
  for (std::size_t i = 0; i < riccati.size(); ++i)
    max_diff = std::max(max_diff, std::fabs(riccati[i] - sol.controls[i]));

  // bounds forced active
  ActionBounds tight{{-0.05}, {0.05}};
  const Plant lq_tight = make_lq_plant(A, B, Q, R, 2, 1, tight);
  OracleProblem tight_problem = problem;
  tight_problem.plant = &lq_tight;
  const OracleSolution tight_sol = solve(tight_problem);
  bool feasible = true;
  for (double u : tight_sol.controls)
    feasible = feasible && u >= -0.05 - 1e-15 && u <= 0.05 + 1e-15;

  nlohmann::json report;
  report["riccati_max_diff"] = max_diff;
  report["residual"] = sol.residual;
  report["converged"] = sol.converged;
  report["bounded_residual"] = tight_sol.residual;
  report["bounded_converged"] = tight_sol.converged;
  report["bounded_feasible"] = feasible;
  const bool pass = max_diff < 1e-6 && sol.converged &&
                    sol.residual < oracle.tol && tight_sol.converged &&
                    tight_sol.residual < oracle.tol && feasible;
  report["pass"] = pass;
  std::filesystem::create_directories(args.out_dir);
  std::ofstream os(args.out_dir + "/oracle_validation.json", std::ios::trunc);
  os << report.dump(2) << '\n';
  std::printf("riccati max |diff| = %.3g, residual = %.3g, bounded residual "
              "= %.3g, feasible = %d -> %s\n",
              max_diff, sol.residual, tight_sol.residual, feasible ? 1 : 0,
              pass ? "PASS" : "FAIL");
  if (!pass) {
    write_error_report(args.out_dir, kExitAcceptance,
                       "oracle validation failed");
    return kExitAcceptance;
  }
  return kExitOk;
}

int cmd_gradcheck(const CommonArgs& args) {
  const Config cfg = load_config(args);
  write_run_info(cfg, args.out_dir);
  const TrainTask task = cfg.train_task();
  const GradCheckSuiteResult result =
      run_gradcheck_suite(task, 3, 1e-6, 1e-4, 4);
  for (const auto& item : result.items)
    std::printf("%-32s max rel err %.3g  %s\n", item.name.c_str(),
                item.max_rel_err, item.pass ? "PASS" : "FAIL");
  std::printf("overall max rel err %.3g -> %s\n", result.max_rel_err,
              result.pass ? "PASS" : "FAIL");
  nlohmann::json j;
  for (const auto& item : result.items)
    j["checks"][item.name] = item.max_rel_err;
  j["max_rel_err"] = result.max_rel_err;
  j["pass"] = result.pass;
  std::filesystem::create_directories(args.out_dir);
  std::ofstream os(args.out_dir + "/gradcheck.json", std::ios::trunc);
  os << j.dump(2) << '\n';
  if (!result.pass) {
    write_error_report(args.out_dir, kExitAcceptance, "gradient check failed");
    return kExitAcceptance;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TransMPC: encoder-only explicit MPC policy toolkit"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, bench_args, oracle_args, grad_args;
  CLI::App* train_cmd =
      app.add_subcommand("train", "train a policy from a config");
  add_common(train_cmd, train_args, false);
  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "accuracy, closed-loop, and obstacle reports for a checkpoint");
  add_common(eval_cmd, eval_args, true);
  CLI::App* bench_cmd =
      app.add_subcommand("bench", "inference latency benchmark");
  add_common(bench_cmd, bench_args, true);
  CLI::App* oracle_cmd = app.add_subcommand(
      "oracle", "validate the solver against the Riccati closed form");
  add_common(oracle_cmd, oracle_args, false);
  CLI::App* grad_cmd = app.add_subcommand(
      "gradcheck", "finite-difference verification of tape gradients");
  add_common(grad_cmd, grad_args, false);

  CLI11_PARSE(app, argc, argv);

  const CommonArgs* args = &train_args;
  int (*handler)(const CommonArgs&) = cmd_train;
  if (eval_cmd->parsed()) {
    args = &eval_args;
    handler = cmd_eval;
  } else if (bench_cmd->parsed()) {
    args = &bench_args;
    handler = cmd_bench;
  } else if (oracle_cmd->parsed()) {
    args = &oracle_args;
    handler = cmd_oracle;
  } else if (grad_cmd->parsed()) {
    args = &grad_args;
    handler = cmd_gradcheck;
  }

  try {
    return handler(*args);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    write_error_report(args->out_dir, kExitConfig, e.what());
    return kExitConfig;
  } catch (const ad::NumericalError& e) {
    std::fprintf(stderr, "runtime divergence: %s\n", e.what());
    write_error_report(args->out_dir, kExitDivergence, e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    write_error_report(args->out_dir, 1, e.what());
    return 1;
  }
}
