#include "transmpc/evaluator.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "transmpc/kernels.hpp"

namespace transmpc {

namespace {

// shortest representation that round-trips exactly
std::string fmt(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<EvalState> draw_states(const Scenario& scenario,
                                   const ResetParams& reset, bool robot_task,
                                   int n_states, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<EvalState> out(static_cast<std::size_t>(n_states));
  for (auto& s : out)
    s.state = sample_reset_state(scenario, reset, robot_task, rng, &s.anchor);
  return out;
}

}  // namespace

std::vector<double> relative_accuracy(const std::vector<double>& u_theta,
                                      const std::vector<double>& u_star,
                                      const ActionBounds& bounds) {
  if (u_theta.size() != u_star.size())
    throw ad::ShapeError("relative_accuracy: shape mismatch");
  const std::size_t dims = bounds.dims();
  std::vector<double> out(u_theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t d = i % dims;
    const double range = bounds.hi[d] - bounds.lo[d];
    if (range <= 0.0)
      throw ad::ShapeError("relative_accuracy: degenerate bounds");
    out[i] = std::fabs(u_theta[i] - u_star[i]) / range;
  }
  return out;
}

double AccuracyReport::first_element_mean() const {
  double acc = 0.0;
  for (const auto& dim : mean_err) acc += dim.front();
  return acc / static_cast<double>(mean_err.size());
}

double AccuracyReport::first_element_mean(int dim) const {
  return mean_err[static_cast<std::size_t>(dim)].front();
}

std::vector<AccuracyReport> accuracy_sweep(
    const std::vector<const Policy*>& policies,
    const std::vector<std::string>& names, const Plant& plant,
    const Scenario& scenario, const ResetParams& reset, int horizon,
    const OracleSettings& oracle, const EvalSettings& eval,
    std::uint64_t seed) {
  std::vector<SequenceProducer> producers;
  producers.reserve(policies.size());
  for (const Policy* p : policies)
    producers.push_back(
        [p](const std::vector<double>& state, const RefWindow& refs) {
          return p->forward(state, refs).data;
        });
  return accuracy_sweep_producers(producers, names, plant, scenario, reset,
                                  horizon, oracle, eval, seed);
}

std::vector<AccuracyReport> accuracy_sweep_producers(
    const std::vector<SequenceProducer>& producers,
    const std::vector<std::string>& names, const Plant& plant,
    const Scenario& scenario, const ResetParams& reset, int horizon,
    const OracleSettings& oracle, const EvalSettings& eval, std::uint64_t seed,
    const std::vector<EvalState>* states_override) {
  if (producers.empty() || producers.size() != names.size())
    throw ad::ShapeError("accuracy_sweep: bad policy list");
  const bool robot = plant.layout.i_obsdx >= 0;
  const std::vector<EvalState> states =
      states_override ? *states_override
                      : draw_states(scenario, reset, robot, eval.n_states,
                                    seed);
  const std::size_t n = states.size();
  const std::size_t dims = plant.bounds.dims();
  const std::size_t npol = producers.size();

  // per state: converged flag + per policy flat error vectors
  std::vector<char> converged(n, 0);
  std::vector<std::vector<std::vector<double>>> errors(
      npol, std::vector<std::vector<double>>(n));
  std::string fatal;  // exceptions must not unwind through the parallel loop

  const int threads = std::max(1, eval.threads);
#pragma omp parallel for num_threads(threads) schedule(dynamic) if (threads > 1)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      const RefWindow refs = scenario.window(states[i].anchor, horizon);
      OracleProblem problem;
      problem.plant = &plant;
      problem.x0 = states[i].state;
      problem.refs = refs;
      problem.settings = oracle;
      problem.settings.seed = oracle.seed + i;
      std::vector<std::vector<double>> policy_outputs(npol);
      bool produced = true;
      for (std::size_t p = 0; p < npol; ++p) {
        try {
          policy_outputs[p] = producers[p](states[i].state, refs);
          problem.extra_starts.push_back(policy_outputs[p]);
        } catch (const ad::NumericalError&) {
          produced = false;
        }
      }
      if (!produced) continue;
      try {
        const OracleSolution sol = solve(problem);
        if (!sol.converged) continue;
        converged[i] = 1;
        for (std::size_t p = 0; p < npol; ++p)
          errors[p][i] = relative_accuracy(policy_outputs[p], sol.controls,
                                           plant.bounds);
      } catch (const ad::NumericalError&) {
        // leave the state excluded
      }
    } catch (const std::exception& e) {
#pragma omp critical
      fatal = e.what();
    }
  }
  if (!fatal.empty())
    throw std::runtime_error("accuracy_sweep: " + fatal);

  std::size_t used = 0;
  for (char c : converged) used += static_cast<std::size_t>(c);
  const std::size_t failures = n - used;
  if (static_cast<double>(failures) >
      eval.max_oracle_failure_rate * static_cast<double>(n))
    throw ad::NumericalError("accuracy_sweep: oracle failure rate " +
                             std::to_string(failures) + "/" +
                             std::to_string(n) + " above the threshold");

  std::vector<AccuracyReport> reports;
  for (std::size_t p = 0; p < npol; ++p) {
    AccuracyReport r;
    r.policy_name = names[p];
    r.horizon = horizon;
    r.states_requested = n;
    r.states_used = used;
    r.oracle_failures = failures;
    r.mean_err.assign(dims, std::vector<double>(
                                static_cast<std::size_t>(horizon), 0.0));
    r.max_err = r.mean_err;
    for (std::size_t i = 0; i < n; ++i) {
      if (!converged[i]) continue;
      const auto& e = errors[p][i];
      for (std::size_t idx = 0; idx < static_cast<std::size_t>(horizon); ++idx)
        for (std::size_t d = 0; d < dims; ++d) {
          const double v = e[idx * dims + d];
          r.mean_err[d][idx] += v;
          r.max_err[d][idx] = std::max(r.max_err[d][idx], v);
        }
    }
    for (auto& dim : r.mean_err)
      for (double& v : dim) v /= static_cast<double>(used);
    reports.push_back(std::move(r));
  }
  return reports;
}

FirstElementSweep accuracy_sweep_first_element(
    const Policy& policy, const Plant& plant, const Scenario& scenario,
    const ResetParams& reset, const std::vector<int>& horizons,
    const OracleSettings& oracle, const EvalSettings& eval,
    std::uint64_t seed) {
  FirstElementSweep sweep;
  sweep.horizons = horizons;
  const std::size_t dims = plant.bounds.dims();
  sweep.mean_err.assign(dims, std::vector<double>(horizons.size(), 0.0));
  const std::vector<const Policy*> pols{&policy};
  const std::vector<std::string> names{"policy"};
  for (std::size_t h = 0; h < horizons.size(); ++h) {
    const auto reports = accuracy_sweep(pols, names, plant, scenario, reset,
                                        horizons[h], oracle, eval, seed);
    sweep.oracle_failures += reports[0].oracle_failures;
    for (std::size_t d = 0; d < dims; ++d)
      sweep.mean_err[d][h] = reports[0].mean_err[d][0];
  }
  return sweep;
}

Controller policy_controller(const Policy& policy, const Scenario& scenario,
                             int horizon) {
  return [&policy, scenario, horizon](const std::vector<double>& state,
                                      long anchor) {
    const RefWindow refs = scenario.window(anchor, horizon);
    return policy.act(state, refs);
  };
}

Controller mpc_controller(const Plant& plant, const Scenario& scenario,
                          int horizon, const OracleSettings& oracle,
                          const Policy* warm_policy) {
  // shift warm start carried across receding-horizon steps
  auto warm = std::make_shared<std::vector<double>>();
  return [&plant, scenario, horizon, oracle, warm_policy,
          warm](const std::vector<double>& state, long anchor) {
    const RefWindow refs = scenario.window(anchor, horizon);
    OracleProblem problem;
    problem.plant = &plant;
    problem.x0 = state;
    problem.refs = refs;
    problem.settings = oracle;
    const std::size_t m = plant.bounds.dims();
    if (!warm->empty()) problem.extra_starts.push_back(*warm);
    if (warm_policy)
      problem.extra_starts.push_back(
          warm_policy->forward(state, refs).data);
    const OracleSolution sol = solve(problem);
    // shift by one step, repeating the last input
    *warm = sol.controls;
    warm->erase(warm->begin(),
                warm->begin() + static_cast<std::ptrdiff_t>(m));
    warm->insert(warm->end(), warm->end() - static_cast<std::ptrdiff_t>(m),
                 warm->end());
    return std::vector<double>(sol.controls.begin(),
                               sol.controls.begin() +
                                   static_cast<std::ptrdiff_t>(m));
  };
}

ClosedLoopReport closed_loop_eval(const Controller& controller,
                                  const std::string& controller_name,
                                  const Plant& plant, const Scenario& scenario,
                                  int horizon, const EvalSettings& eval,
                                  bool robot_task, const CostWeights* weights,
                                  bool place_obstacle, double obstacle_x,
                                  double obstacle_y) {
  ClosedLoopReport report;
  report.controller_name = controller_name;
  report.scenario_name = scenario.name();
  report.horizon = horizon;
  report.steps = eval.steps;
  report.min_clearance = std::numeric_limits<double>::infinity();

  TrackingEnv env(plant, scenario, robot_task);
  env.reset_to_path(0);
  if (robot_task && place_obstacle) env.set_obstacle(obstacle_x, obstacle_y);

  report.trace_header = {"t", "p_x", "p_y", "phi", "v"};
  for (int i = 4; i < plant.n_state; ++i)
    report.trace_header.push_back("x" + std::to_string(i));
  for (const char* c : {"ref_px", "ref_py", "ref_phi", "ref_v", "u0", "u1",
                        "running_cost"})
    report.trace_header.push_back(c);

  double dy_acc = 0.0, cost_acc = 0.0;
  int done = 0;
  for (int t = 0; t < eval.steps; ++t) {
    const auto ref = scenario.row(env.anchor());
    const std::vector<double> state = env.state();
    std::vector<double> u;
    try {
      u = clamp_input(controller(state, env.anchor()), plant.bounds);
      const double l = plant
                           .cost(ad::Tensor::vector(state), ref,
                                 ad::Tensor::vector(u))
                           .item();
      std::vector<double> row;
      row.push_back(static_cast<double>(t) / eval.control_hz);
      for (int i = 0; i < plant.n_state; ++i) {
        double v = state[static_cast<std::size_t>(i)];
        if (i == plant.layout.i_phi) v = wrap_angle(v);
        row.push_back(v);
      }
      for (double r : ref) row.push_back(r);
      row.push_back(u[0]);
      row.push_back(u[1]);
      row.push_back(l);
      report.trace.push_back(std::move(row));

      dy_acc += std::fabs(state[1] - ref[1]);
      cost_acc += l;
      if (robot_task && weights) {
        const double lc = clearance(state, *weights, plant.layout);
        report.min_clearance = std::min(report.min_clearance, lc);
        if (lc < -weights->r_safe) report.collision = true;
      }
      env.step(u);
      ++done;
    } catch (const ad::NumericalError&) {
      report.diverged = true;
      report.divergence_step = t;
      break;
    }
    if (std::fabs(state[1] - ref[1]) > eval.divergence_abort) {
      report.diverged = true;
      report.divergence_step = t;
      break;
    }
  }
  report.dy_mean = done > 0 ? dy_acc / static_cast<double>(done) : 0.0;
  report.cost_total = cost_acc;
  report.cost_mean = done > 0 ? cost_acc / static_cast<double>(done) : 0.0;
  return report;
}

ClosedLoopReport obstacle_eval(const Policy& policy, const Plant& plant,
                               const Scenario& scenario, double obstacle_x,
                               double obstacle_y, int horizon,
                               const CostWeights& weights,
                               const EvalSettings& eval) {
  const Controller c = policy_controller(policy, scenario, horizon);
  return closed_loop_eval(c, "policy", plant, scenario, horizon, eval,
                          /*robot_task=*/true, &weights,
                          /*place_obstacle=*/true, obstacle_x, obstacle_y);
}

std::vector<LatencyRow> latency_bench(const Policy& policy,
                                      const Scenario& scenario,
                                      const std::vector<int>& horizons,
                                      int repetitions) {
  using clock = std::chrono::steady_clock;
  const int saved_threads = kernels::max_threads();
  kernels::set_max_threads(1);  // pinned single-threaded for stable timing

  std::vector<double> state(
      static_cast<std::size_t>(policy.params.hyper.n_state), 0.0);
  {
    const auto r = scenario.row(0);
    state[0] = r[0];
    state[1] = r[1];
    state[2] = r[2];
    state[3] = r[3];
  }

  std::vector<LatencyRow> rows;
  for (int n : horizons) {
    const RefWindow refs = scenario.window(0, n);
    (void)policy.forward(state, refs);  // warm-up, discarded
    std::vector<double> samples;
    samples.reserve(static_cast<std::size_t>(repetitions));
    for (int r = 0; r < repetitions; ++r) {
      const auto t0 = clock::now();
      (void)policy.forward(state, refs);
      const auto t1 = clock::now();
      samples.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(samples.begin(), samples.end());
    LatencyRow row;
    row.horizon = n;
    row.repetitions = repetitions;
    row.median_s = samples[samples.size() / 2];
    row.p95_s = samples[static_cast<std::size_t>(
        std::min<double>(static_cast<double>(samples.size()) - 1.0,
                         std::ceil(0.95 * static_cast<double>(samples.size()))))];
    rows.push_back(row);
  }
  kernels::set_max_threads(saved_threads);
  return rows;
}

double expected_cost(const Policy& policy, const TrainTask& task,
                     const TrainConfig& cfg, int n_states,
                     std::uint64_t seed) {
  Rng rng(seed);
  double acc = 0.0;
  int used = 0;
  for (int i = 0; i < n_states; ++i) {
    const int sid =
        task.scenarios.size() > 1
            ? static_cast<int>(rng.uniform_int(
                  0, static_cast<std::int64_t>(task.scenarios.size()) - 1))
            : 0;
    const Scenario& scenario = task.scenarios[static_cast<std::size_t>(sid)];
    long anchor = 0;
    const std::vector<double> state = sample_reset_state(
        scenario, cfg.reset, task.robot_task, rng, &anchor);
    const int horizon =
        policy.params.hyper.arch == PolicyArch::kMlp
            ? policy.params.hyper.mlp_horizon
            : static_cast<int>(rng.uniform_int(1, cfg.N_max));
    const RefWindow refs = scenario.window(anchor, horizon);
    try {
      const ad::Tensor controls = policy.forward(state, refs);
      acc += rollout(task.plant, state, controls, refs).total_cost.item();
      ++used;
    } catch (const ad::NumericalError&) {
      // skip diverged rollouts; both policies see identical draws anyway
    }
  }
  if (used == 0)
    throw ad::NumericalError("expected_cost: every rollout diverged");
  return acc / static_cast<double>(used);
}

// ---------------------------------------------------------------------------
// Chi-square upper tail

namespace {

// regularized upper incomplete gamma Q(a, x), series + continued fraction
double gamma_q(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw ad::ShapeError("gamma_q: bad arguments");
  if (x == 0.0) return 1.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    // P(a,x) by series, Q = 1 - P
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    const double p = sum * std::exp(-x + a * std::log(x) - gln);
    return 1.0 - p;
  }
  // Q(a,x) by Lentz continued fraction
  const double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - gln) * h;
}

}  // namespace

double chi_square_sf(double x, int dof) {
  return gamma_q(0.5 * static_cast<double>(dof), 0.5 * x);
}

double horizon_uniformity_pvalue(const std::vector<int>& draws, int n_max) {
  std::vector<double> counts(static_cast<std::size_t>(n_max), 0.0);
  for (int d : draws) {
    if (d < 1 || d > n_max)
      throw ad::ShapeError("horizon_uniformity: draw out of range");
    counts[static_cast<std::size_t>(d - 1)] += 1.0;
  }
  const double expected =
      static_cast<double>(draws.size()) / static_cast<double>(n_max);
  double stat = 0.0;
  for (double c : counts) stat += (c - expected) * (c - expected) / expected;
  return chi_square_sf(stat, n_max - 1);
}

// ---------------------------------------------------------------------------
// Report emission

void write_accuracy_csv(const std::vector<AccuracyReport>& reports,
                        const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "policy,horizon,dim,seq_index,mean_rel_err,max_rel_err,states_used,"
        "oracle_failures\n";
  for (const auto& r : reports)
    for (std::size_t d = 0; d < r.mean_err.size(); ++d)
      for (std::size_t i = 0; i < r.mean_err[d].size(); ++i)
        os << r.policy_name << ',' << r.horizon << ',' << d << ',' << i << ','
           << fmt(r.mean_err[d][i]) << ',' << fmt(r.max_err[d][i]) << ','
           << r.states_used << ',' << r.oracle_failures << '\n';
}

void write_first_element_csv(const FirstElementSweep& sweep,
                             const std::string& name,
                             const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "policy,horizon,dim,mean_rel_err\n";
  for (std::size_t h = 0; h < sweep.horizons.size(); ++h)
    for (std::size_t d = 0; d < sweep.mean_err.size(); ++d)
      os << name << ',' << sweep.horizons[h] << ',' << d << ','
         << fmt(sweep.mean_err[d][h]) << '\n';
}

void write_closed_loop_csv(const std::vector<ClosedLoopReport>& reports,
                           const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "controller,scenario,horizon,steps,dy_mean,cost_mean,cost_total,"
        "diverged,divergence_step,min_clearance,collision\n";
  for (const auto& r : reports)
    os << r.controller_name << ',' << r.scenario_name << ',' << r.horizon
       << ',' << r.steps << ',' << fmt(r.dy_mean) << ',' << fmt(r.cost_mean)
       << ',' << fmt(r.cost_total) << ',' << (r.diverged ? 1 : 0) << ','
       << r.divergence_step << ','
       << fmt(std::isfinite(r.min_clearance) ? r.min_clearance : 0.0) << ','
       << (r.collision ? 1 : 0) << '\n';
}

void write_trace_csv(const ClosedLoopReport& report, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  for (std::size_t i = 0; i < report.trace_header.size(); ++i)
    os << (i ? "," : "") << report.trace_header[i];
  os << '\n';
  for (const auto& row : report.trace) {
    for (std::size_t i = 0; i < row.size(); ++i)
      os << (i ? "," : "") << fmt(row[i]);
    os << '\n';
  }
}

void write_latency_csv(const std::vector<LatencyRow>& rows,
                       const std::string& name, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "policy,horizon,median_s,p95_s,repetitions\n";
  for (const auto& r : rows)
    os << name << ',' << r.horizon << ',' << fmt(r.median_s) << ','
       << fmt(r.p95_s) << ',' << r.repetitions << '\n';
}

void write_long_format_csv(
    const std::vector<std::tuple<int, std::string, std::string, double>>& rows,
    const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "N,metric,algorithm,value\n";
  for (const auto& [n, metric, algo, value] : rows)
    os << n << ',' << metric << ',' << algo << ',' << fmt(value) << '\n';
}

void write_summary_json(const std::string& config_hash, std::uint64_t seed,
                        const std::string& checkpoint_id,
                        const std::vector<std::pair<std::string, double>>& kv,
                        const std::string& path) {
  nlohmann::json j;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["checkpoint"] = checkpoint_id;
  for (const auto& [k, v] : kv) j["metrics"][k] = v;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << j.dump(2) << '\n';
}

}  // namespace transmpc
