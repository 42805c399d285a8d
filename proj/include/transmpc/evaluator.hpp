#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "transmpc/oracle.hpp"
#include "transmpc/policy.hpp"
#include "transmpc/trainer.hpp"
#include "transmpc/vehicle.hpp"

namespace transmpc {

// |u_theta - u_star| / (u_max - u_min), elementwise. Shapes must match; the
// bounds are tiled across the sequence.
std::vector<double> relative_accuracy(const std::vector<double>& u_theta,
                                      const std::vector<double>& u_star,
                                      const ActionBounds& bounds);

// Per control dimension and sequence index statistics over a state sample.
struct AccuracyReport {
  std::string policy_name;
  int horizon = 0;
  std::size_t states_requested = 0;
  std::size_t states_used = 0;      // converged oracle solves
  std::size_t oracle_failures = 0;  // excluded and counted
  std::vector<std::vector<double>> mean_err;  // [dim][seq index]
  std::vector<std::vector<double>> max_err;   // [dim][seq index]

  double first_element_mean() const;        // across dims
  double first_element_mean(int dim) const;
};

struct EvalSettings {
  int n_states = 200;
  int steps = 170;
  double control_hz = 10.0;
  double divergence_abort = 5.0;       // m of lateral error
  double max_oracle_failure_rate = 0.1;
  int bench_repetitions = 200;
  int threads = 1;
};

// Anything that maps (state, reference window) to a flat control sequence.
using SequenceProducer = std::function<std::vector<double>(
    const std::vector<double>&, const RefWindow&)>;

// One evaluation start: a state plus its reference-path anchor.
struct EvalState {
  std::vector<double> state;
  long anchor = 0;
};

// Full-sequence accuracy at a fixed horizon for several policies sharing one
// oracle solve per state (each policy's output also seeds the oracle).
// Throws when the oracle failure rate exceeds the configured threshold.
std::vector<AccuracyReport> accuracy_sweep(
    const std::vector<const Policy*>& policies,
    const std::vector<std::string>& names, const Plant& plant,
    const Scenario& scenario, const ResetParams& reset, int horizon,
    const OracleSettings& oracle, const EvalSettings& eval,
    std::uint64_t seed);

// states_override, when given, replaces the reset-distribution draw (useful
// for plants whose state is not a vehicle pose).
std::vector<AccuracyReport> accuracy_sweep_producers(
    const std::vector<SequenceProducer>& producers,
    const std::vector<std::string>& names, const Plant& plant,
    const Scenario& scenario, const ResetParams& reset, int horizon,
    const OracleSettings& oracle, const EvalSettings& eval, std::uint64_t seed,
    const std::vector<EvalState>* states_override = nullptr);

// First-element accuracy of one policy as the horizon varies.
struct FirstElementSweep {
  std::vector<int> horizons;
  std::vector<std::vector<double>> mean_err;  // [dim][horizon index]
  std::size_t oracle_failures = 0;
};

FirstElementSweep accuracy_sweep_first_element(
    const Policy& policy, const Plant& plant, const Scenario& scenario,
    const ResetParams& reset, const std::vector<int>& horizons,
    const OracleSettings& oracle, const EvalSettings& eval,
    std::uint64_t seed);

// A controller maps (state, path anchor) to one applied input.
using Controller =
    std::function<std::vector<double>(const std::vector<double>&, long)>;

Controller policy_controller(const Policy& policy, const Scenario& scenario,
                             int horizon);
// Receding-horizon oracle MPC with shift warm starting across steps; when a
// policy is supplied its output seeds each solve as well.
Controller mpc_controller(const Plant& plant, const Scenario& scenario,
                          int horizon, const OracleSettings& oracle,
                          const Policy* warm_policy = nullptr);

struct ClosedLoopReport {
  std::string controller_name;
  std::string scenario_name;
  int horizon = 0;
  int steps = 0;
  double dy_mean = 0.0;     // mean |p_y - p_y^R| over the run
  double cost_total = 0.0;  // sum of the running cost
  double cost_mean = 0.0;   // cost_total / steps, the tables' C convention
  bool diverged = false;
  int divergence_step = -1;
  double min_clearance = 0.0;    // robot task only
  bool collision = false;        // clearance below -r_safe
  std::vector<std::string> trace_header;
  std::vector<std::vector<double>> trace;  // one row per step
};

// Receding-horizon execution: apply the controller's first action for
// `steps` ticks from a deterministic on-path start.
ClosedLoopReport closed_loop_eval(const Controller& controller,
                                  const std::string& controller_name,
                                  const Plant& plant, const Scenario& scenario,
                                  int horizon, const EvalSettings& eval,
                                  bool robot_task = false,
                                  const CostWeights* weights = nullptr,
                                  bool place_obstacle = false,
                                  double obstacle_x = 0.0,
                                  double obstacle_y = 0.0);

// Obstacle-avoidance run for the robot task; reports the minimum clearance.
ClosedLoopReport obstacle_eval(const Policy& policy, const Plant& plant,
                               const Scenario& scenario, double obstacle_x,
                               double obstacle_y, int horizon,
                               const CostWeights& weights,
                               const EvalSettings& eval);

struct LatencyRow {
  int horizon = 0;
  double median_s = 0.0;
  double p95_s = 0.0;
  int repetitions = 0;
};

// Wall time per forward pass; the first call is discarded as warm-up and the
// run is pinned to a single thread.
std::vector<LatencyRow> latency_bench(const Policy& policy,
                                      const Scenario& scenario,
                                      const std::vector<int>& horizons,
                                      int repetitions);

// Monte-Carlo estimate of the expected finite-horizon cost under the task's
// reset distribution with horizons drawn uniformly; used to compare untrained
// and trained parameters on identical draws.
double expected_cost(const Policy& policy, const TrainTask& task,
                     const TrainConfig& cfg, int n_states, std::uint64_t seed);

// Upper tail of the chi-square distribution (regularized incomplete gamma).
double chi_square_sf(double x, int dof);

// Chi-square test that `draws` lie uniformly on {1..n_max}; returns p-value.
double horizon_uniformity_pvalue(const std::vector<int>& draws, int n_max);

// --- report emission --------------------------------------------------------

void write_accuracy_csv(const std::vector<AccuracyReport>& reports,
                        const std::string& path);
void write_first_element_csv(const FirstElementSweep& sweep,
                             const std::string& name, const std::string& path);
void write_closed_loop_csv(const std::vector<ClosedLoopReport>& reports,
                           const std::string& path);
void write_trace_csv(const ClosedLoopReport& report, const std::string& path);
void write_latency_csv(const std::vector<LatencyRow>& rows,
                       const std::string& name, const std::string& path);
// Plot-ready long format: one row per (N, metric, algorithm).
void write_long_format_csv(
    const std::vector<std::tuple<int, std::string, std::string, double>>& rows,
    const std::string& path);
void write_summary_json(const std::string& config_hash, std::uint64_t seed,
                        const std::string& checkpoint_id,
                        const std::vector<std::pair<std::string, double>>& kv,
                        const std::string& path);

}  // namespace transmpc
