#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "transmpc/rng.hpp"
#include "transmpc/tensor.hpp"

namespace transmpc {

// Dynamic bicycle model parameters. Cornering stiffnesses use the negative
// sign convention, so the implicit-update denominators stay positive for
// v above the floor.
struct BicycleParams {
  double m = 1412.0;      // kg
  double I_z = 1536.7;    // kg m^2
  double l_f = 1.06;      // m
  double l_r = 1.85;      // m
  double k_f = -128916.0; // N/rad
  double k_r = -85944.0;  // N/rad
  double v_floor = 0.1;   // m/s, denominator guard
};

// State component order used throughout: the raw heading stays unwrapped so
// trajectories remain differentiable; wrapping happens only when reporting.
struct VehicleState {
  double p_x = 0, p_y = 0, phi = 0, v = 0, v_lat = 0, omega = 0;
  static constexpr int kDim = 6;
  std::vector<double> to_vector() const;
  static VehicleState from_vector(const std::vector<double>& v);
};

struct VehicleInput {
  double a_x = 0, delta = 0;
  static constexpr int kDim = 2;
};

struct RobotState {
  double p_x = 0, p_y = 0, phi = 0, v = 0, omega = 0;
  double obs_dx = 0, obs_dy = 0;  // static obstacle offsets p^c - p
  static constexpr int kDim = 7;
  std::vector<double> to_vector() const;
  static RobotState from_vector(const std::vector<double>& v);
};

struct RobotInput {
  double dv = 0, domega = 0;
  static constexpr int kDim = 2;
};

struct ActionBounds {
  std::vector<double> lo, hi;
  std::size_t dims() const { return lo.size(); }
};

ActionBounds vehicle_bounds();              // a_x in [-3,3], delta in [-0.52,0.52]
ActionBounds robot_bounds(double f = 10.0); // |dv| <= 0.8/f, |domega| <= 0.4/f

// Which speed enters the 0.1*speed^2 regularizer of the running cost. The
// printed form squares the longitudinal speed; the lateral variant squares
// the lateral velocity instead (and drops the term for plants without one),
// which is the only reading consistent with the magnitudes this cost has to
// produce. See config docs for the switch.
enum class SpeedReg { kLongitudinal, kLateral };
enum class CollisionTerm { kQuadratic, kClipped };  // -l_c^2 vs +max(0,-l_c)^2

struct CostWeights {
  double w_px = 0.2, w_py = 0.3, w_phi = 0.2, w_v = 0.3;
  double w_speed = 0.1, w_omega = 0.1, w_in0 = 0.05, w_in1 = 0.05;
  SpeedReg speed_reg = SpeedReg::kLongitudinal;
  CollisionTerm collision = CollisionTerm::kQuadratic;
  double collision_weight = 1.0;
  double r_ego = 0.35, r_obstacle = 0.2, r_safe = 0.1;  // m
};

// Maps cost terms onto state vector components; -1 means the plant has no
// such component.
struct StateLayout {
  int i_px = 0, i_py = 1, i_phi = 2, i_v = 3;
  int i_vlat = -1, i_omega = -1, i_obsdx = -1, i_obsdy = -1;
};

StateLayout vehicle_layout();
StateLayout robot_layout();

// Reference rows are (p_x^R, p_y^R, phi^R, v^R).
struct RefWindow {
  std::vector<std::array<double, 4>> rows;
  std::size_t size() const { return rows.size(); }
};

// Analytic reference paths sampled at dt; a window may start at any index.
struct Scenario {
  enum class Kind { kSine, kDoubleLaneChange, kLine };
  Kind kind = Kind::kSine;
  double dt = 0.1;      // s
  double speed = 5.0;   // m/s
  // sine
  double amplitude = 1.0, wavelength = 30.0;  // m
  // double lane change: out-and-back tanh ramps
  double offset = 1.0;       // m lateral plateau offset
  double ramp_length = 10.0; // m covering the middle 80% of each transition
  double plateau = 15.0;     // m at full offset
  double start_x = 15.0;     // m where the first ramp begins

  std::array<double, 4> row(long idx) const;
  RefWindow window(long t0, int n) const;
  std::string name() const;
};

Scenario make_sine_scenario(double speed = 5.0, double dt = 0.1);
Scenario make_dlc_scenario(double speed = 5.0, double dt = 0.1);
Scenario make_line_scenario(double speed = 0.4, double dt = 0.1);

// --- differentiable model steps -------------------------------------------

// One step of the implicit-in-velocity discrete dynamic bicycle model.
// Throws NumericalError if v is below the velocity floor.
ad::Tensor bicycle_step(const ad::Tensor& state, const ad::Tensor& input,
                        double dt, const BicycleParams& p);

// Differential-drive kinematics at control frequency f; the obstacle offsets
// in the state refer to a static obstacle and are advanced with the pose.
ad::Tensor diffdrive_step(const ad::Tensor& state, const ad::Tensor& input,
                          double f);

// Elementwise clip to the box; idempotent.
std::vector<double> clamp_input(const std::vector<double>& raw,
                                const ActionBounds& bounds);

// Tracking running cost; heading error is the wrapped angular difference.
ad::Tensor running_cost_track(const ad::Tensor& state,
                              const std::array<double, 4>& ref,
                              const ad::Tensor& input, const CostWeights& w,
                              const StateLayout& layout);

// Tracking cost plus the collision proximity term of the obstacle task.
ad::Tensor running_cost_avoid(const ad::Tensor& state,
                              const std::array<double, 4>& ref,
                              const ad::Tensor& input, const CostWeights& w,
                              const StateLayout& layout);

// Collision clearance l_c for reporting: distance to the obstacle minus the
// radii sum and safety margin.
double clearance(const std::vector<double>& robot_state, const CostWeights& w,
                 const StateLayout& layout);

// --- plant + rollout --------------------------------------------------------

struct Plant {
  int n_state = 0;
  int n_input = 0;
  ActionBounds bounds;
  StateLayout layout;
  std::function<ad::Tensor(const ad::Tensor&, const ad::Tensor&)> step;
  std::function<ad::Tensor(const ad::Tensor&, const std::array<double, 4>&,
                           const ad::Tensor&)>
      cost;
};

Plant make_vehicle_plant(const BicycleParams& p, const CostWeights& w,
                         double dt);
Plant make_robot_plant(const CostWeights& w, double f);

struct RolloutResult {
  ad::Tensor total_cost;                          // scalar, on tape if U is
  std::vector<std::vector<double>> states;        // x_t ... x_{t+N}
  std::vector<double> step_costs;                 // l_0 ... l_{N-1}
};

// Simulates x_{i+1} = f(x_i, u_i) for i = 0..N-1, accumulating the running
// cost of (x_i, ref_i, u_i). The initial state enters as a constant, so
// gradients flow only through the control sequence.
RolloutResult rollout(const Plant& plant, const std::vector<double>& x0,
                      const ad::Tensor& controls, const RefWindow& refs);

// --- training environment ---------------------------------------------------

struct ResetParams {
  double lateral = 1.0;     // m, uniform offset
  double heading = 0.3;     // rad
  double speed_dev = 1.0;   // m/s around the scenario speed
  long path_span = 400;     // reset anchor drawn from [0, path_span)
  // robot task: obstacle placed this many steps ahead of the reset anchor
  long obstacle_min_ahead = 20, obstacle_max_ahead = 80;
};

// Closed-loop simulator owning the true model, the reference path position,
// and (for the robot task) the obstacle. Used by the sampling phase and the
// evaluator.
class TrackingEnv {
 public:
  TrackingEnv(Plant plant, Scenario scenario, bool robot_task);

  void reset(Rng& rng, const ResetParams& params);
  void reset_to_path(long anchor);  // deterministic start on the reference
  // Applies one clamped control on the true model; throws on divergence.
  void step(const std::vector<double>& input);

  const std::vector<double>& state() const { return state_; }
  long anchor() const { return anchor_; }
  const Scenario& scenario() const { return scenario_; }
  const Plant& plant() const { return plant_; }
  bool robot_task() const { return robot_task_; }
  // Places the obstacle (robot task) and refreshes the state offsets.
  void set_obstacle(double px, double py);

 private:
  Plant plant_;
  Scenario scenario_;
  bool robot_task_;
  std::vector<double> state_;
  long anchor_ = 0;
  double obs_x_ = 0, obs_y_ = 0;
};

// Draws a state near a random point of the reference path, matching the
// distribution used for training resets and evaluation sweeps.
std::vector<double> sample_reset_state(const Scenario& scenario,
                                       const ResetParams& params,
                                       bool robot_task, Rng& rng,
                                       long* anchor_out = nullptr,
                                       double* obs_x = nullptr,
                                       double* obs_y = nullptr);

double wrap_angle(double a);  // to (-pi, pi]

}  // namespace transmpc
