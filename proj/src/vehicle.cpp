#include "transmpc/vehicle.hpp"

#include <algorithm>
#include <cmath>

namespace transmpc {

namespace {

using ad::Tensor;

Tensor comp(const Tensor& x, int i) {
  return ad::slice(x, static_cast<std::size_t>(i),
                   static_cast<std::size_t>(i) + 1);
}

// Wrapped angular difference on the tape: atan2(sin d, cos d); gradient is 1
// away from the cut.
Tensor wrap_diff(const Tensor& d) { return ad::atan2(ad::sin(d), ad::cos(d)); }

}  // namespace

double wrap_angle(double a) {
  double r = std::fmod(a + M_PI, 2.0 * M_PI);
  if (r <= 0.0) r += 2.0 * M_PI;
  return r - M_PI;
}

std::vector<double> VehicleState::to_vector() const {
  return {p_x, p_y, phi, v, v_lat, omega};
}

VehicleState VehicleState::from_vector(const std::vector<double>& x) {
  return {x[0], x[1], x[2], x[3], x[4], x[5]};
}

std::vector<double> RobotState::to_vector() const {
  return {p_x, p_y, phi, v, omega, obs_dx, obs_dy};
}

RobotState RobotState::from_vector(const std::vector<double>& x) {
  return {x[0], x[1], x[2], x[3], x[4], x[5], x[6]};
}

ActionBounds vehicle_bounds() { return {{-3.0, -0.52}, {3.0, 0.52}}; }

ActionBounds robot_bounds(double f) {
  return {{-0.8 / f, -0.4 / f}, {0.8 / f, 0.4 / f}};
}

StateLayout vehicle_layout() {
  StateLayout l;
  l.i_vlat = 4;
  l.i_omega = 5;
  return l;
}

StateLayout robot_layout() {
  StateLayout l;
  l.i_omega = 4;
  l.i_obsdx = 5;
  l.i_obsdy = 6;
  return l;
}

// ---------------------------------------------------------------------------
// Reference scenarios

std::array<double, 4> Scenario::row(long idx) const {
  const double x = speed * dt * static_cast<double>(idx);
  switch (kind) {
    case Kind::kSine: {
      const double w = 2.0 * M_PI / wavelength;
      const double y = amplitude * std::sin(w * x);
      const double slope = amplitude * w * std::cos(w * x);
      return {x, y, std::atan(slope), speed};
    }
    case Kind::kDoubleLaneChange: {
      // tanh ramps; k covers the middle 80% of the transition in ramp_length
      const double k = 2.0 * std::atanh(0.8) / ramp_length;
      const double a = start_x + 0.5 * ramp_length;
      const double b = a + ramp_length + plateau;
      const double ta = std::tanh(k * (x - a));
      const double tb = std::tanh(k * (x - b));
      const double y = 0.5 * offset * (ta - tb);
      const double slope =
          0.5 * offset * k * ((1.0 - ta * ta) - (1.0 - tb * tb));
      return {x, y, std::atan(slope), speed};
    }
    case Kind::kLine:
      return {x, 0.0, 0.0, speed};
  }
  return {x, 0.0, 0.0, speed};
}

RefWindow Scenario::window(long t0, int n) const {
  if (n < 1) throw ad::ShapeError("reference window needs N >= 1");
  RefWindow w;
  w.rows.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w.rows.push_back(row(t0 + i));
  return w;
}

std::string Scenario::name() const {
  switch (kind) {
    case Kind::kSine: return "sine";
    case Kind::kDoubleLaneChange: return "dlc";
    case Kind::kLine: return "line";
  }
  return "?";
}

Scenario make_sine_scenario(double speed, double dt) {
  Scenario s;
  s.kind = Scenario::Kind::kSine;
  s.speed = speed;
  s.dt = dt;
  return s;
}

Scenario make_dlc_scenario(double speed, double dt) {
  Scenario s;
  s.kind = Scenario::Kind::kDoubleLaneChange;
  s.speed = speed;
  s.dt = dt;
  return s;
}

Scenario make_line_scenario(double speed, double dt) {
  Scenario s;
  s.kind = Scenario::Kind::kLine;
  s.speed = speed;
  s.dt = dt;
  return s;
}

// ---------------------------------------------------------------------------
// Differentiable model steps

ad::Tensor bicycle_step(const ad::Tensor& state, const ad::Tensor& input,
                        double dt, const BicycleParams& p) {
  if (state.numel() != VehicleState::kDim)
    throw ad::ShapeError("bicycle_step: state must have 6 components");
  if (input.numel() != VehicleInput::kDim)
    throw ad::ShapeError("bicycle_step: input must have 2 components");
  if (dt <= 0.0) throw ad::ShapeError("bicycle_step: dt must be positive");
  if (state.data[3] < p.v_floor)
    throw ad::NumericalError("bicycle_step: v below the velocity floor");

  const Tensor px = comp(state, 0), py = comp(state, 1), phi = comp(state, 2),
               v = comp(state, 3), vlat = comp(state, 4), om = comp(state, 5);
  const Tensor ax = comp(input, 0), del = comp(input, 1);

  const Tensor cphi = ad::cos(phi), sphi = ad::sin(phi);
  const Tensor px2 =
      ad::add(px, ad::scale(ad::sub(ad::mul(v, cphi), ad::mul(vlat, sphi)), dt));
  const Tensor py2 =
      ad::add(py, ad::scale(ad::add(ad::mul(v, sphi), ad::mul(vlat, cphi)), dt));
  const Tensor phi2 = ad::add(phi, ad::scale(om, dt));
  const Tensor v2 = ad::add(v, ad::scale(ax, dt));

  const double cross = p.l_f * p.k_f - p.l_r * p.k_r;
  const Tensor lat_num = ad::add(
      ad::add(ad::scale(ad::mul(v, vlat), p.m), ad::scale(om, dt * cross)),
      ad::add(ad::scale(ad::mul(del, v), -dt * p.k_f),
              ad::scale(ad::mul(ad::mul(v, v), om), -dt * p.m)));
  const Tensor lat_den =
      ad::add(ad::scale(v, p.m), Tensor::scalar(-dt * (p.k_f + p.k_r)));
  const Tensor vlat2 = ad::div(lat_num, lat_den);

  const Tensor yaw_num =
      ad::add(ad::add(ad::scale(ad::mul(v, om), p.I_z),
                      ad::scale(vlat, dt * cross)),
              ad::scale(ad::mul(del, v), -dt * p.l_f * p.k_f));
  const Tensor yaw_den =
      ad::add(ad::scale(v, p.I_z),
              Tensor::scalar(-dt * (p.l_f * p.l_f * p.k_f +
                                    p.l_r * p.l_r * p.k_r)));
  const Tensor om2 = ad::div(yaw_num, yaw_den);

  return ad::concat({px2, py2, phi2, v2, vlat2, om2}, 0);
}

ad::Tensor diffdrive_step(const ad::Tensor& state, const ad::Tensor& input,
                          double f) {
  const std::size_t dim = state.numel();
  if (dim != 5 && dim != 7)
    throw ad::ShapeError("diffdrive_step: state must have 5 or 7 components");
  if (input.numel() != RobotInput::kDim)
    throw ad::ShapeError("diffdrive_step: input must have 2 components");
  if (f <= 0.0) throw ad::ShapeError("diffdrive_step: f must be positive");

  const Tensor px = comp(state, 0), py = comp(state, 1), phi = comp(state, 2),
               v = comp(state, 3), om = comp(state, 4);
  const Tensor dv = comp(input, 0), dom = comp(input, 1);

  const double inv_f = 1.0 / f;
  const Tensor step_x = ad::scale(ad::mul(v, ad::cos(phi)), inv_f);
  const Tensor step_y = ad::scale(ad::mul(v, ad::sin(phi)), inv_f);
  const Tensor px2 = ad::add(px, step_x);
  const Tensor py2 = ad::add(py, step_y);
  const Tensor phi2 = ad::add(phi, ad::scale(om, inv_f));
  const Tensor v2 = ad::add(v, dv);
  const Tensor om2 = ad::add(om, dom);

  if (dim == 5) return ad::concat({px2, py2, phi2, v2, om2}, 0);

  // static obstacle: p^c = p + offset stays fixed, so offsets shrink by the
  // pose displacement
  const Tensor odx2 = ad::sub(comp(state, 5), step_x);
  const Tensor ody2 = ad::sub(comp(state, 6), step_y);
  return ad::concat({px2, py2, phi2, v2, om2, odx2, ody2}, 0);
}

std::vector<double> clamp_input(const std::vector<double>& raw,
                                const ActionBounds& bounds) {
  if (raw.size() != bounds.dims())
    throw ad::ShapeError("clamp_input: dimension mismatch");
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    out[i] = std::clamp(raw[i], bounds.lo[i], bounds.hi[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Running costs

ad::Tensor running_cost_track(const ad::Tensor& state,
                              const std::array<double, 4>& ref,
                              const ad::Tensor& input, const CostWeights& w,
                              const StateLayout& layout) {
  const Tensor dx = ad::sub(comp(state, layout.i_px), Tensor::scalar(ref[0]));
  const Tensor dy = ad::sub(comp(state, layout.i_py), Tensor::scalar(ref[1]));
  const Tensor dphi =
      wrap_diff(ad::sub(comp(state, layout.i_phi), Tensor::scalar(ref[2])));
  const Tensor dv = ad::sub(comp(state, layout.i_v), Tensor::scalar(ref[3]));

  Tensor l = ad::add(
      ad::add(ad::scale(ad::square(dx), w.w_px),
              ad::scale(ad::square(dy), w.w_py)),
      ad::add(ad::scale(ad::square(dphi), w.w_phi),
              ad::scale(ad::square(dv), w.w_v)));

  if (w.speed_reg == SpeedReg::kLongitudinal) {
    l = ad::add(l, ad::scale(ad::square(comp(state, layout.i_v)), w.w_speed));
  } else if (layout.i_vlat >= 0) {
    l = ad::add(l,
                ad::scale(ad::square(comp(state, layout.i_vlat)), w.w_speed));
  }
  if (layout.i_omega >= 0)
    l = ad::add(l,
                ad::scale(ad::square(comp(state, layout.i_omega)), w.w_omega));

  l = ad::add(l, ad::add(ad::scale(ad::square(comp(input, 0)), w.w_in0),
                         ad::scale(ad::square(comp(input, 1)), w.w_in1)));
  return l;
}

ad::Tensor running_cost_avoid(const ad::Tensor& state,
                              const std::array<double, 4>& ref,
                              const ad::Tensor& input, const CostWeights& w,
                              const StateLayout& layout) {
  if (layout.i_obsdx < 0 || layout.i_obsdy < 0)
    throw ad::ShapeError("running_cost_avoid: state has no obstacle offsets");
  const Tensor l_track = running_cost_track(state, ref, input, w, layout);
  const Tensor ddx = comp(state, layout.i_obsdx);
  const Tensor ddy = comp(state, layout.i_obsdy);
  const Tensor dist =
      ad::sqrt(ad::add(ad::square(ddx), ad::square(ddy)));
  const Tensor lc =
      ad::sub(dist, Tensor::scalar(w.r_ego + w.r_obstacle + w.r_safe));
  if (w.collision == CollisionTerm::kQuadratic)
    return ad::sub(l_track, ad::scale(ad::square(lc), w.collision_weight));
  const Tensor pen = ad::square(ad::relu(ad::scale(lc, -1.0)));
  return ad::add(l_track, ad::scale(pen, w.collision_weight));
}

double clearance(const std::vector<double>& robot_state, const CostWeights& w,
                 const StateLayout& layout) {
  const double dx = robot_state[static_cast<std::size_t>(layout.i_obsdx)];
  const double dy = robot_state[static_cast<std::size_t>(layout.i_obsdy)];
  return std::sqrt(dx * dx + dy * dy) - (w.r_ego + w.r_obstacle + w.r_safe);
}

// ---------------------------------------------------------------------------
// Plants and rollout

Plant make_vehicle_plant(const BicycleParams& p, const CostWeights& w,
                         double dt) {
  Plant plant;
  plant.n_state = VehicleState::kDim;
  plant.n_input = VehicleInput::kDim;
  plant.bounds = vehicle_bounds();
  plant.layout = vehicle_layout();
  plant.step = [p, dt](const Tensor& x, const Tensor& u) {
    return bicycle_step(x, u, dt, p);
  };
  const StateLayout layout = plant.layout;
  plant.cost = [w, layout](const Tensor& x, const std::array<double, 4>& ref,
                           const Tensor& u) {
    return running_cost_track(x, ref, u, w, layout);
  };
  return plant;
}

Plant make_robot_plant(const CostWeights& w, double f) {
  Plant plant;
  plant.n_state = RobotState::kDim;
  plant.n_input = RobotInput::kDim;
  plant.bounds = robot_bounds(f);
  plant.layout = robot_layout();
  plant.step = [f](const Tensor& x, const Tensor& u) {
    return diffdrive_step(x, u, f);
  };
  const StateLayout layout = plant.layout;
  plant.cost = [w, layout](const Tensor& x, const std::array<double, 4>& ref,
                           const Tensor& u) {
    return running_cost_avoid(x, ref, u, w, layout);
  };
  return plant;
}

RolloutResult rollout(const Plant& plant, const std::vector<double>& x0,
                      const ad::Tensor& controls, const RefWindow& refs) {
  if (static_cast<int>(x0.size()) != plant.n_state)
    throw ad::ShapeError("rollout: initial state dimension mismatch");
  const std::size_t n_input = static_cast<std::size_t>(plant.n_input);
  if (controls.numel() != refs.size() * n_input)
    throw ad::ShapeError("rollout: control count does not match horizon");

  RolloutResult result;
  Tensor x = Tensor::vector(x0);  // dx0/dtheta = 0: enters as a constant
  result.states.push_back(x0);
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const Tensor u = ad::slice(controls, i * n_input, (i + 1) * n_input);
    const Tensor l = plant.cost(x, refs.rows[i], u);
    result.step_costs.push_back(l.item());
    total = ad::add(total, l);
    x = plant.step(x, u);
    result.states.push_back(x.data);
  }
  result.total_cost = total;
  return result;
}

// ---------------------------------------------------------------------------
// Training environment

TrackingEnv::TrackingEnv(Plant plant, Scenario scenario, bool robot_task)
    : plant_(std::move(plant)),
      scenario_(scenario),
      robot_task_(robot_task),
      state_(static_cast<std::size_t>(plant_.n_state), 0.0) {
  reset_to_path(0);
}

void TrackingEnv::reset_to_path(long anchor) {
  anchor_ = anchor;
  const auto r = scenario_.row(anchor);
  std::fill(state_.begin(), state_.end(), 0.0);
  state_[0] = r[0];
  state_[1] = r[1];
  state_[2] = r[2];
  state_[3] = r[3];
  if (robot_task_) set_obstacle(1e6, 1e6);
}

void TrackingEnv::reset(Rng& rng, const ResetParams& params) {
  double obs_x = 0, obs_y = 0;
  state_ = sample_reset_state(scenario_, params, robot_task_, rng, &anchor_,
                              &obs_x, &obs_y);
  if (robot_task_) {
    obs_x_ = obs_x;
    obs_y_ = obs_y;
  }
}

void TrackingEnv::set_obstacle(double px, double py) {
  obs_x_ = px;
  obs_y_ = py;
  const auto layout = plant_.layout;
  state_[static_cast<std::size_t>(layout.i_obsdx)] = px - state_[0];
  state_[static_cast<std::size_t>(layout.i_obsdy)] = py - state_[1];
}

void TrackingEnv::step(const std::vector<double>& input) {
  const std::vector<double> u = clamp_input(input, plant_.bounds);
  const Tensor next =
      plant_.step(Tensor::vector(state_), Tensor::vector(u));
  state_ = next.data;
  anchor_ += 1;
}

std::vector<double> sample_reset_state(const Scenario& scenario,
                                       const ResetParams& params,
                                       bool robot_task, Rng& rng,
                                       long* anchor_out, double* obs_x,
                                       double* obs_y) {
  const long anchor = rng.uniform_int(0, params.path_span - 1);
  if (anchor_out) *anchor_out = anchor;
  const auto r = scenario.row(anchor);
  const double lat = rng.uniform(-params.lateral, params.lateral);
  const double head = rng.uniform(-params.heading, params.heading);
  const double dv = rng.uniform(-params.speed_dev, params.speed_dev);

  if (!robot_task) {
    VehicleState s;
    s.p_x = r[0];
    s.p_y = r[1] + lat;
    s.phi = r[2] + head;
    s.v = r[3] + dv;
    return s.to_vector();
  }

  RobotState s;
  s.p_x = r[0];
  s.p_y = r[1] + lat;
  s.phi = r[2] + head;
  s.v = r[3] + dv;
  const long ahead =
      rng.uniform_int(params.obstacle_min_ahead, params.obstacle_max_ahead);
  const auto obs_row = scenario.row(anchor + ahead);
  if (obs_x) *obs_x = obs_row[0];
  if (obs_y) *obs_y = obs_row[1];
  s.obs_dx = obs_row[0] - s.p_x;
  s.obs_dy = obs_row[1] - s.p_y;
  return s.to_vector();
}

}  // namespace transmpc
