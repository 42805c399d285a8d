#include <doctest.h>

#include <cmath>

#include <Eigen/Dense>

#include "transmpc/oracle.hpp"
#include "transmpc/policy.hpp"
#include "transmpc/rng.hpp"

using namespace transmpc;
using ad::Tensor;

namespace {

const std::vector<double> kA{1.0, 0.1, 0.0, 1.0};  // double integrator, dt 0.1
const std::vector<double> kB{0.005, 0.1};
const std::vector<double> kQ{1.0, 0.0, 0.0, 1.0};
const std::vector<double> kR{1.0};

OracleProblem lq_problem(const Plant& plant, std::vector<double> x0, int n) {
  OracleProblem p;
  p.plant = &plant;
  p.x0 = std::move(x0);
  p.refs.rows.assign(static_cast<std::size_t>(n), {0, 0, 0, 0});
  p.settings.restarts = 2;
  return p;
}

}  // namespace

TEST_CASE("one-step quadratic minimizer matches hand algebra") {
  // x' = x + u, cost x^2 + u^2 over two steps:
  // V(u0, u1) = x0^2 + u0^2 + (x0 + u0)^2 + u1^2, so u0* = -x0/2, u1* = 0
  const std::vector<double> A{1.0}, B{1.0}, Q{1.0}, R{1.0};
  const ActionBounds wide{{-100.0}, {100.0}};
  const Plant plant = make_lq_plant(A, B, Q, R, 1, 1, wide);
  const double x0 = 3.0;
  const OracleSolution sol = solve(lq_problem(plant, {x0}, 2));
  CHECK(sol.converged);
  CHECK(sol.controls[0] == doctest::Approx(-x0 / 2.0).epsilon(1e-9));
  CHECK(sol.controls[1] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("solver matches the Riccati closed form on an LQ instance") {
  const ActionBounds wide{{-1e9}, {1e9}};
  const Plant plant = make_lq_plant(kA, kB, kQ, kR, 2, 1, wide);
  const std::vector<double> x0{1.0, -0.5};
  const int n = 10;
  const OracleSolution sol = solve(lq_problem(plant, x0, n));
  const std::vector<double> want = lqr_closed_form(kA, kB, kQ, kR, 2, 1, n, x0);
  REQUIRE(sol.controls.size() == want.size());
  CHECK(sol.converged);
  CHECK(sol.residual < 1e-8);
  for (std::size_t i = 0; i < want.size(); ++i)
    CHECK(std::fabs(sol.controls[i] - want[i]) < 1e-6);
  // no terminal cost: the last input has no effect on any stage cost
  CHECK(std::fabs(want.back()) < 1e-12);
}

TEST_CASE("riccati degenerate cases") {
  // zero state cost: doing nothing is optimal
  const std::vector<double> q0{0.0, 0.0, 0.0, 0.0};
  for (double u : lqr_closed_form(kA, kB, q0, kR, 2, 1, 5, {1.0, 2.0}))
    CHECK(u == 0.0);
  // zero initial state: nothing to correct
  for (double u : lqr_closed_form(kA, kB, kQ, kR, 2, 1, 5, {0.0, 0.0}))
    CHECK(u == 0.0);
  // singular R with no future state cost is rejected
  const std::vector<double> r0{0.0};
  CHECK_THROWS_AS(
      (void)lqr_closed_form(kA, kB, kQ, r0, 2, 1, 1, {1.0, 0.0}),
      ad::NumericalError);
}

TEST_CASE("riccati agrees with brute-force quadratic minimization") {
  // V(U) is quadratic: recover it by finite differences and solve exactly
  const ActionBounds wide{{-1e9}, {1e9}};
  const Plant plant = make_lq_plant(kA, kB, kQ, kR, 2, 1, wide);
  const int n = 3;
  const std::vector<double> x0{0.8, -1.1};
  OracleProblem prob = lq_problem(plant, x0, n);

  auto v_of = [&](const std::vector<double>& u) {
    return rollout(plant, x0, Tensor::vector(u), prob.refs).total_cost.item();
  };
  const double h = 1e-4;
  const double v0 = v_of(std::vector<double>(n, 0.0));
  Eigen::VectorXd g(n);
  Eigen::MatrixXd H(n, n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> up(n, 0.0), um(n, 0.0);
    up[static_cast<std::size_t>(i)] = h;
    um[static_cast<std::size_t>(i)] = -h;
    g(i) = (v_of(up) - v_of(um)) / (2.0 * h);
    H(i, i) = (v_of(up) - 2.0 * v0 + v_of(um)) / (h * h);
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      std::vector<double> upp(n, 0.0), upm(n, 0.0), ump(n, 0.0), umm(n, 0.0);
      upp[static_cast<std::size_t>(i)] = h;
      upp[static_cast<std::size_t>(j)] = h;
      upm[static_cast<std::size_t>(i)] = h;
      upm[static_cast<std::size_t>(j)] = -h;
      ump[static_cast<std::size_t>(i)] = -h;
      ump[static_cast<std::size_t>(j)] = h;
      umm[static_cast<std::size_t>(i)] = -h;
      umm[static_cast<std::size_t>(j)] = -h;
      H(i, j) = H(j, i) =
          (v_of(upp) - v_of(upm) - v_of(ump) + v_of(umm)) / (4.0 * h * h);
    }
  const Eigen::VectorXd u_star = H.ldlt().solve(-g);
  const std::vector<double> want =
      lqr_closed_form(kA, kB, kQ, kR, 2, 1, n, x0);
  for (int i = 0; i < n; ++i)
    CHECK(want[static_cast<std::size_t>(i)] ==
          doctest::Approx(u_star(i)).epsilon(1e-5));
}

TEST_CASE("active bounds clip the solution and keep iterates feasible") {
  const ActionBounds tight{{-0.05}, {0.05}};
  const Plant plant = make_lq_plant(kA, kB, kQ, kR, 2, 1, tight);
  const std::vector<double> x0{2.0, 0.0};
  OracleProblem prob = lq_problem(plant, x0, 6);
  const OracleSolution sol = solve(prob);
  CHECK(sol.converged);
  CHECK(sol.residual < prob.settings.tol);
  for (double u : sol.controls) {
    CHECK(u >= -0.05 - 1e-15);
    CHECK(u <= 0.05 + 1e-15);
  }
  // the unconstrained optimum saturates the first inputs
  const std::vector<double> free_u =
      lqr_closed_form(kA, kB, kQ, kR, 2, 1, 6, x0);
  CHECK(free_u[0] < -0.05);
  CHECK(sol.controls[0] == doctest::Approx(-0.05));
}

TEST_CASE("first_order_residual semantics") {
  const ActionBounds wide{{-1e9}, {1e9}};
  const Plant plant = make_lq_plant(kA, kB, kQ, kR, 2, 1, wide);
  OracleProblem prob = lq_problem(plant, {1.0, -0.5}, 4);

  // at the Riccati optimum the gradient vanishes
  const std::vector<double> star =
      lqr_closed_form(kA, kB, kQ, kR, 2, 1, 4, {1.0, -0.5});
  CHECK(first_order_residual(prob, star) < 1e-9);
  // at zero, the gradient of a nonzero-state problem does not
  CHECK(first_order_residual(prob, std::vector<double>(4, 0.0)) > 1e-3);
}

TEST_CASE("oracle dominates a random policy on its own objective") {
  CostWeights w;
  w.speed_reg = SpeedReg::kLateral;
  const Plant plant = make_vehicle_plant(BicycleParams{}, w, 0.1);
  const Scenario s = make_sine_scenario();
  Rng rng(3);
  ResetParams reset;
  long anchor = 0;
  const auto x0 = sample_reset_state(s, reset, false, rng, &anchor);
  const RefWindow refs = s.window(anchor, 8);

  PolicyHyper h;
  h.n_state = 6;
  const Policy policy{init_params(h, 11), vehicle_bounds(),
                      NormSpec{10.0, 5.0, vehicle_layout()}};
  const std::vector<double> u_theta = policy.forward(x0, refs).data;

  OracleProblem prob;
  prob.plant = &plant;
  prob.x0 = x0;
  prob.refs = refs;
  prob.settings.restarts = 4;
  prob.extra_starts.push_back(u_theta);
  const OracleSolution sol = solve(prob);
  const double v_theta =
      rollout(plant, x0, Tensor::vector(u_theta), refs).total_cost.item();
  CHECK(sol.cost <= v_theta + 1e-6);
}

TEST_CASE("iteration accounting and failure flagging") {
  const ActionBounds wide{{-1e9}, {1e9}};
  const Plant plant = make_lq_plant(kA, kB, kQ, kR, 2, 1, wide);
  OracleProblem prob = lq_problem(plant, {1.0, 1.0}, 5);
  prob.settings.max_iters = 1;  // starve the solver
  prob.settings.restarts = 0;
  const OracleSolution sol = solve(prob);
  CHECK_FALSE(sol.converged);
  CHECK(sol.iterations >= 1);
}
