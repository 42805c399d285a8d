#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "transmpc/evaluator.hpp"

using namespace transmpc;
using ad::Tensor;

TEST_CASE("relative accuracy formula") {
  const ActionBounds b = vehicle_bounds();
  // identical inputs
  CHECK(relative_accuracy({0.3, 0.1}, {0.3, 0.1}, b) ==
        std::vector<double>{0.0, 0.0});
  // full-range disagreement
  const auto extreme = relative_accuracy({3.0, 0.52}, {-3.0, -0.52}, b);
  CHECK(extreme[0] == doctest::Approx(1.0));
  CHECK(extreme[1] == doctest::Approx(1.0));
  // a_x: 0.3 vs 0.0 over range 6
  CHECK(relative_accuracy({0.3, 0.0}, {0.0, 0.0}, b)[0] ==
        doctest::Approx(0.05));
}

TEST_CASE("relative accuracy is shift and scale consistent") {
  ActionBounds b{{-2.0, -1.0}, {4.0, 1.0}};
  const std::vector<double> u{0.5, -0.25}, v{1.5, 0.75};
  const auto base = relative_accuracy(u, v, b);

  std::vector<double> us = u, vs = v;
  for (double& x : us) x += 0.7;
  for (double& x : vs) x += 0.7;
  const auto shifted = relative_accuracy(us, vs, b);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(shifted[i] == doctest::Approx(base[i]).epsilon(1e-12));

  const double c = 3.0;
  ActionBounds bs = b;
  for (double& x : bs.lo) x *= c;
  for (double& x : bs.hi) x *= c;
  std::vector<double> uc = u, vc = v;
  for (double& x : uc) x *= c;
  for (double& x : vc) x *= c;
  const auto scaled = relative_accuracy(uc, vc, bs);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(scaled[i] == doctest::Approx(base[i]).epsilon(1e-12));
}

TEST_CASE("relative accuracy rejects degenerate bounds") {
  ActionBounds bad{{1.0}, {1.0}};
  CHECK_THROWS_AS((void)relative_accuracy({0.0}, {0.0}, bad), ad::ShapeError);
}

TEST_CASE("feeding the oracle back as the policy gives zero error") {
  const std::vector<double> A{1.0, 0.1, 0.0, 1.0};
  const std::vector<double> B{0.005, 0.1};
  const std::vector<double> Q{1.0, 0.0, 0.0, 1.0};
  const std::vector<double> R{1.0};
  ActionBounds bounds{{-3.0}, {3.0}};
  const Plant plant = make_lq_plant(A, B, Q, R, 2, 1, bounds);
  const Scenario s = make_line_scenario(0.0, 0.1);

  OracleSettings oracle;
  oracle.restarts = 2;
  const SequenceProducer oracle_as_policy =
      [&plant, oracle](const std::vector<double>& state,
                       const RefWindow& refs) {
        OracleProblem p;
        p.plant = &plant;
        p.x0 = state;
        p.refs = refs;
        p.settings = oracle;
        return solve(p).controls;
      };

  EvalSettings eval;
  eval.n_states = 6;
  eval.threads = 1;
  ResetParams reset;
  Rng rng(13);
  std::vector<EvalState> states;
  for (int i = 0; i < 6; ++i)
    states.push_back({{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)}, 0});
  const auto reports =
      accuracy_sweep_producers({oracle_as_policy}, {"oracle"}, plant, s,
                               reset, 4, oracle, eval, 13, &states);
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].states_used >= 5);
  for (const auto& dim : reports[0].mean_err)
    for (double v : dim) CHECK(v < 1e-7);
}

TEST_CASE("untrained policies are materially worse than the oracle seed") {
  // ordering check at small scale: a random policy has visible error
  CostWeights w;
  w.speed_reg = SpeedReg::kLateral;
  const Plant plant = make_vehicle_plant(BicycleParams{}, w, 0.1);
  const Scenario s = make_sine_scenario();
  PolicyHyper h;
  h.d_embed = 16;
  h.n_heads = 2;
  h.n_layers = 1;
  h.d_ffn = 16;
  h.n_state = 6;
  const Policy policy{init_params(h, 5), vehicle_bounds(),
                      NormSpec{10.0, 5.0, vehicle_layout()}};
  OracleSettings oracle;
  oracle.restarts = 2;
  EvalSettings eval;
  eval.n_states = 4;
  eval.threads = 2;
  ResetParams reset;
  const auto reports = accuracy_sweep({&policy}, {"untrained"}, plant, s,
                                      reset, 5, oracle, eval, 99);
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].first_element_mean() > 1e-4);
  CHECK(reports[0].mean_err.size() == 2);  // both dims reported individually
}

TEST_CASE("perfect tracking controller reports zero lateral error") {
  // a vehicle on a straight line at reference speed needs zero input
  CostWeights w;
  w.speed_reg = SpeedReg::kLateral;
  const Plant plant = make_vehicle_plant(BicycleParams{}, w, 0.1);
  const Scenario line = make_line_scenario(5.0, 0.1);
  const Controller zero = [](const std::vector<double>&, long) {
    return std::vector<double>{0.0, 0.0};
  };
  EvalSettings eval;
  eval.steps = 50;
  const ClosedLoopReport r =
      closed_loop_eval(zero, "zero", plant, line, 1, eval);
  CHECK_FALSE(r.diverged);
  CHECK(r.dy_mean == 0.0);
  CHECK(r.cost_mean == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.trace.size() == 50);
}

TEST_CASE("closed loop flags divergence") {
  CostWeights w;
  const Plant plant = make_vehicle_plant(BicycleParams{}, w, 0.1);
  const Scenario line = make_line_scenario(5.0, 0.1);
  const Controller hard_left = [](const std::vector<double>&, long) {
    return std::vector<double>{0.0, 0.52};
  };
  EvalSettings eval;
  eval.steps = 170;
  const ClosedLoopReport r =
      closed_loop_eval(hard_left, "left", plant, line, 1, eval);
  CHECK(r.diverged);
  CHECK(r.divergence_step >= 0);
}

TEST_CASE("obstacle eval reports large clearance when nothing is nearby") {
  CostWeights w;
  w.collision = CollisionTerm::kClipped;
  const Plant plant = make_robot_plant(w, 10.0);
  const Scenario line = make_line_scenario(0.4, 0.1);
  PolicyHyper h;
  h.d_embed = 8;
  h.n_heads = 2;
  h.d_ffn = 8;
  h.n_state = 7;
  const Policy policy{init_params(h, 0), robot_bounds(),
                      NormSpec{2.0, 0.4, robot_layout()}};
  EvalSettings eval;
  eval.steps = 30;
  const ClosedLoopReport r =
      obstacle_eval(policy, plant, line, 1e5, 1e5, 5, w, eval);
  CHECK(r.min_clearance > 100.0);
  CHECK_FALSE(r.collision);
}

TEST_CASE("latency bench produces positive medians and honors the list") {
  PolicyHyper h;
  h.d_embed = 16;
  h.n_heads = 2;
  h.n_layers = 1;
  h.d_ffn = 16;
  h.n_state = 6;
  const Policy policy{init_params(h, 0), vehicle_bounds(),
                      NormSpec{10.0, 5.0, vehicle_layout()}};
  const Scenario s = make_sine_scenario();
  const auto rows = latency_bench(policy, s, {1, 4}, 20);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].horizon == 1);
  CHECK(rows[1].horizon == 4);
  for (const auto& r : rows) {
    CHECK(r.median_s > 0.0);
    CHECK(r.p95_s >= r.median_s);
  }
}

TEST_CASE("chi-square survival function matches table quantiles") {
  // df=19 quantiles: P(X > 30.1435) = 0.05, P(X > 36.1909) = 0.01
  CHECK(chi_square_sf(30.1435, 19) == doctest::Approx(0.05).epsilon(1e-3));
  CHECK(chi_square_sf(36.1909, 19) == doctest::Approx(0.01).epsilon(1e-3));
  CHECK(chi_square_sf(0.0, 19) == doctest::Approx(1.0));
}

TEST_CASE("uniform draws pass the horizon uniformity test") {
  Rng rng(123);
  std::vector<int> draws;
  for (int i = 0; i < 10000; ++i)
    draws.push_back(static_cast<int>(rng.uniform_int(1, 20)));
  CHECK(horizon_uniformity_pvalue(draws, 20) > 0.01);

  // a biased sampler fails it
  std::vector<int> biased;
  for (int i = 0; i < 10000; ++i)
    biased.push_back(static_cast<int>(rng.uniform_int(1, 10)));
  CHECK(horizon_uniformity_pvalue(biased, 20) < 1e-6);
}

TEST_CASE("accuracy csv round trips through parsing") {
  AccuracyReport r;
  r.policy_name = "p";
  r.horizon = 2;
  r.states_requested = 4;
  r.states_used = 4;
  r.oracle_failures = 0;
  r.mean_err = {{0.125, 0.25}, {0.0625, 0.5}};
  r.max_err = {{0.5, 0.75}, {0.125, 1.0}};
  const std::string path = "/tmp/transmpc_test_accuracy.csv";
  write_accuracy_csv({r}, path);

  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header ==
        "policy,horizon,dim,seq_index,mean_rel_err,max_rel_err,states_used,"
        "oracle_failures");
  std::string line;
  int rows = 0;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    CHECK(field == "p");
    std::getline(ss, field, ',');
    std::getline(ss, field, ',');
    const int dim = std::stoi(field);
    std::getline(ss, field, ',');
    const int idx = std::stoi(field);
    std::getline(ss, field, ',');
    CHECK(std::stod(field) ==
          r.mean_err[static_cast<std::size_t>(dim)]
                    [static_cast<std::size_t>(idx)]);
    ++rows;
  }
  CHECK(rows == 4);
  std::remove(path.c_str());
}

TEST_CASE("long format has one row per (N, metric, algorithm)") {
  const std::string path = "/tmp/transmpc_test_long.csv";
  write_long_format_csv({{5, "dy_mean", "policy", 0.01},
                         {20, "dy_mean", "mpc", 0.005}},
                        path);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "N,metric,algorithm,value");
  std::getline(is, line);
  CHECK(line == "5,dy_mean,policy,0.01");
  std::getline(is, line);
  CHECK(line == "20,dy_mean,mpc,0.005");
  std::remove(path.c_str());
}

TEST_CASE("mpc controller warm starts and tracks a line") {
  CostWeights w;
  w.speed_reg = SpeedReg::kLateral;
  const Plant plant = make_vehicle_plant(BicycleParams{}, w, 0.1);
  const Scenario line = make_line_scenario(5.0, 0.1);
  OracleSettings oracle;
  oracle.restarts = 1;
  oracle.max_iters = 300;
  EvalSettings eval;
  eval.steps = 10;
  const ClosedLoopReport r = closed_loop_eval(
      mpc_controller(plant, line, 4, oracle), "mpc", plant, line, 4, eval);
  CHECK_FALSE(r.diverged);
  CHECK(r.dy_mean < 0.01);
}
