#include <doctest.h>

#include <cmath>
#include <cstring>

#include "transmpc/policy.hpp"

using namespace transmpc;
using ad::Tensor;

namespace {

PolicyHyper desk_hyper() {
  PolicyHyper h;
  h.d_embed = 32;
  h.n_heads = 2;
  h.n_layers = 1;
  h.d_ffn = 32;
  h.n_state = 6;
  return h;
}

Policy desk_policy(std::uint64_t seed) {
  return Policy{init_params(desk_hyper(), seed), vehicle_bounds(),
                NormSpec{10.0, 5.0, vehicle_layout()}};
}

const std::vector<double> kState{0.0, 0.3, 0.05, 5.0, 0.0, 0.0};

}  // namespace

TEST_CASE("forward pass has the N x n_input shape contract") {
  const Policy policy = desk_policy(0);
  const Scenario s = make_sine_scenario();
  const Tensor u = policy.forward(kState, s.window(0, 7));
  CHECK(u.shape == ad::Shape{7, 2});
}

TEST_CASE("one parameter set evaluates at every horizon without retraining") {
  const Policy policy = desk_policy(0);
  const Scenario s = make_sine_scenario();
  for (int n = 1; n <= 20; ++n) {
    const Tensor u = policy.forward(kState, s.window(0, n));
    CHECK(u.shape == ad::Shape{static_cast<std::size_t>(n), 2});
  }
}

TEST_CASE("outputs satisfy the actuator bounds for random parameters") {
  const Scenario s = make_sine_scenario();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Policy policy = desk_policy(seed);
    const Tensor u = policy.forward(kState, s.window(0, 12));
    for (std::size_t i = 0; i < u.rows(); ++i) {
      CHECK(u.at(i, 0) > -3.0);
      CHECK(u.at(i, 0) < 3.0);
      CHECK(u.at(i, 1) > -0.52);
      CHECK(u.at(i, 1) < 0.52);
    }
  }
}

TEST_CASE("the first action is sensitive to the last reference token") {
  // bidirectional attention: perturbing x^R_{t+N-1} must move u_t
  const Scenario s = make_sine_scenario();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Policy policy = desk_policy(seed);
    RefWindow refs = s.window(0, 20);
    const Tensor base = policy.forward(kState, refs);
    refs.rows.back()[1] += 1e-3;
    const Tensor bumped = policy.forward(kState, refs);
    double diff = 0.0;
    for (std::size_t j = 0; j < 2; ++j)
      diff = std::max(diff, std::fabs(bumped.at(0, j) - base.at(0, j)));
    CHECK(diff > 1e-9);
  }
}

TEST_CASE("every output position depends on every reference token") {
  const Policy policy = desk_policy(1);
  const Scenario s = make_sine_scenario();
  const int n = 6;
  const Tensor base = policy.forward(kState, s.window(0, n));
  for (int j = 0; j < n; ++j) {
    RefWindow refs = s.window(0, n);
    refs.rows[static_cast<std::size_t>(j)][1] += 1e-3;
    const Tensor bumped = policy.forward(kState, refs);
    for (int i = 0; i < n; ++i) {
      double diff = 0.0;
      for (int d = 0; d < 2; ++d)
        diff = std::max(diff, std::fabs(bumped.at(static_cast<std::size_t>(i),
                                                  static_cast<std::size_t>(d)) -
                                        base.at(static_cast<std::size_t>(i),
                                                static_cast<std::size_t>(d))));
      CHECK(diff > 0.0);
    }
  }
}

TEST_CASE("positional encoding is sinusoidal and prefix-stable") {
  const Tensor pe = positional_encoding(8, 10);
  CHECK(pe.shape == ad::Shape{8, 10});
  // position 0: sin(0) = 0 on even columns, cos(0) = 1 on odd columns
  for (std::size_t j = 0; j < 10; ++j)
    CHECK(pe.at(0, j) == doctest::Approx(j % 2 == 0 ? 0.0 : 1.0));
  const Tensor pe_small = positional_encoding(3, 10);
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t j = 0; j < 10; ++j)
      CHECK(pe.at(p, j) == pe_small.at(p, j));
}

TEST_CASE("initialization is deterministic and validates hyperparameters") {
  const PolicyParams a = init_params(desk_hyper(), 7);
  const PolicyParams b = init_params(desk_hyper(), 7);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i)
    CHECK(std::memcmp(a.tensors[i].second.data.data(),
                      b.tensors[i].second.data.data(),
                      a.tensors[i].second.numel() * 8) == 0);

  PolicyHyper paper;
  paper.d_embed = 256;
  paper.n_heads = 4;
  CHECK(paper.d_embed / paper.n_heads == 64);

  PolicyHyper bad = desk_hyper();
  bad.d_embed = 10;
  bad.n_heads = 4;
  CHECK_THROWS_AS((void)init_params(bad, 0), ad::ShapeError);
}

TEST_CASE("forward pass is a pure function of its inputs") {
  const Policy policy = desk_policy(2);
  const Scenario s = make_dlc_scenario();
  const RefWindow refs = s.window(10, 9);
  const Tensor u1 = policy.forward(kState, refs);
  const Tensor u2 = policy.forward(kState, refs);
  CHECK(std::memcmp(u1.data.data(), u2.data.data(), u1.numel() * 8) == 0);
}

TEST_CASE("reference positions are read relative to the state") {
  // translating both the state and the references leaves actions unchanged
  const Policy policy = desk_policy(3);
  const Scenario s = make_sine_scenario();
  RefWindow refs = s.window(0, 5);
  const Tensor base = policy.forward(kState, refs);

  std::vector<double> shifted = kState;
  shifted[0] += 50.0;
  shifted[1] += -20.0;
  for (auto& row : refs.rows) {
    row[0] += 50.0;
    row[1] += -20.0;
  }
  const Tensor moved = policy.forward(shifted, refs);
  for (std::size_t i = 0; i < base.numel(); ++i)
    CHECK(moved.data[i] == doctest::Approx(base.data[i]).epsilon(1e-12));
}

TEST_CASE("mlp baseline shape contract and horizon lock") {
  PolicyHyper h = desk_hyper();
  h.arch = PolicyArch::kMlp;
  h.mlp_width = 32;
  h.mlp_horizon = 20;
  const Policy policy{init_params(h, 0), vehicle_bounds(),
                      NormSpec{10.0, 5.0, vehicle_layout()}};
  const Scenario s = make_sine_scenario();
  const Tensor u = policy.forward(kState, s.window(0, 20));
  CHECK(u.shape == ad::Shape{20, 2});
  for (std::size_t i = 0; i < u.rows(); ++i) {
    CHECK(u.at(i, 0) > -3.0);
    CHECK(u.at(i, 0) < 3.0);
  }
  CHECK_THROWS_AS((void)policy.forward(kState, s.window(0, 5)),
                  ad::ShapeError);
}

TEST_CASE("near-zero initial actions from the scaled decoder") {
  const Policy policy = desk_policy(0);
  const Scenario s = make_sine_scenario();
  const Tensor u = policy.forward(kState, s.window(0, 10));
  for (std::size_t i = 0; i < u.rows(); ++i) {
    CHECK(std::fabs(u.at(i, 0)) < 0.5);
    CHECK(std::fabs(u.at(i, 1)) < 0.1);
  }
}

TEST_CASE("policy_forward rejects empty reference windows") {
  const Policy policy = desk_policy(0);
  RefWindow empty;
  CHECK_THROWS_AS((void)policy.forward(kState, empty), ad::ShapeError);
}
