#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "transmpc/evaluator.hpp"
#include "transmpc/trainer.hpp"

using namespace transmpc;
using ad::Tensor;

namespace {

TrainTask tiny_vehicle_task() {
  TrainTask task;
  CostWeights w;
  w.speed_reg = SpeedReg::kLateral;
  task.plant = make_vehicle_plant(BicycleParams{}, w, 0.1);
  task.scenarios = {make_sine_scenario()};
  task.robot_task = false;
  task.hyper.d_embed = 8;
  task.hyper.n_heads = 2;
  task.hyper.n_layers = 1;
  task.hyper.d_ffn = 8;
  task.hyper.n_state = 6;
  task.hyper.N_max = 6;
  task.norm = NormSpec{10.0, 5.0, vehicle_layout()};
  return task;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.iterations = 8;
  cfg.episode_length = 10;
  cfg.minibatch = 8;
  cfg.buffer_capacity = 500;
  cfg.N_max = 6;
  cfg.checkpoint_every = 0;
  return cfg;
}

}  // namespace

TEST_CASE("replay buffer evicts oldest and samples with replacement") {
  ReplayBuffer buf(3);
  for (int i = 0; i < 5; ++i)
    buf.push({{static_cast<double>(i)}, i, 0});
  CHECK(buf.size() == 3);
  CHECK(buf.total_pushed() == 5);
  // entries 2, 3, 4 remain
  std::vector<double> kept;
  for (std::size_t i = 0; i < buf.size(); ++i)
    kept.push_back(buf.at(i).state[0]);
  std::sort(kept.begin(), kept.end());
  CHECK(kept == std::vector<double>{2.0, 3.0, 4.0});

  Rng rng(0);
  const auto sample = buf.sample(rng, 3);
  CHECK(sample.size() == 3);
  CHECK_THROWS_AS((void)buf.sample(rng, 4), ad::ShapeError);
}

TEST_CASE("replay buffer sampling is uniform") {
  ReplayBuffer buf(50);
  for (int i = 0; i < 50; ++i)
    buf.push({{static_cast<double>(i)}, i, 0});
  Rng rng(1);
  std::vector<int> draws;
  const int trials = 20000;
  for (int t = 0; t < trials; ++t)
    draws.push_back(static_cast<int>(buf.sample(rng, 1)[0].state[0]) + 1);
  CHECK(horizon_uniformity_pvalue(draws, 50) > 0.01);
}

TEST_CASE("adam: zero gradient leaves parameters untouched") {
  PolicyHyper h;
  h.d_embed = 8;
  h.n_heads = 2;
  h.d_ffn = 8;
  PolicyParams params = init_params(h, 0);
  const PolicyParams before = params;
  OptimizerState opt = make_optimizer_state(params);
  std::vector<std::vector<double>> grads;
  for (const auto& [name, t] : params.tensors)
    grads.emplace_back(t.numel(), 0.0);
  adam_step(params, grads, opt, AdamConfig{});
  for (std::size_t i = 0; i < params.tensors.size(); ++i)
    CHECK(params.tensors[i].second.data == before.tensors[i].second.data);
}

TEST_CASE("adam: first step from zero moments is -lr * g / (|g| + eps)") {
  PolicyParams params;
  params.tensors.emplace_back("w", Tensor::vector({1.0, -2.0, 0.5}));
  OptimizerState opt = make_optimizer_state(params);
  AdamConfig cfg;
  const std::vector<double> g{0.3, -0.7, 0.001};
  adam_step(params, {g}, opt, cfg);
  const std::vector<double> want{
      1.0 - cfg.lr * 0.3 / (0.3 + cfg.eps),
      -2.0 - cfg.lr * (-0.7) / (0.7 + cfg.eps),
      0.5 - cfg.lr * 0.001 / (0.001 + cfg.eps)};
  for (int i = 0; i < 3; ++i)
    CHECK(params.tensors[0].second.data[static_cast<std::size_t>(i)] ==
          doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("adam: constant gradient step size approaches lr") {
  PolicyParams params;
  params.tensors.emplace_back("w", Tensor::scalar(0.0));
  OptimizerState opt = make_optimizer_state(params);
  AdamConfig cfg;
  double prev = 0.0;
  double step = 0.0;
  for (int i = 0; i < 200; ++i) {
    adam_step(params, {{2.5}}, opt, cfg);
    step = prev - params.tensors[0].second.data[0];
    prev = params.tensors[0].second.data[0];
  }
  CHECK(std::fabs(step) == doctest::Approx(cfg.lr).epsilon(1e-3));
}

TEST_CASE("sample_phase pushes exactly M states per episode") {
  const TrainTask task = tiny_vehicle_task();
  const TrainConfig cfg = tiny_config();
  const Policy policy{init_params(task.hyper, 0), task.plant.bounds,
                      task.norm};
  TrackingEnv env(task.plant, task.scenarios[0], false);
  ReplayBuffer buffer(cfg.buffer_capacity);
  Rng rng(0);
  int div = 0;
  sample_phase(policy, env, cfg, buffer, rng, 0, &div);
  CHECK(buffer.size() == static_cast<std::size_t>(cfg.episode_length));
  CHECK(div == 0);

  // optional storage of the reset state adds one entry per episode
  TrainConfig cfg2 = cfg;
  cfg2.store_initial_state = true;
  ReplayBuffer buffer2(cfg.buffer_capacity);
  Rng rng2(0);
  sample_phase(policy, env, cfg2, buffer2, rng2, 0, &div);
  CHECK(buffer2.size() == static_cast<std::size_t>(cfg.episode_length) + 1);
}

TEST_CASE("sample_phase applies only the first action of the plan") {
  const TrainTask task = tiny_vehicle_task();
  const TrainConfig cfg = tiny_config();
  const Policy policy{init_params(task.hyper, 1), task.plant.bounds,
                      task.norm};
  TrackingEnv env(task.plant, task.scenarios[0], false);
  ReplayBuffer buffer(cfg.buffer_capacity);
  Rng rng(7);
  sample_phase(policy, env, cfg, buffer, rng, 0, nullptr);

  // replay the episode by hand with an identical stream
  TrackingEnv env2(task.plant, task.scenarios[0], false);
  Rng rng2(7);
  env2.reset(rng2, cfg.reset);
  const int horizon = static_cast<int>(rng2.uniform_int(1, cfg.N_max));
  for (int t = 0; t < cfg.episode_length; ++t) {
    const RefWindow refs = env2.scenario().window(env2.anchor(), horizon);
    const Tensor plan = policy.forward(env2.state(), refs);
    env2.step({plan.at(0, 0), plan.at(0, 1)});  // first row only
    const BufferEntry e = buffer.at(static_cast<std::size_t>(t));
    for (std::size_t i = 0; i < e.state.size(); ++i)
      CHECK(e.state[i] == env2.state()[i]);
    CHECK(e.anchor == env2.anchor());
  }
}

TEST_CASE("learn_phase loss equals the arithmetic mean of per-state costs") {
  const TrainTask task = tiny_vehicle_task();
  TrainConfig cfg = tiny_config();
  cfg.adam.lr = 0.0;  // freeze parameters so the check is exact
  Policy policy{init_params(task.hyper, 0), task.plant.bounds, task.norm};

  ReplayBuffer buffer(cfg.buffer_capacity);
  TrackingEnv env(task.plant, task.scenarios[0], false);
  Rng rng(3);
  sample_phase(policy, env, cfg, buffer, rng, 0, nullptr);

  OptimizerState opt = make_optimizer_state(policy.params);
  Rng learn_rng(5);
  int horizon = 0;
  const auto loss =
      learn_phase(policy, task, cfg, buffer, opt, learn_rng, &horizon);
  REQUIRE(loss.has_value());

  // recompute with an identical stream
  Rng check_rng(5);
  const int n = static_cast<int>(check_rng.uniform_int(1, cfg.N_max));
  CHECK(n == horizon);
  const auto batch = buffer.sample(check_rng, cfg.minibatch);
  double want = 0.0;
  for (const auto& e : batch) {
    const RefWindow refs = task.scenarios[0].window(e.anchor, n);
    const Tensor u = policy.forward(e.state, refs);
    want += rollout(task.plant, e.state, u, refs).total_cost.item();
  }
  want /= static_cast<double>(batch.size());
  CHECK(*loss == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("one learning step decreases the loss on a frozen batch") {
  const TrainTask task = tiny_vehicle_task();
  TrainConfig cfg = tiny_config();
  cfg.adam.lr = 1e-4;
  Policy policy{init_params(task.hyper, 0), task.plant.bounds, task.norm};

  ReplayBuffer buffer(cfg.buffer_capacity);
  TrackingEnv env(task.plant, task.scenarios[0], false);
  Rng rng(3);
  sample_phase(policy, env, cfg, buffer, rng, 0, nullptr);

  OptimizerState opt = make_optimizer_state(policy.params);
  // identical streams give an identical (batch, horizon) pair twice
  Rng r1(9);
  const auto before = learn_phase(policy, task, cfg, buffer, opt, r1, nullptr);
  Rng r2(9);
  AdamConfig frozen = cfg.adam;
  frozen.lr = 0.0;
  TrainConfig cfg_frozen = cfg;
  cfg_frozen.adam = frozen;
  const auto after =
      learn_phase(policy, task, cfg_frozen, buffer, opt, r2, nullptr);
  REQUIRE(before.has_value());
  REQUIRE(after.has_value());
  CHECK(*after < *before);
}

TEST_CASE("minibatch reduction is identical across thread counts") {
  const TrainTask task = tiny_vehicle_task();
  TrainConfig cfg = tiny_config();
  Policy p1{init_params(task.hyper, 0), task.plant.bounds, task.norm};
  Policy p2 = p1;

  ReplayBuffer buffer(cfg.buffer_capacity);
  TrackingEnv env(task.plant, task.scenarios[0], false);
  Rng rng(3);
  sample_phase(p1, env, cfg, buffer, rng, 0, nullptr);

  OptimizerState o1 = make_optimizer_state(p1.params);
  OptimizerState o2 = make_optimizer_state(p2.params);
  TrainConfig serial = cfg;
  serial.threads = 1;
  TrainConfig parallel = cfg;
  parallel.threads = 4;
  Rng r1(9), r2(9);
  const auto l1 = learn_phase(p1, task, serial, buffer, o1, r1, nullptr);
  const auto l2 = learn_phase(p2, task, parallel, buffer, o2, r2, nullptr);
  REQUIRE(l1.has_value());
  REQUIRE(l2.has_value());
  CHECK(std::memcmp(&*l1, &*l2, sizeof(double)) == 0);
  for (std::size_t i = 0; i < p1.params.tensors.size(); ++i)
    CHECK(std::memcmp(p1.params.tensors[i].second.data.data(),
                      p2.params.tensors[i].second.data.data(),
                      p1.params.tensors[i].second.numel() * 8) == 0);
}

TEST_CASE("lock-step training is bit-reproducible") {
  const TrainTask task = tiny_vehicle_task();
  const TrainConfig cfg = tiny_config();
  const TrainResult a = train(task, cfg);
  const TrainResult b = train(task, cfg);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(std::memcmp(&a.log[i].loss, &b.log[i].loss, 8) == 0);
    CHECK(a.log[i].horizon == b.log[i].horizon);
    CHECK(a.log[i].buffer_size == b.log[i].buffer_size);
  }
  for (std::size_t i = 0; i < a.policy.params.tensors.size(); ++i)
    CHECK(std::memcmp(a.policy.params.tensors[i].second.data.data(),
                      b.policy.params.tensors[i].second.data.data(),
                      a.policy.params.tensors[i].second.numel() * 8) == 0);
}

TEST_CASE("training state round trip resumes identically") {
  const TrainTask task = tiny_vehicle_task();
  TrainConfig cfg = tiny_config();
  Policy policy{init_params(task.hyper, 0), task.plant.bounds, task.norm};
  ReplayBuffer buffer(cfg.buffer_capacity);
  TrackingEnv env(task.plant, task.scenarios[0], false);
  Rng rng(3);
  sample_phase(policy, env, cfg, buffer, rng, 0, nullptr);
  sample_phase(policy, env, cfg, buffer, rng, 0, nullptr);
  OptimizerState opt = make_optimizer_state(policy.params);
  (void)learn_phase(policy, task, cfg, buffer, opt, rng, nullptr);

  const std::string path = "/tmp/transmpc_test_train_state.tmpc";
  save_train_state(policy, opt, buffer, rng, 3, path);
  TrainState restored = load_train_state(path);
  CHECK(restored.iteration == 3);
  CHECK(restored.buffer.size() == buffer.size());

  // continuing both copies produces identical losses
  const auto next_a =
      learn_phase(policy, task, cfg, buffer, opt, rng, nullptr);
  restored.policy.bounds = policy.bounds;
  const auto next_b = learn_phase(restored.policy, task, cfg, restored.buffer,
                                  restored.opt, restored.rng, nullptr);
  REQUIRE(next_a.has_value());
  REQUIRE(next_b.has_value());
  CHECK(std::memcmp(&*next_a, &*next_b, 8) == 0);
  std::remove(path.c_str());
}

TEST_CASE("concurrent mode trains and collects samples") {
  const TrainTask task = tiny_vehicle_task();
  TrainConfig cfg = tiny_config();
  cfg.concurrent = true;
  cfg.iterations = 4;
  const TrainResult result = train(task, cfg);
  CHECK(result.log.size() == 4);
  for (const auto& row : result.log) CHECK(std::isfinite(row.loss));
}

TEST_CASE("learn_phase requires a filled buffer") {
  const TrainTask task = tiny_vehicle_task();
  const TrainConfig cfg = tiny_config();
  Policy policy{init_params(task.hyper, 0), task.plant.bounds, task.norm};
  ReplayBuffer buffer(cfg.buffer_capacity);
  OptimizerState opt = make_optimizer_state(policy.params);
  Rng rng(0);
  CHECK_THROWS_AS(
      (void)learn_phase(policy, task, cfg, buffer, opt, rng, nullptr),
      ad::ShapeError);
}
