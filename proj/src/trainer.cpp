#include "transmpc/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "transmpc/checkpoint.hpp"

namespace transmpc {

namespace {

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch())
      .count();
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Replay buffer

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  entries_.reserve(capacity);
}

ReplayBuffer::ReplayBuffer(const ReplayBuffer& other) : capacity_(0) {
  *this = other;
}

ReplayBuffer& ReplayBuffer::operator=(const ReplayBuffer& other) {
  if (this == &other) return *this;
  std::scoped_lock lock(other.mutex_);
  capacity_ = other.capacity_;
  next_ = other.next_;
  total_pushed_ = other.total_pushed_;
  entries_ = other.entries_;
  return *this;
}

void ReplayBuffer::push(BufferEntry entry) {
  std::scoped_lock lock(mutex_);
  if (capacity_ == 0) return;
  if (entries_.size() < capacity_) {
    entries_.push_back(std::move(entry));
  } else {
    entries_[next_] = std::move(entry);
  }
  next_ = (next_ + 1) % capacity_;
  ++total_pushed_;
}

std::vector<BufferEntry> ReplayBuffer::sample(Rng& rng, std::size_t k) const {
  std::scoped_lock lock(mutex_);
  if (entries_.empty()) throw ad::ShapeError("replay buffer: empty");
  if (k > entries_.size())
    throw ad::ShapeError("replay buffer: sample larger than current size");
  std::vector<BufferEntry> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    out.push_back(entries_[static_cast<std::size_t>(rng.uniform_int(
        0, static_cast<std::int64_t>(entries_.size()) - 1))]);
  return out;
}

BufferEntry ReplayBuffer::at(std::size_t i) const {
  std::scoped_lock lock(mutex_);
  return entries_[i];
}

std::size_t ReplayBuffer::size() const {
  std::scoped_lock lock(mutex_);
  return entries_.size();
}

std::uint64_t ReplayBuffer::total_pushed() const {
  std::scoped_lock lock(mutex_);
  return total_pushed_;
}

void ReplayBuffer::restore_ring(std::vector<BufferEntry> entries,
                                std::size_t next,
                                std::uint64_t total_pushed) {
  std::scoped_lock lock(mutex_);
  entries_ = std::move(entries);
  next_ = next;
  total_pushed_ = total_pushed;
}

// ---------------------------------------------------------------------------
// Adam

OptimizerState make_optimizer_state(const PolicyParams& params) {
  OptimizerState s;
  for (const auto& [name, t] : params.tensors) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  }
  return s;
}

void adam_step(PolicyParams& params,
               const std::vector<std::vector<double>>& grads,
               OptimizerState& state, const AdamConfig& cfg) {
  if (grads.size() != params.tensors.size() ||
      state.m.size() != params.tensors.size())
    throw ad::ShapeError("adam_step: gradient/state count mismatch");
  state.step += 1;
  const double bc1 =
      1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 =
      1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& p = params.tensors[t].second.data;
    const auto& g = grads[t];
    if (g.size() != p.size()) throw ad::ShapeError("adam_step: shape mismatch");
    auto& m = state.m[t];
    auto& v = state.v[t];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Phases

void sample_phase(const Policy& policy, TrackingEnv& env,
                  const TrainConfig& cfg, ReplayBuffer& buffer, Rng& rng,
                  int scenario_id, int* divergences) {
  env.reset(rng, cfg.reset);
  if (cfg.store_initial_state)
    buffer.push({env.state(), env.anchor(), scenario_id});
  const int horizon =
      policy.params.hyper.arch == PolicyArch::kMlp
          ? policy.params.hyper.mlp_horizon
          : static_cast<int>(rng.uniform_int(1, cfg.N_max));
  for (int t = 0; t < cfg.episode_length; ++t) {
    const RefWindow refs = env.scenario().window(env.anchor(), horizon);
    try {
      const std::vector<double> u = policy.act(env.state(), refs);
      env.step(u);  // only U[0] reaches the environment
    } catch (const ad::NumericalError&) {
      if (divergences) ++*divergences;
      env.reset(rng, cfg.reset);
      if (cfg.store_initial_state)
        buffer.push({env.state(), env.anchor(), scenario_id});
      continue;
    }
    buffer.push({env.state(), env.anchor(), scenario_id});
  }
}

std::optional<double> learn_phase(Policy& policy, const TrainTask& task,
                                  const TrainConfig& cfg,
                                  const ReplayBuffer& buffer,
                                  OptimizerState& opt, Rng& rng,
                                  int* horizon_out) {
  if (buffer.size() < cfg.minibatch)
    throw ad::ShapeError("learn_phase: buffer smaller than the minibatch");
  // one horizon per learning pass, shared by every state in the batch
  const int horizon =
      policy.params.hyper.arch == PolicyArch::kMlp
          ? policy.params.hyper.mlp_horizon
          : static_cast<int>(rng.uniform_int(1, cfg.N_max));
  if (horizon_out) *horizon_out = horizon;
  const std::vector<BufferEntry> batch = buffer.sample(rng, cfg.minibatch);

  const std::size_t k = batch.size();
  const std::size_t nt = policy.params.tensors.size();
  std::vector<double> costs(k, 0.0);
  std::vector<std::vector<std::vector<double>>> grads(k);
  std::vector<char> ok(k, 1);
  std::string fatal;  // exceptions must not unwind through the parallel loop

  const int threads = std::max(1, cfg.threads);
#pragma omp parallel for num_threads(threads) schedule(dynamic) if (threads > 1)
  for (std::size_t s = 0; s < k; ++s) {
    try {
      ad::Tape tape;
      const PolicyParams staged = stage_on_tape(policy.params, tape);
      const Scenario& scenario =
          task.scenarios[static_cast<std::size_t>(batch[s].scenario_id)];
      const RefWindow refs = scenario.window(batch[s].anchor, horizon);
      const ad::Tensor controls =
          staged.hyper.arch == PolicyArch::kMlp
              ? mlp_policy_forward(batch[s].state, refs, staged,
                                   policy.bounds, policy.norm)
              : policy_forward(batch[s].state, refs, staged, policy.bounds,
                               policy.norm);
      const RolloutResult rr =
          rollout(task.plant, batch[s].state, controls, refs);
      const ad::GradMap gm = tape.backward(rr.total_cost);
      costs[s] = rr.total_cost.item();
      grads[s].reserve(nt);
      for (std::size_t t = 0; t < nt; ++t)
        grads[s].push_back(gm.grad(staged.tensors[t].second).data);
    } catch (const ad::NumericalError&) {
      ok[s] = 0;
    } catch (const std::exception& e) {
#pragma omp critical
      fatal = e.what();
    }
  }
  if (!fatal.empty()) throw std::runtime_error("learn_phase: " + fatal);

  for (std::size_t s = 0; s < k; ++s)
    if (!ok[s]) return std::nullopt;  // abort the step, parameters untouched

  double loss = 0.0;
  for (std::size_t s = 0; s < k; ++s) loss += costs[s];
  loss /= static_cast<double>(k);

  // fixed-order reduction so the result is identical for any thread count
  std::vector<std::vector<double>> mean_grads(nt);
  for (std::size_t t = 0; t < nt; ++t) {
    mean_grads[t].assign(policy.params.tensors[t].second.numel(), 0.0);
    for (std::size_t s = 0; s < k; ++s) {
      const auto& g = grads[s][t];
      for (std::size_t i = 0; i < g.size(); ++i) mean_grads[t][i] += g[i];
    }
    const double inv = 1.0 / static_cast<double>(k);
    for (double& x : mean_grads[t]) x *= inv;
    if (!all_finite(mean_grads[t])) return std::nullopt;
  }

  adam_step(policy.params, mean_grads, opt, cfg.adam);
  return loss;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

void write_log_header(std::ofstream& os) {
  os << "iteration,loss,buffer_size,horizon,wall_s\n";
}

void write_log_row(std::ofstream& os, const TrainLogRow& row) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%.17g,%zu,%d,%.3f\n", row.iteration,
                row.loss, row.buffer_size, row.horizon, row.wall_s);
  os << buf;
}

}  // namespace

TrainResult train(const TrainTask& task, const TrainConfig& cfg,
                  const std::string& out_dir) {
  if (task.scenarios.empty())
    throw ad::ShapeError("train: task needs at least one scenario");

  TrainResult result;
  result.policy =
      Policy{init_params(task.hyper, cfg.seed), task.plant.bounds, task.norm};
  Policy& policy = result.policy;

  std::vector<TrackingEnv> envs;
  envs.reserve(task.scenarios.size());
  for (const Scenario& s : task.scenarios)
    envs.emplace_back(task.plant, s, task.robot_task);

  ReplayBuffer buffer(cfg.buffer_capacity);
  OptimizerState opt = make_optimizer_state(policy.params);
  Rng rng(cfg.seed);

  std::ofstream log;
  const bool persist = !out_dir.empty();
  if (persist) {
    std::filesystem::create_directories(out_dir);
    log.open(out_dir + "/train_log.csv", std::ios::trunc);
    write_log_header(log);
  }
  const double t0 = now_seconds();

  auto log_iteration = [&](int it, std::optional<double> loss, int horizon) {
    TrainLogRow row;
    row.iteration = it;
    row.loss = loss.value_or(std::nan(""));
    row.buffer_size = buffer.size();
    row.horizon = horizon;
    row.wall_s = now_seconds() - t0;
    result.log.push_back(row);
    if (persist) write_log_row(log, row);
    if (!loss) ++result.aborted_steps;
  };

  auto checkpoint_if_due = [&](int it) {
    if (!persist || cfg.checkpoint_every <= 0) return;
    if (it % cfg.checkpoint_every != 0) return;
    save_train_state(policy, opt, buffer, rng, it,
                     out_dir + "/train_state_" + std::to_string(it) + ".tmpc");
  };

  if (!cfg.concurrent) {
    for (int it = 1; it <= cfg.iterations; ++it) {
      const int sid =
          task.scenarios.size() > 1
              ? static_cast<int>(rng.uniform_int(
                    0, static_cast<std::int64_t>(task.scenarios.size()) - 1))
              : 0;
      sample_phase(policy, envs[static_cast<std::size_t>(sid)], cfg, buffer,
                   rng, sid, &result.divergence_resets);
      std::optional<double> loss;
      int horizon = 0;
      if (buffer.size() >= cfg.minibatch)
        loss = learn_phase(policy, task, cfg, buffer, opt, rng, &horizon);
      log_iteration(it, loss, horizon);
      checkpoint_if_due(it);
    }
  } else {
    // Producer samples against the latest published snapshot; the learner
    // owns the parameters and publishes after each update.
    std::mutex snapshot_mutex;
    Policy snapshot = policy;
    std::atomic<bool> stop{false};
    std::atomic<int> divergences{0};

    std::thread producer([&] {
      Rng prng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
      while (!stop.load(std::memory_order_relaxed)) {
        const int sid =
            task.scenarios.size() > 1
                ? static_cast<int>(prng.uniform_int(
                      0, static_cast<std::int64_t>(task.scenarios.size()) - 1))
                : 0;
        Policy snap;
        {
          std::scoped_lock lock(snapshot_mutex);
          snap = snapshot;
        }
        int div = 0;
        sample_phase(snap, envs[static_cast<std::size_t>(sid)], cfg, buffer,
                     prng, sid, &div);
        divergences += div;
      }
    });

    while (buffer.size() < cfg.minibatch)
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    for (int it = 1; it <= cfg.iterations; ++it) {
      int horizon = 0;
      const std::optional<double> loss =
          learn_phase(policy, task, cfg, buffer, opt, rng, &horizon);
      {
        std::scoped_lock lock(snapshot_mutex);
        snapshot = policy;
      }
      log_iteration(it, loss, horizon);
      checkpoint_if_due(it);
    }
    stop.store(true);
    producer.join();
    result.divergence_resets += divergences.load();
  }

  if (persist) {
    save_policy(policy, out_dir + "/policy_final.tmpc");
    save_train_state(policy, opt, buffer, rng, cfg.iterations,
                     out_dir + "/train_state_final.tmpc");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Training-state persistence

void save_train_state(const Policy& policy, const OptimizerState& opt,
                      const ReplayBuffer& buffer, const Rng& rng,
                      int iteration, const std::string& path) {
  Checkpoint ckpt;
  ckpt.entries = policy.params.tensors;
  for (std::size_t t = 0; t < policy.params.tensors.size(); ++t) {
    const auto& [name, tensor] = policy.params.tensors[t];
    ckpt.entries.emplace_back("opt.m/" + name,
                              ad::Tensor(tensor.shape, opt.m[t]));
    ckpt.entries.emplace_back("opt.v/" + name,
                              ad::Tensor(tensor.shape, opt.v[t]));
  }

  const std::size_t n = buffer.size();
  const std::size_t dim = n > 0 ? buffer.at(0).state.size() : 0;
  ad::Tensor states = ad::Tensor::zeros({n, std::max<std::size_t>(dim, 1)});
  ad::Tensor anchors = ad::Tensor::zeros({std::max<std::size_t>(n, 1)});
  ad::Tensor scen = ad::Tensor::zeros({std::max<std::size_t>(n, 1)});
  for (std::size_t i = 0; i < n; ++i) {
    const BufferEntry e = buffer.at(i);
    for (std::size_t j = 0; j < dim; ++j)
      states.data[i * std::max<std::size_t>(dim, 1) + j] = e.state[j];
    anchors.data[i] = static_cast<double>(e.anchor);
    scen.data[i] = static_cast<double>(e.scenario_id);
  }
  ckpt.entries.emplace_back("buffer.states", std::move(states));
  ckpt.entries.emplace_back("buffer.anchors", std::move(anchors));
  ckpt.entries.emplace_back("buffer.scenario_ids", std::move(scen));

  nlohmann::json meta;
  meta["policy"] = nlohmann::json::parse(policy_meta_json(policy));
  meta["iteration"] = iteration;
  meta["opt_step"] = opt.step;
  meta["rng"] = rng.save_state();
  meta["buffer"] = {{"capacity", buffer.capacity()},
                    {"size", n},
                    {"next", buffer.ring_next()},
                    {"total_pushed", buffer.total_pushed()},
                    {"state_dim", dim}};
  ckpt.meta_json = meta.dump();
  save_checkpoint(ckpt, path);
}

TrainState load_train_state(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const nlohmann::json meta = nlohmann::json::parse(ckpt.meta_json);

  std::vector<std::pair<std::string, ad::Tensor>> param_tensors;
  for (const auto& [name, t] : ckpt.entries) {
    if (name.rfind("opt.", 0) == 0 || name.rfind("buffer.", 0) == 0) continue;
    param_tensors.emplace_back(name, t);
  }

  TrainState state;
  state.policy =
      policy_from_parts(meta.at("policy").dump(), param_tensors);
  state.iteration = meta.at("iteration").get<int>();

  state.opt.step = meta.at("opt_step").get<std::uint64_t>();
  for (const auto& [name, tensor] : state.policy.params.tensors) {
    state.opt.m.push_back(ckpt.find("opt.m/" + name)->data);
    state.opt.v.push_back(ckpt.find("opt.v/" + name)->data);
  }

  const auto& bj = meta.at("buffer");
  state.buffer = ReplayBuffer(bj.at("capacity").get<std::size_t>());
  const std::size_t n = bj.at("size").get<std::size_t>();
  const std::size_t dim = bj.at("state_dim").get<std::size_t>();
  const ad::Tensor* states = ckpt.find("buffer.states");
  const ad::Tensor* anchors = ckpt.find("buffer.anchors");
  const ad::Tensor* scen = ckpt.find("buffer.scenario_ids");
  std::vector<BufferEntry> entries;
  entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    BufferEntry e;
    e.state.assign(states->data.begin() +
                       static_cast<std::ptrdiff_t>(i * std::max<std::size_t>(dim, 1)),
                   states->data.begin() +
                       static_cast<std::ptrdiff_t>(i * std::max<std::size_t>(dim, 1) + dim));
    e.anchor = static_cast<long>(anchors->data[i]);
    e.scenario_id = static_cast<int>(scen->data[i]);
    entries.push_back(std::move(e));
  }
  state.buffer.restore_ring(std::move(entries), bj.at("next").get<std::size_t>(),
                            bj.at("total_pushed").get<std::uint64_t>());
  state.rng.restore_state(meta.at("rng").get<std::string>());
  return state;
}

}  // namespace transmpc
