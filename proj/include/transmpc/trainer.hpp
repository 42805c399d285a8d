#pragma once

#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "transmpc/policy.hpp"
#include "transmpc/rng.hpp"
#include "transmpc/vehicle.hpp"

namespace transmpc {

// One stored exploration state plus what is needed to rebuild its reference
// window during learning: the path anchor index and the scenario it came from.
struct BufferEntry {
  std::vector<double> state;
  long anchor = 0;
  int scenario_id = 0;
};

// Fixed-capacity ring buffer; the oldest entry is evicted first and sampling
// is uniform with replacement. push and sample are individually atomic, which
// is the granularity the concurrent training mode relies on.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);
  ReplayBuffer(const ReplayBuffer& other);
  ReplayBuffer& operator=(const ReplayBuffer& other);

  void push(BufferEntry entry);
  std::vector<BufferEntry> sample(Rng& rng, std::size_t k) const;
  BufferEntry at(std::size_t i) const;
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  std::uint64_t total_pushed() const;
  std::size_t ring_next() const { return next_; }
  void restore_ring(std::vector<BufferEntry> entries, std::size_t next,
                    std::uint64_t total_pushed);

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::uint64_t total_pushed_ = 0;
  std::vector<BufferEntry> entries_;
  mutable std::mutex mutex_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<std::vector<double>> m, v;  // per parameter tensor
  std::uint64_t step = 0;
};

OptimizerState make_optimizer_state(const PolicyParams& params);

// Standard bias-corrected Adam update, in place.
void adam_step(PolicyParams& params,
               const std::vector<std::vector<double>>& grads,
               OptimizerState& state, const AdamConfig& cfg);

struct TrainConfig {
  int iterations = 2000;
  int episode_length = 50;  // M
  std::size_t minibatch = 64;
  std::size_t buffer_capacity = 20000;
  int N_max = 20;
  AdamConfig adam;
  std::uint64_t seed = 0;
  int checkpoint_every = 500;
  int threads = 1;          // minibatch rollouts; reduction order is fixed
  bool concurrent = false;  // sampling and learning on separate threads
  bool store_initial_state = false;  // also push the reset state each episode
  ResetParams reset;
};

// Everything the trainer needs about the task: the model f used both as the
// environment and for learning rollouts, the reference scenarios (an episode
// picks one uniformly), and the policy template.
struct TrainTask {
  Plant plant;
  std::vector<Scenario> scenarios;
  bool robot_task = false;
  PolicyHyper hyper;
  NormSpec norm;
};

struct TrainLogRow {
  int iteration = 0;
  double loss = 0.0;
  std::size_t buffer_size = 0;
  int horizon = 0;
  double wall_s = 0.0;
};

struct TrainResult {
  Policy policy;
  std::vector<TrainLogRow> log;
  int divergence_resets = 0;
  int aborted_steps = 0;
};

// One exploration episode: draws the horizon, then for M steps runs the
// policy, applies only the first action on the true model, and pushes the
// visited state. Divergence resets the environment and is counted.
void sample_phase(const Policy& policy, TrackingEnv& env,
                  const TrainConfig& cfg, ReplayBuffer& buffer, Rng& rng,
                  int scenario_id, int* divergences);

// One learning step: samples a horizon shared by the whole minibatch plus a
// batch of states, rolls the policy's full sequence through the model, and
// takes an Adam step on the mean cost. Returns the batch loss, or nothing if
// the step was aborted on a non-finite loss.
std::optional<double> learn_phase(Policy& policy, const TrainTask& task,
                                  const TrainConfig& cfg,
                                  const ReplayBuffer& buffer,
                                  OptimizerState& opt, Rng& rng,
                                  int* horizon_out);

// Full training run. Checkpoints and the CSV log are written under out_dir
// when it is non-empty. Lock-step mode is bytewise reproducible from
// (seed, config); the concurrent mode is not.
TrainResult train(const TrainTask& task, const TrainConfig& cfg,
                  const std::string& out_dir = "");

// Full-state checkpoint (parameters, Adam moments, buffer, RNG stream) so a
// run can resume exactly.
void save_train_state(const Policy& policy, const OptimizerState& opt,
                      const ReplayBuffer& buffer, const Rng& rng,
                      int iteration, const std::string& path);

struct TrainState {
  Policy policy;
  OptimizerState opt;
  ReplayBuffer buffer{0};
  Rng rng;
  int iteration = 0;
};

TrainState load_train_state(const std::string& path);

}  // namespace transmpc
