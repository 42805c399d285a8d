#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "transmpc/tensor.hpp"
#include "transmpc/vehicle.hpp"

namespace transmpc {

enum class PolicyArch { kTransformer, kMlp };

struct PolicyHyper {
  PolicyArch arch = PolicyArch::kTransformer;
  int d_embed = 32;
  int n_heads = 2;
  int n_layers = 1;
  int d_ffn = 32;
  int n_state = 6;
  int n_ref = 4;
  int n_input = 2;
  int N_max = 20;
  // MLP baseline, fixed-horizon by construction
  int mlp_width = 32;
  int mlp_horizon = 20;
};

// Per-field input normalization applied before embedding. Reference
// positions are taken relative to the current state, making the policy
// translation-invariant; angles are wrapped; speeds divide by the nominal.
struct NormSpec {
  double pos_scale = 10.0;
  double v_nom = 5.0;
  StateLayout layout;
};

struct PolicyParams {
  PolicyHyper hyper;
  std::vector<std::pair<std::string, ad::Tensor>> tensors;

  ad::Tensor& at(const std::string& name);
  const ad::Tensor& at(const std::string& name) const;
  std::size_t total_params() const;
};

// Deterministic initialization: uniform scaled by 1/sqrt(fan_in), layer-norm
// gains at one, and the action decoder scaled down so initial actions sit
// near the middle of the bounds.
PolicyParams init_params(const PolicyHyper& hyper, std::uint64_t seed);

// Sinusoidal positional encoding; row 0 belongs to the state token.
ad::Tensor positional_encoding(std::size_t n_tokens, std::size_t d_embed);

// Registers every parameter tensor as a leaf on the tape (training path).
PolicyParams stage_on_tape(const PolicyParams& params, ad::Tape& tape);

// Encoder-only forward pass: [state token] ++ reference tokens through
// n_layers of bidirectional attention + feed-forward, then the action decoder
// over the reference positions, squashed into the bounds. One call produces
// the whole N x n_input sequence; any N >= 1 works with the same parameters.
ad::Tensor policy_forward(const std::vector<double>& state,
                          const RefWindow& refs, const PolicyParams& params,
                          const ActionBounds& bounds, const NormSpec& norm);

// Fixed-horizon MLP baseline: flattened [state, references] through three
// hidden layers; requires refs.size() == mlp_horizon.
ad::Tensor mlp_policy_forward(const std::vector<double>& state,
                              const RefWindow& refs,
                              const PolicyParams& params,
                              const ActionBounds& bounds,
                              const NormSpec& norm);

// Bundles parameters with their normalization and bounds; dispatches on the
// architecture.
struct Policy {
  PolicyParams params;
  ActionBounds bounds;
  NormSpec norm;

  ad::Tensor forward(const std::vector<double>& state,
                     const RefWindow& refs) const;
  // First action of the sequence, as plain numbers.
  std::vector<double> act(const std::vector<double>& state,
                          const RefWindow& refs) const;
};

// Checkpoint round-trip, including a JSON hyperparameter manifest.
void save_policy(const Policy& policy, const std::string& path);
Policy load_policy(const std::string& path);

// Manifest pieces, shared with the training-state checkpoint.
std::string policy_meta_json(const Policy& policy);
Policy policy_from_parts(
    const std::string& meta_json,
    const std::vector<std::pair<std::string, ad::Tensor>>& tensors);

}  // namespace transmpc
