#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "transmpc/evaluator.hpp"
#include "transmpc/oracle.hpp"
#include "transmpc/trainer.hpp"

namespace transmpc {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Effective run configuration: task-specific defaults patched by a profile,
// an optional JSON file, and repeatable key=value overrides, in that order.
// Unknown keys are rejected by name.
class Config {
 public:
  // profile: "desk" (CI-speed) or "paper" (full-scale dimensions).
  // task: "vehicle" or "robot".
  static Config profile(const std::string& profile_name,
                        const std::string& task);
  // Resolves the task from the file/overrides first, then builds the profile
  // and applies both.
  static Config build(const std::string& profile_name,
                      const std::string& config_path,
                      const std::vector<std::string>& overrides);

  void merge_file(const std::string& path);
  void apply_override(const std::string& keyval);  // "a.b.c=value"
  void validate() const;

  std::string dump(int indent = 2) const { return data_.dump(indent); }
  std::string hash() const;  // FNV-1a over the canonical dump

  const nlohmann::json& json() const { return data_; }
  nlohmann::json& json() { return data_; }

  // typed builders
  bool robot_task() const;
  std::uint64_t seed() const;
  void set_seed(std::uint64_t s);
  BicycleParams bicycle_params() const;
  CostWeights cost_weights() const;
  Plant plant() const;
  Scenario scenario_by_name(const std::string& name) const;
  std::vector<Scenario> train_scenarios() const;
  PolicyHyper policy_hyper() const;
  NormSpec norm_spec() const;
  TrainTask train_task() const;
  TrainConfig train_config() const;
  OracleSettings oracle_settings() const;
  EvalSettings eval_settings() const;
  std::string eval_scenario_name() const;
  std::vector<int> closed_loop_horizons() const;
  std::vector<int> bench_horizons() const;
  double dt() const;

 private:
  nlohmann::json data_;
};

// Project version string recorded in every run directory.
extern const char* kVersion;

}  // namespace transmpc
