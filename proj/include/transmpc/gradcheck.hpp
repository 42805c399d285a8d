#pragma once

#include <string>
#include <vector>

#include "transmpc/trainer.hpp"

namespace transmpc {

struct GradCheckSuiteResult {
  struct Item {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
  };
  std::vector<Item> items;
  double max_rel_err = 0.0;
  bool pass = true;
};

// Central finite-difference verification of every tape op, both model steps,
// the running costs, rollout gradients with respect to the control sequence,
// and the full policy+rollout composition for both architectures. Each check
// repeats over `n_seeds` random draws; composition checks sample
// `coords_per_param` coordinates per parameter tensor.
GradCheckSuiteResult run_gradcheck_suite(const TrainTask& task, int n_seeds,
                                         double h, double tol,
                                         int coords_per_param);

}  // namespace transmpc
