#pragma once

#include <cstdint>
#include <vector>

#include "transmpc/vehicle.hpp"

namespace transmpc {

struct OracleSettings {
  double tol = 1e-8;       // projected-gradient infinity norm
  int max_iters = 2000;    // per start
  int restarts = 8;        // random starts besides zero and extra starts
  int lbfgs_memory = 10;
  std::uint64_t seed = 0;
};

// Finite-horizon optimal control instance: minimize the rolled-out cost over
// the flat control sequence inside the plant's box bounds.
struct OracleProblem {
  const Plant* plant = nullptr;
  std::vector<double> x0;
  RefWindow refs;
  OracleSettings settings;
  // Additional warm starts (flat N * n_input), tried alongside zero and the
  // random restarts.
  std::vector<std::vector<double>> extra_starts;
};

struct OracleSolution {
  std::vector<double> controls;  // flat N * n_input, inside the box
  double cost = 0.0;
  double residual = 0.0;  // projected-gradient infinity norm at the solution
  int iterations = 0;     // summed over all starts
  bool converged = false;
};

// Multi-start projected gradient descent with backtracking line search and an
// L-BFGS direction while no bound is active. Gradients come from the tape, so
// they are exact for the rolled-out cost. Throws NumericalError when every
// start diverges; otherwise returns the best start, flagged converged only if
// its residual met the tolerance.
OracleSolution solve(const OracleProblem& problem);

// Norm of the gradient with components zeroed where they push outward at an
// active bound.
double first_order_residual(const OracleProblem& problem,
                            const std::vector<double>& controls);

// Exact finite-horizon LQ sequence via backward Riccati recursion and forward
// simulation: cost sum_{i=0}^{N-1} (x_i' Q x_i + u_i' R u_i), no terminal
// term. Matrices are row-major flat. Throws on a singular R.
std::vector<double> lqr_closed_form(const std::vector<double>& A,
                                    const std::vector<double>& B,
                                    const std::vector<double>& Q,
                                    const std::vector<double>& R, int n_state,
                                    int n_input, int horizon,
                                    const std::vector<double>& x0);

// Linear-quadratic plant over the tape, used to validate the solver against
// the Riccati route. The reference window is ignored by its cost.
Plant make_lq_plant(const std::vector<double>& A, const std::vector<double>& B,
                    const std::vector<double>& Q, const std::vector<double>& R,
                    int n_state, int n_input, const ActionBounds& bounds);

}  // namespace transmpc
