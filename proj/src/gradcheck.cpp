#include "transmpc/gradcheck.hpp"

#include <cmath>

namespace transmpc {

namespace {

using ad::Tensor;
using Params = std::vector<std::pair<std::string, Tensor>>;

Tensor rand_tensor(ad::Shape shape, Rng& rng, double lo = -1.0,
                   double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& x : t.data) x = rng.uniform(lo, hi);
  return t;
}

// magnitude in [lo_mag, hi_mag], random sign; keeps kinked/singular ops away
// from their bad points
Tensor rand_signed(ad::Shape shape, Rng& rng, double lo_mag, double hi_mag) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& x : t.data) {
    const double mag = rng.uniform(lo_mag, hi_mag);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

struct Check {
  std::string name;
  Params params;
  ad::LossFn fn;
  int coords = -1;  // -1: every coordinate
};

void run_check(const Check& check, double h, double tol, std::uint64_t seed,
               GradCheckSuiteResult& result) {
  const ad::GradCheckReport report =
      ad::grad_check(check.fn, check.params, h, tol, check.coords, seed);
  for (auto& item : result.items)
    if (item.name == check.name) {
      item.max_rel_err = std::max(item.max_rel_err, report.max_rel_err);
      item.pass = item.pass && report.pass;
      result.max_rel_err = std::max(result.max_rel_err, report.max_rel_err);
      result.pass = result.pass && report.pass;
      return;
    }
  result.items.push_back({check.name, report.max_rel_err, report.pass});
  result.max_rel_err = std::max(result.max_rel_err, report.max_rel_err);
  result.pass = result.pass && report.pass;
}

// scalarize any op output so the tape has a single loss
Tensor scalarize(const Tensor& t) { return ad::sum(ad::square(t)); }

std::vector<Check> op_checks(Rng& rng) {
  std::vector<Check> checks;
  auto add_check = [&](std::string name, Params params, ad::LossFn fn) {
    checks.push_back({std::move(name), std::move(params), std::move(fn), -1});
  };

  const Tensor a = rand_tensor({3, 4}, rng);
  const Tensor b = rand_tensor({3, 4}, rng);
  add_check("op.add", {{"a", a}, {"b", b}}, [](ad::Tape&, std::vector<Tensor>& p) {
    return scalarize(ad::add(p[0], p[1]));
  });
  add_check("op.subtract", {{"a", a}, {"b", b}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::sub(p[0], p[1]));
            });
  add_check("op.elementwise-multiply", {{"a", a}, {"b", b}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::mul(p[0], p[1]));
            });
  add_check("op.divide",
            {{"a", a}, {"b", rand_signed({3, 4}, rng, 0.5, 2.0)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::div(p[0], p[1]));
            });
  add_check("op.scalar-scale", {{"a", a}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::scale(p[0], 1.7));
            });
  add_check("op.matmul",
            {{"a", rand_tensor({3, 4}, rng)}, {"b", rand_tensor({4, 2}, rng)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::matmul(p[0], p[1]));
            });
  add_check("op.transpose", {{"a", a}}, [](ad::Tape&, std::vector<Tensor>& p) {
    return scalarize(ad::transpose(p[0]));
  });
  add_check("op.concat",
            {{"a", rand_tensor({2, 3}, rng)}, {"b", rand_tensor({1, 3}, rng)},
             {"c", rand_tensor({2, 2}, rng)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              const Tensor rows = ad::concat({p[0], p[1]}, 0);
              const Tensor cols = ad::concat({p[0], p[2]}, 1);
              return ad::add(scalarize(rows), scalarize(cols));
            });
  add_check("op.slice", {{"a", rand_tensor({4, 5}, rng)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              const Tensor flat = ad::slice(p[0], 3, 11);
              const Tensor block = ad::slice(p[0], 1, 3, 2, 5);
              return ad::add(scalarize(flat), scalarize(block));
            });
  add_check("op.sum", {{"a", a}}, [](ad::Tape&, std::vector<Tensor>& p) {
    return ad::sum(ad::square(p[0]));
  });
  add_check("op.mean", {{"a", a}}, [](ad::Tape&, std::vector<Tensor>& p) {
    return ad::mean(ad::square(p[0]));
  });
  add_check("op.square", {{"a", a}}, [](ad::Tape&, std::vector<Tensor>& p) {
    return ad::sum(ad::square(p[0]));
  });
  add_check("op.sqrt", {{"a", rand_tensor({3, 4}, rng, 0.25, 2.0)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::sqrt(p[0]));
            });
  add_check("op.tanh", {{"a", a}}, [](ad::Tape&, std::vector<Tensor>& p) {
    return scalarize(ad::tanh(p[0]));
  });
  add_check("op.relu", {{"a", rand_signed({3, 4}, rng, 0.1, 1.0)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::relu(p[0]));
            });
  add_check("op.sin", {{"a", a}}, [](ad::Tape&, std::vector<Tensor>& p) {
    return scalarize(ad::sin(p[0]));
  });
  add_check("op.cos", {{"a", a}}, [](ad::Tape&, std::vector<Tensor>& p) {
    return scalarize(ad::cos(p[0]));
  });
  add_check("op.atan2",
            {{"y", rand_signed({3, 4}, rng, 0.5, 1.5)},
             {"x", rand_signed({3, 4}, rng, 0.5, 1.5)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::atan2(p[0], p[1]));
            });
  add_check("op.softmax", {{"a", rand_tensor({2, 5}, rng, -2.0, 2.0)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::softmax(p[0]));
            });
  add_check("op.layer-normalization",
            {{"x", rand_tensor({3, 6}, rng)},
             {"g", rand_tensor({6}, rng, 0.5, 1.5)},
             {"b", rand_tensor({6}, rng)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::layer_norm(p[0], p[1], p[2]));
            });
  add_check("op.broadcast-add",
            {{"m", rand_tensor({3, 4}, rng)}, {"r", rand_tensor({4}, rng)}},
            [](ad::Tape&, std::vector<Tensor>& p) {
              return scalarize(ad::row_add(p[0], p[1]));
            });
  add_check("op.reshape", {{"a", a}}, [](ad::Tape&, std::vector<Tensor>& p) {
    return scalarize(ad::reshape(p[0], {4, 3}));
  });
  return checks;
}

std::vector<Check> model_checks(Rng& rng) {
  std::vector<Check> checks;

  const BicycleParams bp;
  Tensor vstate = Tensor::vector({0.0, 0.0, 0.0, 5.0, 0.0, 0.0});
  vstate.data[0] = rng.uniform(-1.0, 1.0);
  vstate.data[1] = rng.uniform(-1.0, 1.0);
  vstate.data[2] = rng.uniform(-0.3, 0.3);
  vstate.data[3] = rng.uniform(4.0, 6.0);
  vstate.data[4] = rng.uniform(-0.3, 0.3);
  vstate.data[5] = rng.uniform(-0.3, 0.3);
  const Tensor vinput =
      Tensor::vector({rng.uniform(-2.0, 2.0), rng.uniform(-0.4, 0.4)});
  checks.push_back(
      {"model.bicycle_step",
       {{"state", vstate}, {"input", vinput}},
       [bp](ad::Tape&, std::vector<Tensor>& p) {
         return scalarize(bicycle_step(p[0], p[1], 0.1, bp));
       },
       -1});

  Tensor rstate = Tensor::vector({0.0, 0.0, 0.0, 0.4, 0.0, 1.0, 0.5});
  for (std::size_t i = 0; i < rstate.numel(); ++i)
    rstate.data[i] += rng.uniform(-0.1, 0.1);
  const Tensor rinput =
      Tensor::vector({rng.uniform(-0.08, 0.08), rng.uniform(-0.04, 0.04)});
  checks.push_back({"model.diffdrive_step",
                    {{"state", rstate}, {"input", rinput}},
                    [](ad::Tape&, std::vector<Tensor>& p) {
                      return scalarize(diffdrive_step(p[0], p[1], 10.0));
                    },
                    -1});

  CostWeights w;
  w.speed_reg = SpeedReg::kLateral;
  const StateLayout vl = vehicle_layout();
  const std::array<double, 4> ref{0.1, -0.2, 0.05, 5.0};
  checks.push_back({"model.running_cost_track",
                    {{"state", vstate}, {"input", vinput}},
                    [w, vl, ref](ad::Tape&, std::vector<Tensor>& p) {
                      return running_cost_track(p[0], ref, p[1], w, vl);
                    },
                    -1});

  CostWeights wr;
  wr.collision = CollisionTerm::kClipped;
  const StateLayout rl = robot_layout();
  const std::array<double, 4> rref{0.0, 0.0, 0.0, 0.4};
  checks.push_back({"model.running_cost_avoid",
                    {{"state", rstate}, {"input", rinput}},
                    [wr, rl, rref](ad::Tape&, std::vector<Tensor>& p) {
                      return running_cost_avoid(p[0], rref, p[1], wr, rl);
                    },
                    -1});
  return checks;
}

}  // namespace

GradCheckSuiteResult run_gradcheck_suite(const TrainTask& task, int n_seeds,
                                         double h, double tol,
                                         int coords_per_param) {
  GradCheckSuiteResult result;

  for (int seed = 0; seed < n_seeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    for (const Check& c : op_checks(rng)) run_check(c, h, tol, 17 + seed, result);
    for (const Check& c : model_checks(rng)) run_check(c, h, tol, 31 + seed, result);

    // rollout gradient with respect to the control sequence
    {
      long anchor = 0;
      TrainConfig tc;
      const std::vector<double> x0 = sample_reset_state(
          task.scenarios.front(), tc.reset, task.robot_task, rng, &anchor);
      const RefWindow refs = task.scenarios.front().window(anchor, 5);
      const std::size_t dim = 5 * static_cast<std::size_t>(task.plant.n_input);
      Tensor u0 = Tensor::zeros({dim});
      for (std::size_t i = 0; i < dim; ++i) {
        const std::size_t d = i % task.plant.bounds.dims();
        u0.data[i] = rng.uniform(0.3 * task.plant.bounds.lo[d],
                                 0.3 * task.plant.bounds.hi[d]);
      }
      const Plant* plant = &task.plant;
      Check c{"rollout.dV_dU",
              {{"U", u0}},
              [plant, x0, refs](ad::Tape&, std::vector<Tensor>& p) {
                return rollout(*plant, x0, p[0], refs).total_cost;
              },
              -1};
      run_check(c, h, tol, 47 + seed, result);
    }

    // full policy + rollout composition, both architectures
    for (const bool mlp : {false, true}) {
      PolicyHyper hyper = task.hyper;
      hyper.arch = mlp ? PolicyArch::kMlp : PolicyArch::kTransformer;
      const PolicyParams init =
          init_params(hyper, static_cast<std::uint64_t>(seed));
      long anchor = 0;
      TrainConfig tc;
      const std::vector<double> x0 = sample_reset_state(
          task.scenarios.front(), tc.reset, task.robot_task, rng, &anchor);
      const int horizon = mlp ? hyper.mlp_horizon : 5;
      const RefWindow refs =
          task.scenarios.front().window(anchor, horizon);
      const Plant* plant = &task.plant;
      const ActionBounds bounds = task.plant.bounds;
      const NormSpec norm = task.norm;
      std::vector<std::string> names;
      for (const auto& [name, t] : init.tensors) names.push_back(name);

      Check c{mlp ? "composition.mlp_rollout"
                  : "composition.policy_rollout",
              init.tensors,
              [plant, x0, refs, hyper, bounds, norm, names,
               mlp](ad::Tape&, std::vector<Tensor>& staged) {
                PolicyParams p;
                p.hyper = hyper;
                for (std::size_t i = 0; i < staged.size(); ++i)
                  p.tensors.emplace_back(names[i], staged[i]);
                const Tensor u =
                    mlp ? mlp_policy_forward(x0, refs, p, bounds, norm)
                        : policy_forward(x0, refs, p, bounds, norm);
                return rollout(*plant, x0, u, refs).total_cost;
              },
              coords_per_param};
      run_check(c, h, tol, 71 + seed, result);
    }
  }
  return result;
}

}  // namespace transmpc
