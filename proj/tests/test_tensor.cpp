#include <doctest.h>

#include <cstring>

#include "transmpc/rng.hpp"
#include "transmpc/tensor.hpp"

using namespace transmpc;
using ad::Tensor;

TEST_CASE("elementwise forward values") {
  const Tensor a = Tensor::vector({1.0, 2.0});
  const Tensor b = Tensor::vector({3.0, 4.0});
  CHECK(ad::add(a, b).data == std::vector<double>{4.0, 6.0});
  CHECK(ad::sub(b, a).data == std::vector<double>{2.0, 2.0});
  CHECK(ad::mul(a, b).data == std::vector<double>{3.0, 8.0});
  CHECK(ad::div(b, a).data == std::vector<double>{3.0, 2.0});
  CHECK(ad::scale(a, -2.0).data == std::vector<double>{-2.0, -4.0});
}

TEST_CASE("matmul identity leaves the operand unchanged") {
  const Tensor eye = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  const Tensor a = Tensor::matrix(2, 3, {1.5, -2.0, 0.25, 4.0, 0.0, -1.0});
  CHECK(ad::matmul(eye, a).data == a.data);
}

TEST_CASE("softmax of a constant row is uniform") {
  const Tensor s = ad::softmax(Tensor::vector({0.0, 0.0, 0.0}));
  for (double v : s.data) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("backward of sum of squares") {
  ad::Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1.0, 2.0}));
  const Tensor loss = ad::sum(ad::square(x));
  const ad::GradMap gm = tape.backward(loss);
  CHECK(gm.grad(x).data == std::vector<double>{2.0, 4.0});
}

TEST_CASE("constant loss yields zero gradients everywhere") {
  ad::Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1.0, 2.0}));
  const Tensor c = Tensor::scalar(5.0);  // no tape handle
  const ad::GradMap gm = tape.backward(c);
  CHECK(gm.grad(x).data == std::vector<double>{0.0, 0.0});
  CHECK_FALSE(gm.reached(x));
}

TEST_CASE("backward rejects non-scalar losses and foreign tapes") {
  ad::Tape tape, other;
  const Tensor x = tape.leaf(Tensor::vector({1.0, 2.0}));
  const Tensor y = ad::square(x);
  CHECK_THROWS_AS((void)tape.backward(y), ad::ShapeError);
  const Tensor z = other.leaf(Tensor::scalar(1.0));
  const Tensor w = ad::square(z);
  CHECK_THROWS_AS((void)tape.backward(w), ad::ShapeError);
}

TEST_CASE("random tanh network gradient matches finite differences") {
  // independent oracle: central differences at h=1e-6, run over several seeds
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    auto rand_t = [&](ad::Shape s) {
      Tensor t = Tensor::zeros(s);
      for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
      return t;
    };
    std::vector<std::pair<std::string, Tensor>> params{
        {"w1", rand_t({3, 4})}, {"b1", rand_t({4})},
        {"w2", rand_t({4, 4})}, {"b2", rand_t({4})},
        {"w3", rand_t({4, 1})}, {"b3", rand_t({1})}};
    const Tensor input = rand_t({1, 3});
    const auto fn = [input](ad::Tape&, std::vector<Tensor>& p) {
      Tensor h = ad::tanh(ad::row_add(ad::matmul(input, p[0]), p[1]));
      h = ad::tanh(ad::row_add(ad::matmul(h, p[2]), p[3]));
      h = ad::row_add(ad::matmul(h, p[4]), p[5]);
      return ad::sum(h);
    };
    const ad::GradCheckReport report =
        ad::grad_check(fn, params, 1e-6, 1e-4);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("grad_check on a quadratic form is near exact") {
  const Tensor x0 = Tensor::vector({0.7, -1.3, 2.1});
  const auto fn = [](ad::Tape&, std::vector<Tensor>& p) {
    return ad::sum(ad::square(p[0]));
  };
  const ad::GradCheckReport report =
      ad::grad_check(fn, {{"x", x0}}, 1e-6, 1e-8);
  CHECK(report.max_rel_err < 1e-8);
}

TEST_CASE("grad_check on a constant function reports zero error") {
  const auto fn = [](ad::Tape&, std::vector<Tensor>&) {
    return Tensor::scalar(3.5);
  };
  const ad::GradCheckReport report =
      ad::grad_check(fn, {{"x", Tensor::vector({1.0, 2.0})}}, 1e-6, 1e-8);
  CHECK(report.max_rel_err == 0.0);
}

TEST_CASE("gradient linearity in the loss") {
  Rng rng(11);
  Tensor x0 = Tensor::zeros({4});
  for (double& v : x0.data) v = rng.uniform(-1.0, 1.0);
  const double a = 2.5, b = -1.25;

  auto grads = [&](double ca, double cb) {
    ad::Tape tape;
    const Tensor x = tape.leaf(x0);
    const Tensor f = ad::sum(ad::square(x));
    const Tensor g = ad::sum(ad::mul(x, ad::sin(x)));
    const Tensor loss = ad::add(ad::scale(f, ca), ad::scale(g, cb));
    return tape.backward(loss).grad(x).data;
  };
  const auto gf = grads(1.0, 0.0);
  const auto gg = grads(0.0, 1.0);
  const auto gc = grads(a, b);
  for (std::size_t i = 0; i < gc.size(); ++i)
    CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
}

TEST_CASE("parameters off the loss path get exactly zero gradient") {
  ad::Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1.0, 2.0}));
  const Tensor unused = tape.leaf(Tensor::vector({3.0, 4.0}));
  const Tensor loss = ad::sum(ad::square(x));
  const ad::GradMap gm = tape.backward(loss);
  CHECK(gm.grad(unused).data == std::vector<double>{0.0, 0.0});
  CHECK_FALSE(gm.reached(unused));
  CHECK(gm.reached(x));
}

TEST_CASE("forward and backward are bit-deterministic") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor w = Tensor::zeros({4, 4});
    for (double& v : w.data) v = rng.uniform(-1.0, 1.0);
    ad::Tape tape;
    const Tensor wl = tape.leaf(w);
    const Tensor x = Tensor::matrix(2, 4, {1, 2, 3, 4, 5, 6, 7, 8});
    const Tensor y = ad::softmax(ad::matmul(x, wl));
    const Tensor loss = ad::mean(ad::square(y));
    const auto g = tape.backward(loss).grad(wl).data;
    return std::make_pair(y.data, g);
  };
  const auto [y1, g1] = run(42);
  const auto [y2, g2] = run(42);
  CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * 8) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * 8) == 0);
}

TEST_CASE("non-finite results are hard errors") {
  const Tensor a = Tensor::vector({1.0});
  const Tensor z = Tensor::vector({0.0});
  CHECK_THROWS_AS((void)ad::div(a, z), ad::NumericalError);
  CHECK_THROWS_AS((void)ad::sqrt(Tensor::vector({-1.0})), ad::NumericalError);
}

TEST_CASE("shape mismatches are rejected") {
  const Tensor a = Tensor::vector({1.0, 2.0});
  const Tensor b = Tensor::vector({1.0, 2.0, 3.0});
  CHECK_THROWS_AS((void)ad::add(a, b), ad::ShapeError);
  CHECK_THROWS_AS(
      (void)ad::matmul(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}),
                       Tensor::matrix(2, 2, {1, 2, 3, 4})),
      ad::ShapeError);
  CHECK_THROWS_AS((void)ad::slice(a, 1, 5), ad::ShapeError);
}

TEST_CASE("record dispatches by op kind and rejects unknown kinds") {
  const Tensor a = Tensor::vector({1.0, 2.0});
  const Tensor b = Tensor::vector({3.0, 4.0});
  CHECK(ad::record("add", {a, b}).data == std::vector<double>{4.0, 6.0});
  CHECK(ad::record("elementwise-multiply", {a, b}).data ==
        std::vector<double>{3.0, 8.0});
  CHECK(ad::record("sum", {a}).item() == doctest::Approx(3.0));
  CHECK(ad::record("scalar-scale", {a, Tensor::scalar(2.0)}).data ==
        std::vector<double>{2.0, 4.0});
  CHECK_THROWS_AS((void)ad::record("convolve", {a, b}), ad::ShapeError);
  CHECK_THROWS_AS((void)ad::record("add", {a}), ad::ShapeError);
}

TEST_CASE("tape nodes are topologically ordered") {
  ad::Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1.0, 2.0}));
  const Tensor y = ad::tanh(ad::scale(ad::square(x), 0.5));
  (void)ad::sum(y);
  for (std::size_t id = 0; id < tape.num_nodes(); ++id)
    for (int in : tape.node(static_cast<int>(id)).inputs)
      CHECK(in < static_cast<int>(id));
}

TEST_CASE("concat and slice round trips") {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::matrix(1, 3, {7, 8, 9});
  const Tensor cat = ad::concat({a, b}, 0);
  CHECK(cat.shape == ad::Shape{3, 3});
  CHECK(ad::slice(cat, 2, 3, 0, 3).data == b.data);

  const Tensor c = Tensor::matrix(2, 2, {10, 11, 12, 13});
  const Tensor side = ad::concat({a, c}, 1);
  CHECK(side.shape == ad::Shape{2, 5});
  CHECK(ad::slice(side, 0, 2, 3, 5).data == c.data);

  // flat row extraction from a matrix
  CHECK(ad::slice(a, 3, 6).data == std::vector<double>{4, 5, 6});
}
