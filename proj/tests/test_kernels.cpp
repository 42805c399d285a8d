#include <doctest.h>

#include <array>
#include <vector>

#include "transmpc/kernels.hpp"
#include "transmpc/rng.hpp"

using namespace transmpc;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

// independent reference for the matmul family
void naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                  std::vector<double>& c, std::size_t m, std::size_t k,
                  std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
      c[i * n + j] = acc;
    }
}

}  // namespace

TEST_CASE("matmul matches a naive reference") {
  Rng rng(1);
  const std::size_t m = 5, k = 7, n = 3;
  const auto a = random_vec(m * k, rng);
  const auto b = random_vec(k * n, rng);
  std::vector<double> got(m * n), want(m * n);
  kernels::matmul_serial(a.data(), b.data(), got.data(), m, k, n);
  naive_matmul(a, b, want, m, k, n);
  for (std::size_t i = 0; i < want.size(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("matmul_nt and matmul_tn match rearranged naive products") {
  Rng rng(2);
  const std::size_t m = 4, k = 6, n = 5;
  const auto a = random_vec(m * k, rng);
  const auto bt = random_vec(n * k, rng);  // b stored as (n x k)
  std::vector<double> got(m * n), want(m * n), b(k * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) b[j * n + i] = bt[i * k + j];
  kernels::matmul_nt_serial(a.data(), bt.data(), got.data(), m, k, n);
  naive_matmul(a, b, want, m, k, n);
  for (std::size_t i = 0; i < want.size(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));

  const auto at = random_vec(k * m, rng);  // a stored as (k x m)
  const auto b2 = random_vec(k * n, rng);
  std::vector<double> a2(m * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < m; ++j) a2[j * k + i] = at[i * m + j];
  std::vector<double> got2(m * n), want2(m * n);
  kernels::matmul_tn_serial(at.data(), b2.data(), got2.data(), m, k, n);
  naive_matmul(a2, b2, want2, m, k, n);
  for (std::size_t i = 0; i < want2.size(); ++i)
    CHECK(got2[i] == doctest::Approx(want2[i]).epsilon(1e-12));
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
  Rng rng(3);
  const int saved = kernels::max_threads();
  kernels::set_max_threads(4);
  const std::vector<std::array<std::size_t, 3>> sizes{
      {1, 1, 1}, {3, 5, 7}, {17, 33, 9}, {64, 64, 64}};
  for (const auto [m, k, n] : sizes) {
    const auto a = random_vec(m * k, rng);
    const auto b = random_vec(k * n, rng);
    std::vector<double> cs(m * n), cp(m * n);
    kernels::matmul_serial(a.data(), b.data(), cs.data(), m, k, n);
    kernels::matmul_parallel(a.data(), b.data(), cp.data(), m, k, n);
    CHECK(cs == cp);

    const auto bt = random_vec(n * k, rng);
    kernels::matmul_nt_serial(a.data(), bt.data(), cs.data(), m, k, n);
    kernels::matmul_nt_parallel(a.data(), bt.data(), cp.data(), m, k, n);
    CHECK(cs == cp);

    const auto at = random_vec(k * m, rng);
    kernels::matmul_tn_serial(at.data(), b.data(), cs.data(), m, k, n);
    kernels::matmul_tn_parallel(at.data(), b.data(), cp.data(), m, k, n);
    CHECK(cs == cp);
  }

  const std::size_t rows = 19, cols = 23;
  const auto x = random_vec(rows * cols, rng);
  std::vector<double> ys(rows * cols), yp(rows * cols);
  kernels::softmax_rows_serial(x.data(), ys.data(), rows, cols);
  kernels::softmax_rows_parallel(x.data(), yp.data(), rows, cols);
  CHECK(ys == yp);

  const auto g = random_vec(cols, rng);
  const auto bia = random_vec(cols, rng);
  kernels::layer_norm_rows_serial(x.data(), g.data(), bia.data(), ys.data(),
                                  rows, cols, 1e-5);
  kernels::layer_norm_rows_parallel(x.data(), g.data(), bia.data(), yp.data(),
                                    rows, cols, 1e-5);
  CHECK(ys == yp);

  std::vector<double> ss(cols), sp(cols);
  kernels::colsum_serial(x.data(), ss.data(), rows, cols);
  kernels::colsum_parallel(x.data(), sp.data(), rows, cols);
  CHECK(ss == sp);

  std::vector<double> ts(rows * cols), tp(rows * cols);
  kernels::transpose_serial(x.data(), ts.data(), rows, cols);
  kernels::transpose_parallel(x.data(), tp.data(), rows, cols);
  CHECK(ts == tp);
  kernels::set_max_threads(saved);
}

TEST_CASE("softmax rows are normalized and max-stable") {
  std::vector<double> x{1000.0, 1000.0, 1000.0, -3.0, 0.0, 5.0};
  std::vector<double> y(6);
  kernels::softmax_rows_serial(x.data(), y.data(), 2, 3);
  CHECK(y[0] == doctest::Approx(1.0 / 3.0));
  CHECK(y[1] == doctest::Approx(1.0 / 3.0));
  CHECK(y[2] == doctest::Approx(1.0 / 3.0));
  CHECK(y[3] + y[4] + y[5] == doctest::Approx(1.0));
  CHECK(y[5] > y[4]);
  CHECK(y[4] > y[3]);
}
