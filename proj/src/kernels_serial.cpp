#include "transmpc/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace transmpc::kernels {

namespace {
std::atomic<int> g_max_threads{1};
}

void set_max_threads(int n) { g_max_threads.store(n < 1 ? 1 : n); }
int max_threads() { return g_max_threads.load(); }

void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = a[i * k + l];
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
}

void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      c[i * n + j] = acc;
    }
  }
}

void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double ali = a[l * m + i];
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
    }
  }
}

void softmax_rows_serial(const double* x, double* y, std::size_t rows,
                         std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    double* yi = y + i * cols;
    double mx = xi[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < cols; ++j) yi[j] *= inv;
  }
}

void layer_norm_rows_serial(const double* x, const double* gain,
                            const double* bias, double* y, std::size_t rows,
                            std::size_t cols, double eps) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    double* yi = y + i * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xi[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = xi[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv_sigma = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j)
      yi[j] = gain[j] * (xi[j] - mean) * inv_sigma + bias[j];
  }
}

void colsum_serial(const double* x, double* y, std::size_t rows,
                   std::size_t cols) {
  std::fill(y, y + cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    for (std::size_t j = 0; j < cols; ++j) y[j] += xi[j];
  }
}

void transpose_serial(const double* x, double* y, std::size_t rows,
                      std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) y[j * rows + i] = x[i * cols + j];
}

}  // namespace transmpc::kernels
