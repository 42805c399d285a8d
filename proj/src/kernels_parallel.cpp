#include "transmpc/kernels.hpp"

#include <algorithm>
#include <cmath>

#if defined(_OPENMP)
#include <omp.h>
#endif

// OpenMP variants. Work is split across output rows (or columns for colsum);
// per-element reduction order is identical to the serial reference, so
// results match it bit for bit.
namespace transmpc::kernels {

namespace {

bool go_parallel(std::size_t work) {
#if defined(_OPENMP)
  return max_threads() > 1 && work >= (1u << 15);
#else
  (void)work;
  return false;
#endif
}

}  // namespace

void matmul_parallel(const double* a, const double* b, double* c,
                     std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
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

void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n) {
  if (go_parallel(m * k * n))
    matmul_parallel(a, b, c, m, k, n);
  else
    matmul_serial(a, b, c, m, k, n);
}

void matmul_nt_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
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

void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  if (go_parallel(m * k * n))
    matmul_nt_parallel(a, b, c, m, k, n);
  else
    matmul_nt_serial(a, b, c, m, k, n);
}

void matmul_tn_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
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

void matmul_tn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  if (go_parallel(m * k * n))
    matmul_tn_parallel(a, b, c, m, k, n);
  else
    matmul_tn_serial(a, b, c, m, k, n);
}

void softmax_rows_parallel(const double* x, double* y, std::size_t rows,
                           std::size_t cols) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (std::size_t i = 0; i < rows; ++i)
    softmax_rows_serial(x + i * cols, y + i * cols, 1, cols);
}

void softmax_rows(const double* x, double* y, std::size_t rows,
                  std::size_t cols) {
  if (go_parallel(rows * cols * 8))
    softmax_rows_parallel(x, y, rows, cols);
  else
    softmax_rows_serial(x, y, rows, cols);
}

void layer_norm_rows_parallel(const double* x, const double* gain,
                              const double* bias, double* y, std::size_t rows,
                              std::size_t cols, double eps) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (std::size_t i = 0; i < rows; ++i)
    layer_norm_rows_serial(x + i * cols, gain, bias, y + i * cols, 1, cols,
                           eps);
}

void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double* y, std::size_t rows, std::size_t cols,
                     double eps) {
  if (go_parallel(rows * cols * 8))
    layer_norm_rows_parallel(x, gain, bias, y, rows, cols, eps);
  else
    layer_norm_rows_serial(x, gain, bias, y, rows, cols, eps);
}

void colsum_parallel(const double* x, double* y, std::size_t rows,
                     std::size_t cols) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (std::size_t j = 0; j < cols; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < rows; ++i) acc += x[i * cols + j];
    y[j] = acc;
  }
}

void colsum(const double* x, double* y, std::size_t rows, std::size_t cols) {
  if (go_parallel(rows * cols))
    colsum_parallel(x, y, rows, cols);
  else
    colsum_serial(x, y, rows, cols);
}

void transpose_parallel(const double* x, double* y, std::size_t rows,
                        std::size_t cols) {
#pragma omp parallel for num_threads(max_threads()) schedule(static)
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) y[j * rows + i] = x[i * cols + j];
}

void transpose(const double* x, double* y, std::size_t rows,
               std::size_t cols) {
  if (go_parallel(rows * cols))
    transpose_parallel(x, y, rows, cols);
  else
    transpose_serial(x, y, rows, cols);
}

}  // namespace transmpc::kernels
