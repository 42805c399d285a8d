#pragma once

#include <cstddef>

// Dense row-major kernels used by the tensor layer. Every kernel exists in
// two variants: a plain serial reference and an OpenMP one. The parallel
// variants split work only across independent output elements, so both
// variants produce bit-identical results for any thread count. The unsuffixed
// entry points dispatch between them based on the configured thread budget
// and problem size.
namespace transmpc::kernels {

// Global thread budget for the dispatching entry points. 1 forces the serial
// path everywhere; values > 1 allow the OpenMP variants on large enough
// problems. Thread-safe to read concurrently.
void set_max_threads(int n);
int max_threads();

// c[m x n] = a[m x k] * b[k x n]
void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);
void matmul_parallel(const double* a, const double* b, double* c,
                     std::size_t m, std::size_t k, std::size_t n);
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);

// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_nt_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);

// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_tn_parallel(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);

// Row-wise softmax with max subtraction, y and x may alias.
void softmax_rows_serial(const double* x, double* y,
                         std::size_t rows, std::size_t cols);
void softmax_rows_parallel(const double* x, double* y,
                           std::size_t rows, std::size_t cols);
void softmax_rows(const double* x, double* y,
                  std::size_t rows, std::size_t cols);

// Row-wise layer normalization with learned gain/bias of width `cols`.
void layer_norm_rows_serial(const double* x, const double* gain,
                            const double* bias, double* y,
                            std::size_t rows, std::size_t cols, double eps);
void layer_norm_rows_parallel(const double* x, const double* gain,
                              const double* bias, double* y,
                              std::size_t rows, std::size_t cols, double eps);
void layer_norm_rows(const double* x, const double* gain, const double* bias,
                     double* y, std::size_t rows, std::size_t cols,
                     double eps);

// y[j] = sum_i x[i, j]
void colsum_serial(const double* x, double* y, std::size_t rows,
                   std::size_t cols);
void colsum_parallel(const double* x, double* y, std::size_t rows,
                     std::size_t cols);
void colsum(const double* x, double* y, std::size_t rows, std::size_t cols);

// y[j, i] = x[i, j]
void transpose_serial(const double* x, double* y, std::size_t rows,
                      std::size_t cols);
void transpose_parallel(const double* x, double* y, std::size_t rows,
                        std::size_t cols);
void transpose(const double* x, double* y, std::size_t rows,
               std::size_t cols);

}  // namespace transmpc::kernels
