#pragma once

#include <cstdint>

namespace ovlw::kern {

// Dense kernels behind the autodiff ops. Every kernel comes in two builds:
// kern::serial::* is the reference, kern::* is the OpenMP version. The two
// share per-row inner routines, so results are required to be bit-identical
// regardless of thread count (parallelism only ever splits independent
// output rows/slabs, never a single reduction). tests/test_kernels.cpp and
// tools/kernel_bench.cpp hold them to that.

namespace serial {

// C[m x n] = A[m x k] * B[k x n]
void matmul_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// C[m x n] = A[m x k] * B[n x k]^T
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// C[k x n] = A[m x k]^T * B[m x n]
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// Slab-batched variants: `s` independent [m x k]*[k x n] products.
void bmm_nn(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n);
void bmm_nt(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n);
void bmm_tn(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n);

// Row softmax over the last dim of [rows x n]. `mask` (nullable) is an
// additive [mask_rows x n] block broadcast as mask[row % mask_rows].
void softmax_rows(const double* x, const double* mask, int64_t mask_rows, double* y, int64_t rows, int64_t n);

// y = gamma .* (x - mu) / sqrt(var + eps) + beta, per row.
void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y, double* inv_std,
                    double* mean, int64_t rows, int64_t n, double eps);

}  // namespace serial

void matmul_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void bmm_nn(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n);
void bmm_nt(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n);
void bmm_tn(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n);
void softmax_rows(const double* x, const double* mask, int64_t mask_rows, double* y, int64_t rows, int64_t n);
void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y, double* inv_std,
                    double* mean, int64_t rows, int64_t n, double eps);

}  // namespace ovlw::kern
