#include "ovlw/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace ovlw::kern {

namespace {

// Per-output-row routines shared by the serial and OpenMP drivers. Keeping
// one definition per routine is what makes the two paths bit-identical.

inline void mm_nn_row(const double* a_row, const double* b, double* c_row, int64_t k, int64_t n) {
    std::memset(c_row, 0, sizeof(double) * n);
    for (int64_t p = 0; p < k; ++p) {
        const double av = a_row[p];
        const double* b_row = b + p * n;
        for (int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
}

// nt is computed as transpose(B) followed by the nn row kernel; the naive
// row-dot form defeats vectorization (reduction over the fast axis).
inline void transpose(const double* b, double* bt, int64_t rows, int64_t cols) {
    constexpr int64_t kTile = 32;
    for (int64_t i0 = 0; i0 < rows; i0 += kTile)
        for (int64_t j0 = 0; j0 < cols; j0 += kTile) {
            const int64_t i1 = std::min(i0 + kTile, rows);
            const int64_t j1 = std::min(j0 + kTile, cols);
            for (int64_t i = i0; i < i1; ++i)
                for (int64_t j = j0; j < j1; ++j) bt[j * rows + i] = b[i * cols + j];
        }
}

// Output row r of C[k x n] = A^T B: c[r][j] = sum_i a[i][r] * b[i][j].
inline void mm_tn_row(const double* a, const double* b, double* c_row, int64_t m, int64_t k, int64_t n, int64_t r) {
    std::memset(c_row, 0, sizeof(double) * n);
    for (int64_t i = 0; i < m; ++i) {
        const double av = a[i * k + r];
        const double* b_row = b + i * n;
        for (int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
}

inline void softmax_row(const double* x_row, const double* mask_row, double* y_row, int64_t n) {
    double mx = -HUGE_VAL;
    for (int64_t j = 0; j < n; ++j) {
        const double v = x_row[j] + (mask_row ? mask_row[j] : 0.0);
        y_row[j] = v;
        mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        y_row[j] = std::exp(y_row[j] - mx);
        sum += y_row[j];
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < n; ++j) y_row[j] *= inv;
}

inline void layernorm_row(const double* x_row, const double* gamma, const double* beta, double* y_row,
                          double* inv_std, double* mean, int64_t n, double eps) {
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += x_row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        const double d = x_row[j] - mu;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < n; ++j) y_row[j] = gamma[j] * ((x_row[j] - mu) * is) + beta[j];
    if (inv_std) *inv_std = is;
    if (mean) *mean = mu;
}

// Below this many output elements the OpenMP drivers stay serial; the fork
// overhead dwarfs the work.
constexpr int64_t kParallelCutoff = 16 * 1024;

}  // namespace

namespace serial {

void matmul_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) mm_nn_row(a + i * k, b, c + i * n, k, n);
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    std::vector<double> bt(static_cast<size_t>(k) * n);
    transpose(b, bt.data(), n, k);
    for (int64_t i = 0; i < m; ++i) mm_nn_row(a + i * k, bt.data(), c + i * n, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t r = 0; r < k; ++r) mm_tn_row(a, b, c + r * n, m, k, n, r);
}

void bmm_nn(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n) {
    for (int64_t t = 0; t < s; ++t) matmul_nn(a + t * m * k, b + t * k * n, c + t * m * n, m, k, n);
}

void bmm_nt(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n) {
    for (int64_t t = 0; t < s; ++t) matmul_nt(a + t * m * k, b + t * n * k, c + t * m * n, m, k, n);
}

void bmm_tn(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n) {
    for (int64_t t = 0; t < s; ++t) matmul_tn(a + t * m * k, b + t * m * n, c + t * k * n, m, k, n);
}

void softmax_rows(const double* x, const double* mask, int64_t mask_rows, double* y, int64_t rows, int64_t n) {
    for (int64_t r = 0; r < rows; ++r)
        softmax_row(x + r * n, mask ? mask + (r % mask_rows) * n : nullptr, y + r * n, n);
}

void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y, double* inv_std,
                    double* mean, int64_t rows, int64_t n, double eps) {
    for (int64_t r = 0; r < rows; ++r)
        layernorm_row(x + r * n, gamma, beta, y + r * n, inv_std ? inv_std + r : nullptr,
                      mean ? mean + r : nullptr, n, eps);
}

}  // namespace serial

void matmul_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    if (m * n * k < kParallelCutoff) {
        serial::matmul_nn(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) mm_nn_row(a + i * k, b, c + i * n, k, n);
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    if (m * n * k < kParallelCutoff) {
        serial::matmul_nt(a, b, c, m, k, n);
        return;
    }
    std::vector<double> bt(static_cast<size_t>(k) * n);
    transpose(b, bt.data(), n, k);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) mm_nn_row(a + i * k, bt.data(), c + i * n, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    if (m * n * k < kParallelCutoff) {
        serial::matmul_tn(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < k; ++r) mm_tn_row(a, b, c + r * n, m, k, n, r);
}

void bmm_nn(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n) {
    if (s * m * n * k < kParallelCutoff) {
        serial::bmm_nn(a, b, c, s, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < s; ++t) serial::matmul_nn(a + t * m * k, b + t * k * n, c + t * m * n, m, k, n);
}

void bmm_nt(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n) {
    if (s * m * n * k < kParallelCutoff) {
        serial::bmm_nt(a, b, c, s, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < s; ++t) serial::matmul_nt(a + t * m * k, b + t * n * k, c + t * m * n, m, k, n);
}

void bmm_tn(const double* a, const double* b, double* c, int64_t s, int64_t m, int64_t k, int64_t n) {
    if (s * m * n * k < kParallelCutoff) {
        serial::bmm_tn(a, b, c, s, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < s; ++t) serial::matmul_tn(a + t * m * k, b + t * m * n, c + t * k * n, m, k, n);
}

void softmax_rows(const double* x, const double* mask, int64_t mask_rows, double* y, int64_t rows, int64_t n) {
    if (rows * n < kParallelCutoff) {
        serial::softmax_rows(x, mask, mask_rows, y, rows, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r)
        softmax_row(x + r * n, mask ? mask + (r % mask_rows) * n : nullptr, y + r * n, n);
}

void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y, double* inv_std,
                    double* mean, int64_t rows, int64_t n, double eps) {
    if (rows * n < kParallelCutoff) {
        serial::layernorm_rows(x, gamma, beta, y, inv_std, mean, rows, n, eps);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r)
        layernorm_row(x + r * n, gamma, beta, y + r * n, inv_std ? inv_std + r : nullptr,
                      mean ? mean + r : nullptr, n, eps);
}

}  // namespace ovlw::kern
