#pragma once

// Row-major dense kernels shared by the forward and backward rules.
// All of them accumulate into the output (C += ...).

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace sparse_rcnn::kernels {

namespace detail {

using v8 = double __attribute__((vector_size(64)));

inline constexpr std::size_t kTileRows = 6;
inline constexpr std::size_t kTileCols = 16;
inline constexpr std::size_t kDepthBlock = 256;

inline v8 load8(const double* p) {
    v8 v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void add_store8(double* p, v8 v) {
    v += load8(p);
    std::memcpy(p, &v, sizeof v);
}

// C[R x 16] += A[R x kb] * B[kb x 16], accumulated in registers. A(r, p)
// is read from a[r * ars + p * acs].
template <std::size_t R>
inline void tile(std::size_t kb, const double* __restrict a, std::size_t ars, std::size_t acs, const double* __restrict b,
                 std::size_t ldb, double* __restrict c, std::size_t ldc) {
    v8 acc[R][2] = {};
    for (std::size_t p = 0; p < kb; ++p) {
        const v8 b0 = load8(b + p * ldb), b1 = load8(b + p * ldb + 8);
        for (std::size_t r = 0; r < R; ++r) {
            const double x = a[r * ars + p * acs];
            acc[r][0] += x * b0;
            acc[r][1] += x * b1;
        }
    }
    for (std::size_t r = 0; r < R; ++r) {
        add_store8(c + r * ldc, acc[r][0]);
        add_store8(c + r * ldc + 8, acc[r][1]);
    }
}

inline void tile_rows(std::size_t rows, std::size_t kb, const double* a, std::size_t ars, std::size_t acs, const double* b,
                      std::size_t ldb, double* c, std::size_t ldc) {
    switch (rows) {
        case 1: tile<1>(kb, a, ars, acs, b, ldb, c, ldc); break;
        case 2: tile<2>(kb, a, ars, acs, b, ldb, c, ldc); break;
        case 3: tile<3>(kb, a, ars, acs, b, ldb, c, ldc); break;
        case 4: tile<4>(kb, a, ars, acs, b, ldb, c, ldc); break;
        case 5: tile<5>(kb, a, ars, acs, b, ldb, c, ldc); break;
        default: tile<6>(kb, a, ars, acs, b, ldb, c, ldc); break;
    }
}

// C[m x n] += A * B[k x n] where A(i, p) = a[i * ars + p * acs].
inline void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t ars, std::size_t acs,
                         const double* b, double* c) {
    const std::size_t full = n - n % kTileCols;
    for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
        const std::size_t kb = std::min(kDepthBlock, k - p0);
        for (std::size_t j = 0; j < full; j += kTileCols)
            for (std::size_t i = 0; i < m; i += kTileRows)
                tile_rows(std::min(kTileRows, m - i), kb, a + i * ars + p0 * acs, ars, acs, b + p0 * n + j, n, c + i * n + j, n);
        if (full == n) continue;
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            for (std::size_t p = p0; p < p0 + kb; ++p) {
                const double x = a[i * ars + p * acs];
                const double* bp = b + p * n;
                for (std::size_t j = full; j < n; ++j) ci[j] += x * bp[j];
            }
        }
    }
}

}  // namespace detail

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    detail::gemm_strided(m, n, k, a, k, 1, b, c);
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    detail::gemm_strided(m, n, k, a, 1, m, b, c);
}

// out[cols x rows] = in[rows x cols]^T
inline void transpose(std::size_t rows, std::size_t cols, const double* in, double* out) {
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = in[i * cols + j];
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    std::vector<double> bt(k * n);
    transpose(n, k, b, bt.data());
    gemm_nn(m, n, k, a, bt.data(), c);
}

}  // namespace sparse_rcnn::kernels
