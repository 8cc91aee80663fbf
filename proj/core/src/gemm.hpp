#pragma once

// Row-major GEMM kernels shared by matmul and conv2d. All variants accumulate
// into C. Reduction order is fixed at compile time, so results are bitwise
// reproducible for a given build.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace dar::detail {

inline constexpr std::size_t kColumnBlock = 256;

/// C[M×N] += A[M×K] · B[K×N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColumnBlock) {
    const std::size_t j1 = std::min(n, j0 + kColumnBlock);
    std::size_t i = 0;
    // Four output rows at a time share each load of B.
    for (; i + 4 <= m; i += 4) {
      T* __restrict c0 = c + (i + 0) * n;
      T* __restrict c1 = c + (i + 1) * n;
      T* __restrict c2 = c + (i + 2) * n;
      T* __restrict c3 = c + (i + 3) * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T a0 = a[(i + 0) * k + p];
        const T a1 = a[(i + 1) * k + p];
        const T a2 = a[(i + 2) * k + p];
        const T a3 = a[(i + 3) * k + p];
        const T* __restrict brow = b + p * n;
#pragma omp simd
        for (std::size_t j = j0; j < j1; ++j) {
          const T bv = brow[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      T* __restrict crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        const T* __restrict brow = b + p * n;
#pragma omp simd
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

/// C[M×N] += Aᵀ · B where A is stored [K×M] and B is [K×N].
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* __restrict brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      if (av == T(0)) continue;
      T* __restrict crow = c + i * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// Transposes a [rows×cols] matrix into out [cols×rows].
template <typename T>
void transpose_into(std::size_t rows, std::size_t cols, const T* in, T* out) {
  constexpr std::size_t tile = 16;
  for (std::size_t r0 = 0; r0 < rows; r0 += tile) {
    for (std::size_t c0 = 0; c0 < cols; c0 += tile) {
      const std::size_t r1 = std::min(rows, r0 + tile), c1 = std::min(cols, c0 + tile);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t col = c0; col < c1; ++col) out[col * rows + r] = in[r * cols + col];
      }
    }
  }
}

/// C[M×N] += A[M×K] · Bᵀ where B is stored [N×K].
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             std::vector<T>& scratch) {
  scratch.resize(k * n);
  transpose_into(n, k, b, scratch.data());
  gemm_nn(m, n, k, a, scratch.data(), c);
}

}  // namespace dar::detail
