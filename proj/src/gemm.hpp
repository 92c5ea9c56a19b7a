#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace ctun::detail {

// Native-width SIMD lane group via GCC/Clang vector extensions.
template <class T>
struct Lanes {
  static constexpr int kBytes = 64;
  static constexpr int kCount = kBytes / static_cast<int>(sizeof(T));
  typedef T Vec __attribute__((vector_size(kBytes)));
  static Vec load(const T* p) {
    Vec v;
    std::memcpy(&v, p, sizeof(Vec));
    return v;
  }
  static void store(T* p, Vec v) { std::memcpy(p, &v, sizeof(Vec)); }
};

// Register tile of C: MR rows by NV vectors, accumulated over the full K
// extent before being added to C.
template <class T, int MR, int NV>
inline void gemm_tile(int k_len, const T* a, std::ptrdiff_t lda, const T* b, std::ptrdiff_t ldb,
                      T* c, std::ptrdiff_t ldc) {
  using Vec = typename Lanes<T>::Vec;
  constexpr int L = Lanes<T>::kCount;
  Vec acc[MR][NV];
  for (int r = 0; r < MR; ++r)
    for (int v = 0; v < NV; ++v) acc[r][v] = Vec{} ;
  for (int k = 0; k < k_len; ++k) {
    const T* brow = b + k * ldb;
    Vec bv[NV];
    for (int v = 0; v < NV; ++v) bv[v] = Lanes<T>::load(brow + v * L);
    for (int r = 0; r < MR; ++r) {
      const T av = a[r * lda + k];
      for (int v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int v = 0; v < NV; ++v) {
      T* cp = c + r * ldc + v * L;
      Lanes<T>::store(cp, Lanes<T>::load(cp) + acc[r][v]);
    }
}

// The 0-3 rows left below the last full MR = 4 block.
template <class T, int NV>
inline void tail_rows(int rows, int k_len, const T* a, std::ptrdiff_t lda, const T* b,
                      std::ptrdiff_t ldb, T* c, std::ptrdiff_t ldc) {
  switch (rows) {
    case 3: gemm_tile<T, 3, NV>(k_len, a, lda, b, ldb, c, ldc); break;
    case 2: gemm_tile<T, 2, NV>(k_len, a, lda, b, ldb, c, ldc); break;
    case 1: gemm_tile<T, 1, NV>(k_len, a, lda, b, ldb, c, ldc); break;
    default: break;
  }
}

template <class T>
inline void gemm_edge(int rows, int cols, int k_len, const T* a, std::ptrdiff_t lda, const T* b,
                      std::ptrdiff_t ldb, T* c, std::ptrdiff_t ldc) {
  for (int r = 0; r < rows; ++r) {
    for (int k = 0; k < k_len; ++k) {
      const T av = a[r * lda + k];
      const T* brow = b + k * ldb;
      T* crow = c + r * ldc;
      for (int j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[M,N] += A[M,K] * B[K,N], all row-major with explicit leading dims.
/// Summation order is fixed, so results are bit-reproducible.
template <class T>
void gemm_nn(int m, int n, int k, const T* a, std::ptrdiff_t lda, const T* b, std::ptrdiff_t ldb,
             T* c, std::ptrdiff_t ldc) {
  constexpr int MR = 4;
  constexpr int NV = 4;
  constexpr int L = Lanes<T>::kCount;
  constexpr int NR = NV * L;
  constexpr int KC = 256;
  // B panels are packed contiguously so the tile loop streams them from L1
  // regardless of ldb.
  thread_local std::vector<T> packed;
  packed.resize(static_cast<std::size_t>(KC) * NR);
  for (int k0 = 0; k0 < k; k0 += KC) {
    const int kl = std::min(KC, k - k0);
    const T* ak = a + k0;
    const T* bk = b + static_cast<std::ptrdiff_t>(k0) * ldb;
    int j = 0;
    for (; j + NR <= n; j += NR) {
      // Packing only pays off when the panel is reused by several row tiles.
      const T* panel = bk + j;
      std::ptrdiff_t ld = ldb;
      if (m > 4 * MR) {
        for (int kk = 0; kk < kl; ++kk)
          std::memcpy(packed.data() + kk * NR, bk + kk * ldb + j, sizeof(T) * NR);
        panel = packed.data();
        ld = NR;
      }
      int i = 0;
      for (; i + MR <= m; i += MR)
        gemm_tile<T, MR, NV>(kl, ak + i * lda, lda, panel, ld, c + i * ldc + j, ldc);
      tail_rows<T, NV>(m - i, kl, ak + i * lda, lda, panel, ld, c + i * ldc + j, ldc);
    }
    for (; j + L <= n; j += L) {
      for (int kk = 0; kk < kl; ++kk)
        std::memcpy(packed.data() + kk * L, bk + kk * ldb + j, sizeof(T) * L);
      int i = 0;
      for (; i + MR <= m; i += MR)
        gemm_tile<T, MR, 1>(kl, ak + i * lda, lda, packed.data(), L, c + i * ldc + j, ldc);
      tail_rows<T, 1>(m - i, kl, ak + i * lda, lda, packed.data(), L, c + i * ldc + j, ldc);
    }
    if (j < n) gemm_edge<T>(m, n - j, kl, ak, lda, bk + j, ldb, c + j, ldc);
  }
}

template <class T, int MR, int NR>
inline void gemm_nt_tile(int k_len, const T* a, std::ptrdiff_t lda, const T* b, std::ptrdiff_t ldb,
                         T* c, std::ptrdiff_t ldc) {
  using Vec = typename Lanes<T>::Vec;
  constexpr int L = Lanes<T>::kCount;
  Vec acc[MR][NR];
  for (int r = 0; r < MR; ++r)
    for (int q = 0; q < NR; ++q) acc[r][q] = Vec{};
  int k = 0;
  for (; k + L <= k_len; k += L) {
    Vec bv[NR];
    for (int q = 0; q < NR; ++q) bv[q] = Lanes<T>::load(b + q * ldb + k);
    for (int r = 0; r < MR; ++r) {
      const Vec av = Lanes<T>::load(a + r * lda + k);
      for (int q = 0; q < NR; ++q) acc[r][q] += av * bv[q];
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int q = 0; q < NR; ++q) {
      T s = 0;
      for (int l = 0; l < L; ++l) s += acc[r][q][l];
      for (int kk = k; kk < k_len; ++kk) s += a[r * lda + kk] * b[q * ldb + kk];
      c[r * ldc + q] += s;
    }
}

/// C[M,N] += A[M,K] * B[N,K]^T: dot products along contiguous K rows.
template <class T>
void gemm_nt(int m, int n, int k, const T* a, std::ptrdiff_t lda, const T* b, std::ptrdiff_t ldb,
             T* c, std::ptrdiff_t ldc) {
  constexpr int MR = 4;
  constexpr int NR = 4;
  int i = 0;
  for (; i + MR <= m; i += MR) {
    int j = 0;
    for (; j + NR <= n; j += NR)
      gemm_nt_tile<T, MR, NR>(k, a + i * lda, lda, b + j * ldb, ldb, c + i * ldc + j, ldc);
    for (; j < n; ++j)
      gemm_nt_tile<T, MR, 1>(k, a + i * lda, lda, b + j * ldb, ldb, c + i * ldc + j, ldc);
  }
  for (; i < m; ++i) {
    int j = 0;
    for (; j + NR <= n; j += NR)
      gemm_nt_tile<T, 1, NR>(k, a + i * lda, lda, b + j * ldb, ldb, c + i * ldc + j, ldc);
    for (; j < n; ++j)
      gemm_nt_tile<T, 1, 1>(k, a + i * lda, lda, b + j * ldb, ldb, c + i * ldc + j, ldc);
  }
}

// out[cols, rows] = in[rows, cols]^T
template <class T>
void transpose(int rows, int cols, const T* in, T* out) {
  constexpr int B = 32;
  for (int r0 = 0; r0 < rows; r0 += B)
    for (int c0 = 0; c0 < cols; c0 += B) {
      const int r1 = std::min(rows, r0 + B);
      const int c1 = std::min(cols, c0 + B);
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c)
          out[static_cast<std::ptrdiff_t>(c) * rows + r] = in[static_cast<std::ptrdiff_t>(r) * cols + c];
    }
}

}  // namespace ctun::detail
