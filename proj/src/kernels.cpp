#include "amor/kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace amor::kernels {

namespace {

constexpr std::size_t kMr = 8;
constexpr std::size_t kNr = 16;
constexpr std::size_t kKc = 256;

// Output tiles smaller than this run on the calling thread; spawning a team costs
// more than the work.
constexpr std::size_t kParallelFlops = 1u << 15;

int omp_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// A is addressed as a[r * ars + p * acs], so the same tiles serve both A and A^T.
inline void tile_full(std::size_t k, const double* a, std::size_t ars, std::size_t acs, const double* b,
                      std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  double acc[kMr][kNr] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb;
    const double* acol = a + p * acs;
    for (std::size_t r = 0; r < kMr; ++r) {
      const double av = acol[r * ars];
#pragma omp simd
      for (std::size_t j = 0; j < kNr; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < kMr; ++r) {
    double* crow = c + r * ldc;
    if (accumulate) {
      for (std::size_t j = 0; j < kNr; ++j) crow[j] += acc[r][j];
    } else {
      for (std::size_t j = 0; j < kNr; ++j) crow[j] = acc[r][j];
    }
  }
}

inline void tile_edge(std::size_t mr, std::size_t nr, std::size_t k, const double* a, std::size_t ars,
                      std::size_t acs, const double* b, std::size_t ldb, double* c, std::size_t ldc,
                      bool accumulate) {
  double acc[kMr][kNr] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb;
    const double* acol = a + p * acs;
    for (std::size_t r = 0; r < mr; ++r) {
      const double av = acol[r * ars];
      for (std::size_t j = 0; j < nr; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < mr; ++r) {
    double* crow = c + r * ldc;
    for (std::size_t j = 0; j < nr; ++j) crow[j] = accumulate ? crow[j] + acc[r][j] : acc[r][j];
  }
}

void row_block(std::size_t i0, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t ars,
               std::size_t acs, const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  const std::size_t mr = std::min(kMr, m - i0);
  const double* ablk = a + i0 * ars;
  for (std::size_t j0 = 0; j0 < n; j0 += kNr) {
    const std::size_t nr = std::min(kNr, n - j0);
    double* cblk = c + i0 * ldc + j0;
    if (mr == kMr && nr == kNr) {
      tile_full(k, ablk, ars, acs, b + j0, ldb, cblk, ldc, accumulate);
    } else {
      tile_edge(mr, nr, k, ablk, ars, acs, b + j0, ldb, cblk, ldc, accumulate);
    }
  }
}

// The k axis is processed in chunks so the A and B panels of one chunk stay in
// cache across all output tiles.
void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t ars, std::size_t acs,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) {
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0);
    }
    return;
  }
  const auto blocks = static_cast<long long>((m + kMr - 1) / kMr);
  const bool parallel = m * n * k >= kParallelFlops && omp_threads() > 1;
  for (std::size_t p0 = 0; p0 < k; p0 += kKc) {
    const std::size_t kc = std::min(kKc, k - p0);
    const double* ap = a + p0 * acs;
    const double* bp = b + p0 * ldb;
    const bool acc = accumulate || p0 > 0;
    if (!parallel) {
      for (long long blk = 0; blk < blocks; ++blk) {
        row_block(static_cast<std::size_t>(blk) * kMr, m, n, kc, ap, ars, acs, bp, ldb, c, ldc, acc);
      }
      continue;
    }
#pragma omp parallel for schedule(static)
    for (long long blk = 0; blk < blocks; ++blk) {
      row_block(static_cast<std::size_t>(blk) * kMr, m, n, kc, ap, ars, acs, bp, ldb, c, ldc, acc);
    }
  }
}

}  // namespace

int max_threads() { return omp_threads(); }

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm_strided(m, n, k, a, lda, 1, b, ldb, c, ldc, accumulate);
}

void transpose(std::size_t rows, std::size_t cols, const double* src, std::size_t lds, double* dst,
               std::size_t ldd) {
  constexpr std::size_t kBlk = 16;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlk) {
    const std::size_t i1 = std::min(rows, i0 + kBlk);
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlk) {
      const std::size_t j1 = std::min(cols, j0 + kBlk);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * ldd + i] = src[i * lds + j];
      }
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  std::vector<double> bt(k * n);
  transpose(n, k, b, ldb, bt.data(), n);
  gemm_nn(m, n, k, a, lda, bt.data(), n, c, ldc, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm_strided(m, n, k, a, 1, lda, b, ldb, c, ldc, accumulate);
}

namespace serial {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * lda + p] * b[p * ldb + j];
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * lda + p] * b[j * ldb + p];
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * lda + i] * b[p * ldb + j];
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
    }
  }
}

}  // namespace serial

}  // namespace amor::kernels
