#pragma once

#include <cstddef>

// Dense row-major GEMM kernels. All matrices are addressed through a base pointer
// and a leading dimension (row stride, in elements).
//
// The top-level kernels are register-blocked and parallelised with OpenMP over
// output rows. Each output element is produced by exactly one thread with a fixed
// summation order, so results do not depend on the thread count.
//
// kernels::serial holds the plain triple-loop versions. They are the reference the
// tests compare against and the baseline in bench/.

namespace amor::kernels {

/// C[m x n] (+)= A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

/// C[m x n] (+)= A[m x k] * B^T, with B stored as [n x k]
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

/// C[m x n] (+)= A^T * B, with A stored as [k x m] and B as [k x n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

/// dst[cols x rows] = src[rows x cols]^T
void transpose(std::size_t rows, std::size_t cols, const double* src, std::size_t lds, double* dst,
               std::size_t ldd);

/// Number of OpenMP threads the kernels will use (1 when built without OpenMP).
int max_threads();

namespace serial {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);

}  // namespace serial

}  // namespace amor::kernels
