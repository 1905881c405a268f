#include <vector>

#include "amor/kernels.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace amor;
using amor::test::max_abs_diff;
using amor::test::random_tensor;

namespace {

struct Dims {
  std::size_t m, n, k;
};

// Sizes straddle the 8x16 register tile and the 256-wide k block.
const std::vector<Dims> kSizes{{1, 1, 1},   {3, 5, 7},    {8, 16, 4},    {9, 17, 3},  {16, 32, 64},
                               {33, 65, 1}, {64, 64, 257}, {100, 11, 64}, {7, 200, 300}, {128, 192, 513}};

std::vector<double> rand_vec(std::size_t n, std::uint64_t seed) {
  const Tensor t = random_tensor({n}, seed);
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("parallel gemm matches the serial reference") {
    for (const Dims& d : kSizes) {
      CAPTURE(d.m);
      CAPTURE(d.n);
      CAPTURE(d.k);
      // Padded leading dimensions exercise the stride handling.
      const std::size_t lda = d.k + 3, ldb = d.n + 1, ldc = d.n + 2;
      const auto a = rand_vec(d.m * lda, 1);
      const auto b = rand_vec(d.k * ldb, 2);
      const auto c0 = rand_vec(d.m * ldc, 3);
      for (bool acc : {false, true}) {
        auto fast = c0, ref = c0;
        kernels::gemm_nn(d.m, d.n, d.k, a.data(), lda, b.data(), ldb, fast.data(), ldc, acc);
        kernels::serial::gemm_nn(d.m, d.n, d.k, a.data(), lda, b.data(), ldb, ref.data(), ldc, acc);
        CHECK(max_abs_diff(fast, ref) < 1e-10);
      }

      const std::size_t ldbt = d.k + 2;  // B stored [n x k]
      const auto bt = rand_vec(d.n * ldbt, 4);
      auto fast = c0, ref = c0;
      kernels::gemm_nt(d.m, d.n, d.k, a.data(), lda, bt.data(), ldbt, fast.data(), ldc, true);
      kernels::serial::gemm_nt(d.m, d.n, d.k, a.data(), lda, bt.data(), ldbt, ref.data(), ldc, true);
      CHECK(max_abs_diff(fast, ref) < 1e-10);

      const std::size_t ldat = d.m + 1;  // A stored [k x m]
      const auto at = rand_vec(d.k * ldat, 5);
      fast = c0;
      ref = c0;
      kernels::gemm_tn(d.m, d.n, d.k, at.data(), ldat, b.data(), ldb, fast.data(), ldc, false);
      kernels::serial::gemm_tn(d.m, d.n, d.k, at.data(), ldat, b.data(), ldb, ref.data(), ldc, false);
      CHECK(max_abs_diff(fast, ref) < 1e-10);
    }
  }

  TEST_CASE("serial gemm against a hand product") {
    const std::vector<double> a{1, 2, 3, 4, 5, 6};       // 2x3
    const std::vector<double> b{7, 8, 9, 10, 11, 12};    // 3x2
    std::vector<double> c(4, 1.0);
    kernels::serial::gemm_nn(2, 2, 3, a.data(), 3, b.data(), 2, c.data(), 2, false);
    CHECK(c == std::vector<double>{58, 64, 139, 154});
    kernels::gemm_nn(2, 2, 3, a.data(), 3, b.data(), 2, c.data(), 2, true);
    CHECK(c == std::vector<double>{116, 128, 278, 308});
  }

  TEST_CASE("padding in C outside the n columns is untouched") {
    const std::size_t m = 9, n = 17, k = 5, ldc = 20;
    const auto a = rand_vec(m * k, 6);
    const auto b = rand_vec(k * n, 7);
    std::vector<double> c(m * ldc, -3.0);
    kernels::gemm_nn(m, n, k, a.data(), k, b.data(), n, c.data(), ldc, false);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = n; j < ldc; ++j) CHECK(c[i * ldc + j] == -3.0);
  }

  TEST_CASE("results do not depend on the thread count") {
    const std::size_t m = 96, n = 80, k = 300;
    const auto a = rand_vec(m * k, 8);
    const auto b = rand_vec(k * n, 9);
    std::vector<double> first(m * n), again(m * n);
    kernels::gemm_nn(m, n, k, a.data(), k, b.data(), n, first.data(), n, false);
    kernels::gemm_nn(m, n, k, a.data(), k, b.data(), n, again.data(), n, false);
    CHECK(first == again);
  }

  TEST_CASE("transpose") {
    const std::vector<double> src{1, 2, 3, 4, 5, 6};
    std::vector<double> dst(6);
    kernels::transpose(2, 3, src.data(), 3, dst.data(), 2);
    CHECK(dst == std::vector<double>{1, 4, 2, 5, 3, 6});
  }
}
