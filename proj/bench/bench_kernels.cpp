// OpenMP register-blocked GEMM versus the serial triple loop, at the shapes
// the training loop produces (rows = batch * seq, d = 64, 3d = 192).
#include <benchmark/benchmark.h>

#include <vector>

#include "amor/fused.hpp"
#include "amor/kernels.hpp"
#include "amor/ops.hpp"
#include "amor/rng.hpp"

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  amor::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform() - 0.5;
  return v;
}

using Gemm = void (*)(std::size_t, std::size_t, std::size_t, const double*, std::size_t, const double*, std::size_t,
                      double*, std::size_t, bool);

void run_gemm(benchmark::State& state, Gemm gemm, bool a_transposed, bool b_transposed) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto k = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec(m * k, 1);
  const auto b = random_vec(k * n, 2);
  std::vector<double> c(m * n);
  const std::size_t lda = a_transposed ? m : k;
  const std::size_t ldb = b_transposed ? k : n;
  for (auto _ : state) {
    gemm(m, n, k, a.data(), lda, b.data(), ldb, c.data(), n, false);
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.counters["GFLOPS"] =
      benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({4096, 192, 64})->Args({4096, 64, 64})->Args({4096, 11, 64})->Args({256, 256, 256})->Args({32, 192, 64});
}

void BM_nn_parallel(benchmark::State& s) { run_gemm(s, amor::kernels::gemm_nn, false, false); }
void BM_nn_serial(benchmark::State& s) { run_gemm(s, amor::kernels::serial::gemm_nn, false, false); }
void BM_nt_parallel(benchmark::State& s) { run_gemm(s, amor::kernels::gemm_nt, false, true); }
void BM_nt_serial(benchmark::State& s) { run_gemm(s, amor::kernels::serial::gemm_nt, false, true); }
void BM_tn_parallel(benchmark::State& s) { run_gemm(s, amor::kernels::gemm_tn, true, false); }
void BM_tn_serial(benchmark::State& s) { run_gemm(s, amor::kernels::serial::gemm_tn, true, false); }

BENCHMARK(BM_nn_parallel)->Apply(shapes);
BENCHMARK(BM_nn_serial)->Apply(shapes);
BENCHMARK(BM_nt_parallel)->Apply(shapes);
BENCHMARK(BM_nt_serial)->Apply(shapes);
BENCHMARK(BM_tn_parallel)->Apply(shapes);
BENCHMARK(BM_tn_serial)->Apply(shapes);

// Forward plus backward of one GRU layer over a training batch.
void BM_gru_layer(benchmark::State& state) {
  const std::size_t batch = 32, seq = static_cast<std::size_t>(state.range(0)), d = 64;
  amor::Tensor x({batch * seq, d}, random_vec(batch * seq * d, 3));
  amor::Tensor wi({d, 3 * d}, random_vec(3 * d * d, 4)), wh({d, 3 * d}, random_vec(3 * d * d, 5));
  for (auto _ : state) {
    amor::Tape tape;
    const amor::GruWeights w{tape.leaf(wi, true), tape.leaf(wh, true), tape.leaf(amor::Tensor({3 * d}), true),
                             tape.leaf(amor::Tensor({3 * d}), true)};
    const amor::Var h = amor::gru_sequence(tape.leaf(x, true), w, batch, seq);
    tape.backward(amor::sum(h));
    benchmark::DoNotOptimize(w.w_hh.grad().data());
  }
}
BENCHMARK(BM_gru_layer)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
