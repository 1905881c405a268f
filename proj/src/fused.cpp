#include "amor/fused.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "amor/kernels.hpp"
#include "amor/rng.hpp"

namespace amor {

namespace {

inline double sigm(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_rows(const Var& x, std::size_t batch, std::size_t seq, const char* what) {
  if (x.value().rank() != 2 || x.value().dim(0) != batch * seq) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(batch * seq) + " rows, got " +
                         shape_str(x.shape()));
  }
}

// Activations a GRU layer keeps for its backward pass, all time-major [t][b][d].
struct GruSaved {
  std::vector<double> hseq;  // (seq + 1) * batch * d, slot 0 is the zero state
  std::vector<double> r, z, n, ghn;
};

// Parallel loops whose trip count is below this stay on one thread.
constexpr std::size_t kParallelMin = 4096;

}  // namespace

Var gru_sequence(Var x, const GruWeights& w, std::size_t batch, std::size_t seq) {
  Tape& tape = *x.tape();
  check_rows(x, batch, seq, "gru_sequence");
  const std::size_t din = x.value().dim(1);
  const std::size_t d3 = w.w_ih.value().cols();
  if (d3 % 3 != 0 || w.w_ih.value().rows() != din || w.w_hh.value().rows() * 3 != d3 ||
      w.w_hh.value().cols() != d3 || w.b_ih.size() != d3 || w.b_hh.size() != d3) {
    throw DimensionError("gru_sequence: inconsistent weights w_ih " + shape_str(w.w_ih.shape()) + ", w_hh " +
                         shape_str(w.w_hh.shape()) + " for input " + shape_str(x.shape()));
  }
  const std::size_t d = d3 / 3;
  const std::size_t bt = batch * seq;

  // Input projections for every position at once (batch-major rows).
  std::vector<double> gi(bt * d3);
  kernels::gemm_nn(bt, d3, din, x.value().data().data(), din, w.w_ih.value().data().data(), d3, gi.data(), d3,
                   false);
  const double* bih = w.b_ih.value().data().data();
  const double* bhh = w.b_hh.value().data().data();
  const double* whh = w.w_hh.value().data().data();

  auto saved = std::make_shared<GruSaved>();
  saved->hseq.assign((seq + 1) * batch * d, 0.0);
  saved->r.resize(bt * d);
  saved->z.resize(bt * d);
  saved->n.resize(bt * d);
  saved->ghn.resize(bt * d);
  std::vector<double> gh(batch * d3);
  Tensor out(Shape{bt, d});

  for (std::size_t t = 0; t < seq; ++t) {
    const double* hprev = saved->hseq.data() + t * batch * d;
    double* hnext = saved->hseq.data() + (t + 1) * batch * d;
    kernels::gemm_nn(batch, d3, d, hprev, d, whh, d3, gh.data(), d3, false);
#pragma omp parallel for schedule(static) if (batch * d >= kParallelMin)
    for (long long bl = 0; bl < static_cast<long long>(batch); ++bl) {
      const std::size_t b = static_cast<std::size_t>(bl);
      const double* gib = gi.data() + (b * seq + t) * d3;
      const double* ghb = gh.data() + b * d3;
      const std::size_t s = (t * batch + b) * d;
      for (std::size_t j = 0; j < d; ++j) {
        const double r = sigm(gib[j] + bih[j] + ghb[j] + bhh[j]);
        const double z = sigm(gib[d + j] + bih[d + j] + ghb[d + j] + bhh[d + j]);
        const double ghn = ghb[2 * d + j] + bhh[2 * d + j];
        const double n = std::tanh(gib[2 * d + j] + bih[2 * d + j] + r * ghn);
        const double h = (1.0 - z) * n + z * hprev[b * d + j];
        saved->r[s + j] = r;
        saved->z[s + j] = z;
        saved->n[s + j] = n;
        saved->ghn[s + j] = ghn;
        hnext[b * d + j] = h;
        out[(b * seq + t) * d + j] = h;
      }
    }
  }

  const std::size_t ix = x.id(), iwih = w.w_ih.id(), iwhh = w.w_hh.id(), ibih = w.b_ih.id(), ibhh = w.b_hh.id();
  return tape.record(
      std::move(out), {x, w.w_ih, w.w_hh, w.b_ih, w.b_hh},
      [=](Tape& tp, std::size_t o) {
        const auto dH = tp.grad(o);
        std::vector<double> whh_t(d3 * d);  // W_hh^T, [3d x d]
        kernels::transpose(d, d3, tp.value(iwhh).data().data(), d3, whh_t.data(), d);

        std::vector<double> dgi(bt * d3);           // batch-major
        std::vector<double> dgh(seq * batch * d3);  // time-major
        std::vector<double> dh_next(batch * d, 0.0);
        std::vector<double> dh_carry(batch * d);

        for (std::size_t t = seq; t-- > 0;) {
          const double* hprev = saved->hseq.data() + t * batch * d;
          double* dght = dgh.data() + t * batch * d3;
#pragma omp parallel for schedule(static) if (batch * d >= kParallelMin)
          for (long long bl = 0; bl < static_cast<long long>(batch); ++bl) {
            const std::size_t b = static_cast<std::size_t>(bl);
            const std::size_t s = (t * batch + b) * d;
            const std::size_t row = b * seq + t;
            double* dgib = dgi.data() + row * d3;
            double* dghb = dght + b * d3;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dH[row * d + j] + dh_next[b * d + j];
              const double r = saved->r[s + j], z = saved->z[s + j], n = saved->n[s + j];
              const double dn = dh * (1.0 - z);
              const double dz = dh * (hprev[b * d + j] - n);
              const double dpn = dn * (1.0 - n * n);
              const double dr = dpn * saved->ghn[s + j];
              const double dpr = dr * r * (1.0 - r);
              const double dpz = dz * z * (1.0 - z);
              dgib[j] = dpr;
              dgib[d + j] = dpz;
              dgib[2 * d + j] = dpn;
              dghb[j] = dpr;
              dghb[d + j] = dpz;
              dghb[2 * d + j] = dpn * r;
              dh_carry[b * d + j] = dh * z;
            }
          }
          // dh_{t-1} = dh * z + dgh_t W_hh^T
          kernels::gemm_nn(batch, d, d3, dght, d3, whh_t.data(), d, dh_carry.data(), d, true);
          dh_next.swap(dh_carry);
        }

        if (tp.requires_grad(iwhh)) {
          kernels::gemm_tn(d, d3, seq * batch, saved->hseq.data(), d, dgh.data(), d3, tp.grad_mut(iwhh).data(), d3,
                           true);
        }
        if (tp.requires_grad(ibhh)) {
          auto& g = tp.grad_mut(ibhh);
          for (std::size_t i = 0; i < seq * batch; ++i)
            for (std::size_t c = 0; c < d3; ++c) g[c] += dgh[i * d3 + c];
        }
        if (tp.requires_grad(ibih)) {
          auto& g = tp.grad_mut(ibih);
          for (std::size_t i = 0; i < bt; ++i)
            for (std::size_t c = 0; c < d3; ++c) g[c] += dgi[i * d3 + c];
        }
        if (tp.requires_grad(iwih)) {
          kernels::gemm_tn(din, d3, bt, tp.value(ix).data().data(), din, dgi.data(), d3, tp.grad_mut(iwih).data(),
                           d3, true);
        }
        if (tp.requires_grad(ix)) {
          kernels::gemm_nt(bt, din, d3, dgi.data(), d3, tp.value(iwih).data().data(), d3, tp.grad_mut(ix).data(),
                           din, true);
        }
      });
}

namespace {

struct SparseSaved {
  std::size_t slots = 0;            // top_k
  std::vector<std::uint32_t> idx;   // [b][h][t][slot]
  std::vector<std::uint8_t> count;  // selected entries per (b, h, t)
  std::vector<double> w;            // softmax weights
  std::vector<double> keep;         // dropout factor per weight
};

void check_qkv(const Var& q, const Var& k, const Var& v, const AttentionShape& s, const char* what) {
  check_rows(q, s.batch, s.seq, what);
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError(std::string(what) + ": q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  }
  if (s.heads == 0 || q.value().dim(1) % s.heads != 0) {
    throw DimensionError(std::string(what) + ": width " + std::to_string(q.value().dim(1)) +
                         " not divisible by heads " + std::to_string(s.heads));
  }
}

}  // namespace

Var sparse_topk_attention(Var q, Var k, Var v, const SparseAttentionConfig& cfg) {
  Tape& tape = *q.tape();
  const AttentionShape& s = cfg.shape;
  check_qkv(q, k, v, s, "sparse_topk_attention");
  if (cfg.top_k < 1 || cfg.top_k > 255) throw std::invalid_argument("sparse_topk_attention: top_k must be in [1, 255]");
  const std::size_t d = q.value().dim(1);
  const std::size_t dh = d / s.heads;
  const std::size_t kk = cfg.top_k;
  const std::size_t T = s.seq;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto saved = std::make_shared<SparseSaved>();
  saved->slots = kk;
  const std::size_t units = s.batch * s.heads * T;
  saved->idx.assign(units * kk, 0);
  saved->count.assign(units, 0);
  saved->w.assign(units * kk, 0.0);
  saved->keep.assign(units * kk, 1.0);
  Tensor out(Shape{s.batch * T, d});

  const double* Q = q.value().data().data();
  const double* K = k.value().data().data();
  const double* V = v.value().data().data();
  const double keep_scale = cfg.dropout > 0.0 ? 1.0 / (1.0 - cfg.dropout) : 1.0;

#pragma omp parallel for schedule(static)
  for (long long bhl = 0; bhl < static_cast<long long>(s.batch * s.heads); ++bhl) {
    const std::size_t b = static_cast<std::size_t>(bhl) / s.heads;
    const std::size_t h = static_cast<std::size_t>(bhl) % s.heads;
    std::vector<double> scores(T);
    std::vector<std::uint32_t> order(T);
    for (std::size_t t = 1; t < T; ++t) {
      const double* qt = Q + (b * T + t) * d + h * dh;
      for (std::size_t j = 0; j < t; ++j) {
        const double* kj = K + (b * T + j) * d + h * dh;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += qt[c] * kj[c];
        scores[j] = acc * inv_sqrt;
      }
      const std::size_t m = std::min(kk, t);
      std::iota(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(t), 0u);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m),
                        order.begin() + static_cast<std::ptrdiff_t>(t), [&](std::uint32_t a, std::uint32_t c) {
                          return scores[a] > scores[c] || (scores[a] == scores[c] && a < c);
                        });
      const std::size_t unit = (b * s.heads + h) * T + t;
      saved->count[unit] = static_cast<std::uint8_t>(m);
      const double mx = scores[order[0]];
      double z = 0.0;
      double* w = saved->w.data() + unit * kk;
      for (std::size_t i = 0; i < m; ++i) z += (w[i] = std::exp(scores[order[i]] - mx));
      double* o = out.data().data() + (b * T + t) * d + h * dh;
      for (std::size_t i = 0; i < m; ++i) {
        w[i] /= z;
        saved->idx[unit * kk + i] = order[i];
        double f = 1.0;
        if (cfg.dropout > 0.0) {
          const double u = to_unit(mix64(cfg.dropout_seed ^ mix64(unit * kk + i)));
          f = u < cfg.dropout ? 0.0 : keep_scale;
        }
        saved->keep[unit * kk + i] = f;
        const double wi = w[i] * f;
        const double* vj = V + (b * T + order[i]) * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) o[c] += wi * vj[c];
      }
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return tape.record(std::move(out), {q, k, v}, [=](Tape& tp, std::size_t o) {
    const double* G = tp.grad(o).data();
    const double* Q = tp.value(iq).data().data();
    const double* K = tp.value(ik).data().data();
    const double* V = tp.value(iv).data().data();
    std::vector<double> dq(s.batch * T * d, 0.0), dk(s.batch * T * d, 0.0), dv(s.batch * T * d, 0.0);
#pragma omp parallel for schedule(static)
    for (long long bhl = 0; bhl < static_cast<long long>(s.batch * s.heads); ++bhl) {
      const std::size_t b = static_cast<std::size_t>(bhl) / s.heads;
      const std::size_t h = static_cast<std::size_t>(bhl) % s.heads;
      double dw[256];
      for (std::size_t t = 1; t < T; ++t) {
        const std::size_t unit = (b * s.heads + h) * T + t;
        const std::size_t m = saved->count[unit];
        const double* w = saved->w.data() + unit * kk;
        const double* f = saved->keep.data() + unit * kk;
        const std::uint32_t* sel = saved->idx.data() + unit * kk;
        const double* g = G + (b * T + t) * d + h * dh;
        double dot = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t row = (b * T + sel[i]) * d + h * dh;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            acc += g[c] * V[row + c];
            dv[row + c] += w[i] * f[i] * g[c];
          }
          dw[i] = acc * f[i];
          dot += w[i] * dw[i];
        }
        const std::size_t qrow = (b * T + t) * d + h * dh;
        for (std::size_t i = 0; i < m; ++i) {
          const double ds = w[i] * (dw[i] - dot) * inv_sqrt;
          const std::size_t row = (b * T + sel[i]) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) {
            dq[qrow + c] += ds * K[row + c];
            dk[row + c] += ds * Q[qrow + c];
          }
        }
      }
    }
    auto acc = [&](std::size_t id, const std::vector<double>& src) {
      if (!tp.requires_grad(id)) return;
      auto& g = tp.grad_mut(id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
    };
    acc(iq, dq);
    acc(ik, dk);
    acc(iv, dv);
  });
}

Var causal_attention(Var q, Var k, Var v, const AttentionShape& s) {
  Tape& tape = *q.tape();
  check_qkv(q, k, v, s, "causal_attention");
  const std::size_t d = q.value().dim(1);
  const std::size_t dh = d / s.heads;
  const std::size_t T = s.seq;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // Attention weights per (b, h): lower-triangular T x T, stored densely.
  auto weights = std::make_shared<std::vector<double>>(s.batch * s.heads * T * T, 0.0);
  Tensor out(Shape{s.batch * T, d});
  const double* Q = q.value().data().data();
  const double* K = k.value().data().data();
  const double* V = v.value().data().data();

#pragma omp parallel for schedule(static)
  for (long long bhl = 0; bhl < static_cast<long long>(s.batch * s.heads); ++bhl) {
    const std::size_t b = static_cast<std::size_t>(bhl) / s.heads;
    const std::size_t h = static_cast<std::size_t>(bhl) % s.heads;
    double* W = weights->data() + static_cast<std::size_t>(bhl) * T * T;
    for (std::size_t t = 0; t < T; ++t) {
      const double* qt = Q + (b * T + t) * d + h * dh;
      double* wt = W + t * T;
      double mx = -1e300;
      for (std::size_t j = 0; j <= t; ++j) {
        const double* kj = K + (b * T + j) * d + h * dh;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += qt[c] * kj[c];
        wt[j] = acc * inv_sqrt;
        mx = std::max(mx, wt[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= t; ++j) z += (wt[j] = std::exp(wt[j] - mx));
      double* o = out.data().data() + (b * T + t) * d + h * dh;
      for (std::size_t j = 0; j <= t; ++j) {
        wt[j] /= z;
        const double* vj = V + (b * T + j) * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) o[c] += wt[j] * vj[c];
      }
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return tape.record(std::move(out), {q, k, v}, [=](Tape& tp, std::size_t o) {
    const double* G = tp.grad(o).data();
    const double* Q = tp.value(iq).data().data();
    const double* K = tp.value(ik).data().data();
    const double* V = tp.value(iv).data().data();
    std::vector<double> dq(s.batch * T * d, 0.0), dk(s.batch * T * d, 0.0), dv(s.batch * T * d, 0.0);
#pragma omp parallel for schedule(static)
    for (long long bhl = 0; bhl < static_cast<long long>(s.batch * s.heads); ++bhl) {
      const std::size_t b = static_cast<std::size_t>(bhl) / s.heads;
      const std::size_t h = static_cast<std::size_t>(bhl) % s.heads;
      const double* W = weights->data() + static_cast<std::size_t>(bhl) * T * T;
      std::vector<double> dw(T);
      for (std::size_t t = 0; t < T; ++t) {
        const double* wt = W + t * T;
        const double* g = G + (b * T + t) * d + h * dh;
        double dot = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          const std::size_t row = (b * T + j) * d + h * dh;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            acc += g[c] * V[row + c];
            dv[row + c] += wt[j] * g[c];
          }
          dw[j] = acc;
          dot += wt[j] * acc;
        }
        const std::size_t qrow = (b * T + t) * d + h * dh;
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = wt[j] * (dw[j] - dot) * inv_sqrt;
          const std::size_t row = (b * T + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) {
            dq[qrow + c] += ds * K[row + c];
            dk[row + c] += ds * Q[qrow + c];
          }
        }
      }
    }
    auto acc = [&](std::size_t id, const std::vector<double>& src) {
      if (!tp.requires_grad(id)) return;
      auto& g = tp.grad_mut(id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
    };
    acc(iq, dq);
    acc(ik, dk);
    acc(iv, dv);
  });
}

}  // namespace amor
