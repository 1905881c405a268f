#include "amor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>

#include "amor/kernels.hpp"
#include "amor/rng.hpp"

namespace amor {

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw std::invalid_argument("operands live on different tapes");
  return t;
}

std::size_t require_matrix(const Var& v, const char* what) {
  if (v.value().rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(v.shape()));
  }
  return v.value().dim(0);
}

enum class BinKind { Add, Sub, Mul };

Var binary(Var a, Var b, BinKind kind) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool same = av.shape() == bv.shape();
  const bool a_scalar = !same && av.size() == 1;
  const bool b_scalar = !same && bv.size() == 1;
  if (!same && !a_scalar && !b_scalar) {
    throw DimensionError("elementwise shape mismatch: " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  const Shape& out_shape = a_scalar ? bv.shape() : av.shape();
  Tensor out(out_shape);
  const std::size_t n = out.size();
  auto A = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto B = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case BinKind::Add: out[i] = A(i) + B(i); break;
      case BinKind::Sub: out[i] = A(i) - B(i); break;
      case BinKind::Mul: out[i] = A(i) * B(i); break;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, kind, a_scalar, b_scalar, n](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    const Tensor& av = tp.value(ia);
    const Tensor& bv = tp.value(ib);
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_mut(ia);
      for (std::size_t i = 0; i < n; ++i) {
        double d = g[i];
        if (kind == BinKind::Mul) d *= b_scalar ? bv[0] : bv[i];
        ga[a_scalar ? 0 : i] += d;
      }
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_mut(ib);
      for (std::size_t i = 0; i < n; ++i) {
        double d = g[i];
        if (kind == BinKind::Sub) d = -d;
        if (kind == BinKind::Mul) d *= a_scalar ? av[0] : av[i];
        gb[b_scalar ? 0 : i] += d;
      }
    }
  });
}

// Unary op whose derivative is expressed through input x and output y.
template <class F, class D>
Var unary(Var x, F f, D dfdx) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix, dfdx](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    const Tensor& xv = tp.value(ix);
    const Tensor& yv = tp.value(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const std::size_t m = require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t k = a.value().dim(1);
  if (b.value().dim(0) != k) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t n = b.value().dim(1);
  Tensor out(Shape{m, n});
  kernels::gemm_nn(m, n, k, a.value().data().data(), k, b.value().data().data(), n, out.data().data(), n,
                   false);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, m, n, k](Tape& tp, std::size_t o) {
    const double* g = tp.grad(o).data();
    if (tp.requires_grad(ia)) {
      // grad_a = g * b^T
      kernels::gemm_nt(m, k, n, g, n, tp.value(ib).data().data(), n, tp.grad_mut(ia).data(), k, true);
    }
    if (tp.requires_grad(ib)) {
      // grad_b = a^T * g
      kernels::gemm_tn(k, n, m, tp.value(ia).data().data(), k, g, n, tp.grad_mut(ib).data(), n, true);
    }
  });
}

Var add(Var a, Var b) { return binary(a, b, BinKind::Add); }
Var sub(Var a, Var b) { return binary(a, b, BinKind::Sub); }
Var mul(Var a, Var b) { return binary(a, b, BinKind::Mul); }

Var sigmoid(Var x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var elementwise(std::string_view name, Var a, Var b) {
  if (name == "add") return add(a, b);
  if (name == "sub") return sub(a, b);
  if (name == "mul") return mul(a, b);
  if (name == "sigmoid") return sigmoid(a);
  if (name == "tanh") return tanh(a);
  if (name == "exp") return exp(a);
  if (name == "log") return log(a);
  if (name == "relu") return relu(a);
  throw std::invalid_argument("unknown elementwise op '" + std::string(name) + "'");
}

Var scale(Var x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Var add_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const std::size_t n = x.value().cols();
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  Tensor out = x.value();
  const std::size_t m = out.rows();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return t.record(std::move(out), {x, bias}, [ix, ib, m, n](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    if (tp.requires_grad(ix)) {
      auto& gx = tp.grad_mut(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_mut(ib);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
      }
    }
  });
}

Var softmax_lastdim(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (n == 0) throw DimensionError("softmax over an empty axis");
  const std::size_t m = xv.rows();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = xv.data().data() + r * n;
    double* y = out.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += (y[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < n; ++c) y[c] /= z;
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix, m, n](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    const Tensor& y = tp.value(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
    }
  });
}

Var log_softmax_lastdim(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (n == 0) throw DimensionError("log_softmax over an empty axis");
  const std::size_t m = xv.rows();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = xv.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(in[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = in[c] - lse;
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix, m, n](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    const Tensor& y = tp.value(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t r = 0; r < m; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < n; ++c) gs += g[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[r * n + c] - std::exp(y[r * n + c]) * gs;
    }
  });
}

Var entropy_lastdim(Var logits) {
  Tape& t = tape_of(logits);
  const Tensor& xv = logits.value();
  const std::size_t n = xv.cols();
  const std::size_t m = xv.rows();
  if (n == 0) throw DimensionError("entropy over an empty axis");
  Tensor out(Shape{m});
  // Saved log-probabilities; p = exp(logp). A probability that underflows to 0
  // contributes 0 to the entropy and to its gradient.
  auto logp = std::make_shared<std::vector<double>>(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = xv.data().data() + r * n;
    double* lp = logp->data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(in[c] - mx);
    const double lse = mx + std::log(z);
    double h = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      lp[c] = in[c] - lse;
      const double p = std::exp(lp[c]);
      if (p > 0.0) h -= p * lp[c];
    }
    out[r] = h;
  }
  const std::size_t ix = logits.id();
  return t.record(std::move(out), {logits}, [ix, m, n, logp](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    const Tensor& h = tp.value(o);
    auto& gx = tp.grad_mut(ix);
    // dH/dl_i = -p_i (log p_i + H)
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const double lp = (*logp)[r * n + c];
        const double p = std::exp(lp);
        if (p > 0.0) gx[r * n + c] += g[r] * (-p * (lp + h[r]));
      }
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  Tape& t = tape_of(logits);
  const Tensor& xv = logits.value();
  const std::size_t n = xv.cols();
  const std::size_t m = xv.rows();
  if (targets.size() != m || mask.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries for logits " + shape_str(xv.shape()));
  }
  const auto count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto b) { return b != 0; }));
  if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no positions");
  auto probs = std::make_shared<std::vector<double>>(m * n, 0.0);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  auto msk = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(targets[r]) + " outside vocab of " +
                                  std::to_string(n));
    }
    const double* in = xv.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(in[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) (*probs)[r * n + c] = std::exp(in[c] - lse);
    total += lse - in[targets[r]];
  }
  const double inv = 1.0 / static_cast<double>(count);
  const std::size_t ix = logits.id();
  return t.record(Tensor::scalar(total * inv), {logits}, [ix, m, n, inv, probs, tgt, msk](Tape& tp, std::size_t o) {
    const double g = tp.grad(o)[0] * inv;
    auto& gx = tp.grad_mut(ix);
    for (std::size_t r = 0; r < m; ++r) {
      if (!(*msk)[r]) continue;
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g * (*probs)[r * n + c];
      gx[r * n + static_cast<std::size_t>((*tgt)[r])] -= g;
    }
  });
}

TopK topk_lastdim(Var x, std::size_t k) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  const std::size_t m = xv.rows();
  if (k < 1 || k > n) {
    throw std::invalid_argument("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  Shape shape = xv.shape();
  if (shape.empty()) shape = {1};
  shape.back() = k;
  Tensor out(shape);
  std::vector<std::size_t> idx(m * k);
  std::vector<std::size_t> order(n);
  for (std::size_t r = 0; r < m; ++r) {
    const double* in = xv.data().data() + r * n;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [in](std::size_t a, std::size_t b) { return in[a] > in[b] || (in[a] == in[b] && a < b); });
    for (std::size_t j = 0; j < k; ++j) {
      idx[r * k + j] = order[j];
      out[r * k + j] = in[order[j]];
    }
  }
  auto saved = std::make_shared<std::vector<std::size_t>>(idx);
  const std::size_t ix = x.id();
  Var values = t.record(std::move(out), {x}, [ix, m, n, k, saved](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < k; ++j) gx[r * n + (*saved)[r * k + j]] += g[r * k + j];
    }
  });
  return TopK{values, std::move(idx)};
}

Var ste_threshold(Var p, double level) {
  Tape& t = tape_of(p);
  const Tensor& pv = p.value();
  Tensor out(pv.shape());
  for (std::size_t i = 0; i < pv.size(); ++i) out[i] = pv[i] > level ? 1.0 : 0.0;
  const std::size_t ip = p.id();
  return t.record(std::move(out), {p}, [ip](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    auto& gp = tp.grad_mut(ip);
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
  });
}

Var concat_lastdim(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const std::size_t na = av.cols(), nb = b.value().cols();
  const std::size_t m = av.rows();
  if (b.value().rows() != m || av.rank() != b.value().rank()) {
    throw DimensionError("concat_lastdim: leading shapes differ: " + shape_str(av.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Shape shape = av.shape();
  if (shape.empty()) shape = {1};
  shape.back() = na + nb;
  Tensor out(shape);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(av.data().data() + r * na, na, out.data().data() + r * (na + nb));
    std::copy_n(b.value().data().data() + r * nb, nb, out.data().data() + r * (na + nb) + na);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, m, na, nb](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    const std::size_t w = na + nb;
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_mut(ia);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < na; ++c) ga[r * na + c] += g[r * w + c];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_mut(ib);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < nb; ++c) gb[r * nb + c] += g[r * w + na + c];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  Tape& t = tape_of(parts.front());
  const std::size_t n = parts.front().value().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("operands live on different tapes");
    if (p.value().cols() != n) {
      throw DimensionError("concat_rows: " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
    }
    m += p.value().rows();
  }
  Tensor out(Shape{m, n});
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.size();
  }
  return t.record(std::move(out), parts, [ids, offsets](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!tp.requires_grad(ids[i])) continue;
      auto& gi = tp.grad_mut(ids[i]);
      for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += g[offsets[i] + j];
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  const std::size_t m = require_matrix(x, "slice_rows");
  if (begin > end || end > m) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
  }
  const std::size_t n = x.value().dim(1);
  Tensor out(Shape{end - begin, n});
  std::copy_n(x.value().data().data() + begin * n, (end - begin) * n, out.data().data());
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix, begin, n](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  const std::size_t m = require_matrix(x, "slice_cols");
  const std::size_t n = x.value().dim(1);
  if (begin > end || end > n) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out(Shape{m, w});
  for (std::size_t r = 0; r < m; ++r) std::copy_n(x.value().data().data() + r * n + begin, w, out.data().data() + r * w);
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix, m, n, begin, w](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) gx[r * n + begin + c] += g[r * w + c];
  });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  Tape& t = tape_of(x);
  const std::size_t m = require_matrix(x, "gather_rows");
  const std::size_t n = x.value().dim(1);
  Tensor out(Shape{rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " of " + shape_str(x.shape()));
    std::copy_n(x.value().data().data() + rows[i] * n, n, out.data().data() + i * n);
  }
  auto saved = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix, n, saved](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t i = 0; i < saved->size(); ++i)
      for (std::size_t c = 0; c < n; ++c) gx[(*saved)[i] * n + c] += g[i * n + c];
  });
}

Var transpose(Var x) {
  Tape& t = tape_of(x);
  const std::size_t m = require_matrix(x, "transpose");
  const std::size_t n = x.value().dim(1);
  Tensor out(Shape{n, m});
  kernels::transpose(m, n, x.value().data().data(), n, out.data().data(), m);
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix, m, n](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[c * m + r];
  });
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var embedding_lookup(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const std::size_t v = require_matrix(table, "embedding_lookup");
  const std::size_t d = table.value().dim(1);
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " +
                                  std::to_string(v));
    }
    std::copy_n(table.value().data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data().data() + i * d);
  }
  auto saved = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return t.record(std::move(out), {table}, [it, d, saved](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    auto& gt = tp.grad_mut(it);
    for (std::size_t i = 0; i < saved->size(); ++i) {
      const std::size_t row = static_cast<std::size_t>((*saved)[i]);
      for (std::size_t c = 0; c < d; ++c) gt[row * d + c] += g[i * d + c];
    }
  });
}

Var masked_scale(Var x, Var g) {
  Tape& t = tape_of(x, g);
  const std::size_t n = x.value().cols();
  const std::size_t m = x.value().rows();
  if (g.size() != m) {
    throw DimensionError("masked_scale: " + shape_str(g.shape()) + " gate for " + shape_str(x.shape()));
  }
  Tensor out(x.value().shape());
  for (std::size_t r = 0; r < m; ++r) {
    const double s = g.value()[r];
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = s * x.value()[r * n + c];
  }
  const std::size_t ix = x.id(), ig = g.id();
  return t.record(std::move(out), {x, g}, [ix, ig, m, n](Tape& tp, std::size_t o) {
    const auto gr = tp.grad(o);
    if (tp.requires_grad(ix)) {
      auto& gx = tp.grad_mut(ix);
      const Tensor& gv = tp.value(ig);
      for (std::size_t r = 0; r < m; ++r) {
        if (gv[r] == 0.0) continue;
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += gv[r] * gr[r * n + c];
      }
    }
    if (tp.requires_grad(ig)) {
      auto& gg = tp.grad_mut(ig);
      const Tensor& xv = tp.value(ix);
      for (std::size_t r = 0; r < m; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += gr[r * n + c] * xv[r * n + c];
        gg[r] += s;
      }
    }
  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  const auto d = x.value().data();
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  const std::size_t ix = x.id();
  return t.record(Tensor::scalar(s), {x}, [ix](Tape& tp, std::size_t o) {
    const double g = tp.grad(o)[0];
    for (double& v : tp.grad_mut(ix)) v += g;
  });
}

Var mean(Var x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Var detach(Var x) { return tape_of(x).constant(x.value()); }

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x, gain);
  const std::size_t n = x.value().cols();
  const std::size_t m = x.value().rows();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " for " + shape_str(x.shape()));
  }
  Tensor out(x.value().shape());
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto rstd = std::make_shared<std::vector<double>>(m);
  const auto xv = x.value().data();
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xv[r * n + c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xv[r * n + c] - mu) * (xv[r * n + c] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (xv[r * n + c] - mu) * rs;
      (*xhat)[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), igain = gain.id(), ibias = bias.id();
  return t.record(std::move(out), {x, gain, bias}, [ix, igain, ibias, m, n, xhat, rstd](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    const auto gv = tp.value(igain).data();
    if (tp.requires_grad(igain)) {
      auto& gg = tp.grad_mut(igain);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * (*xhat)[r * n + c];
    }
    if (tp.requires_grad(ibias)) {
      auto& gb = tp.grad_mut(ibias);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
    }
    if (tp.requires_grad(ix)) {
      auto& gx = tp.grad_mut(ix);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t r = 0; r < m; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          const double dh = g[r * n + c] * gv[c];
          s1 += dh;
          s2 += dh * (*xhat)[r * n + c];
        }
        for (std::size_t c = 0; c < n; ++c) {
          const double dh = g[r * n + c] * gv[c];
          gx[r * n + c] += (*rstd)[r] * (dh - inv_n * s1 - (*xhat)[r * n + c] * inv_n * s2);
        }
      }
    }
  });
}

Var dropout(Var x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  Tape& t = tape_of(x);
  const double keep_scale = 1.0 / (1.0 - rate);
  auto factor = std::make_shared<std::vector<double>>(x.size());
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = to_unit(mix64(seed ^ mix64(i)));
    (*factor)[i] = u < rate ? 0.0 : keep_scale;
    out[i] = x.value()[i] * (*factor)[i];
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix, factor](Tape& tp, std::size_t o) {
    const auto g = tp.grad(o);
    auto& gx = tp.grad_mut(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*factor)[i];
  });
}

}  // namespace amor
