#include "amor/reference.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "amor/ops.hpp"

namespace amor::reference {

Var gru_sequence(Var x, const GruWeights& w, std::size_t batch, std::size_t seq) {
  Tape& tape = *x.tape();
  const std::size_t d = w.w_hh.value().dim(0);
  const Var ones = tape.constant(Tensor(Shape{1, d}, 1.0));
  std::vector<Var> rows;
  rows.reserve(batch * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    Var h = tape.constant(Tensor(Shape{1, d}));
    for (std::size_t t = 0; t < seq; ++t) {
      const Var xt = slice_rows(x, b * seq + t, b * seq + t + 1);
      const Var gi = add_bias(matmul(xt, w.w_ih), w.b_ih);
      const Var gh = add_bias(matmul(h, w.w_hh), w.b_hh);
      const Var r = sigmoid(add(slice_cols(gi, 0, d), slice_cols(gh, 0, d)));
      const Var z = sigmoid(add(slice_cols(gi, d, 2 * d), slice_cols(gh, d, 2 * d)));
      const Var n = tanh(add(slice_cols(gi, 2 * d, 3 * d), mul(r, slice_cols(gh, 2 * d, 3 * d))));
      h = add(mul(sub(ones, z), n), mul(z, h));
      rows.push_back(h);
    }
  }
  return concat_rows(rows);
}

namespace {

// Rows of one sequence restricted to one head's feature slice.
Var head_block(Var x, std::size_t b, std::size_t seq, std::size_t h, std::size_t dh) {
  return slice_cols(slice_rows(x, b * seq, (b + 1) * seq), h * dh, (h + 1) * dh);
}

template <class RowFn>
Var assemble(Var q, const AttentionShape& s, RowFn per_head) {
  const std::size_t dh = q.value().dim(1) / s.heads;
  std::vector<Var> blocks;
  for (std::size_t b = 0; b < s.batch; ++b) {
    Var joined;
    for (std::size_t h = 0; h < s.heads; ++h) {
      const Var head = per_head(b, h, dh);
      joined = h == 0 ? head : concat_lastdim(joined, head);
    }
    blocks.push_back(joined);
  }
  return concat_rows(blocks);
}

}  // namespace

Var sparse_topk_attention(Var q, Var k, Var v, const AttentionShape& s, std::size_t top_k) {
  Tape& tape = *q.tape();
  return assemble(q, s, [&](std::size_t b, std::size_t h, std::size_t dh) {
    const Var qh = head_block(q, b, s.seq, h, dh);
    const Var kh = head_block(k, b, s.seq, h, dh);
    const Var vh = head_block(v, b, s.seq, h, dh);
    const Var scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Var> rows{tape.constant(Tensor(Shape{1, dh}))};
    for (std::size_t t = 1; t < s.seq; ++t) {
      const Var past = slice_cols(slice_rows(scores, t, t + 1), 0, t);
      TopK top = topk_lastdim(past, std::min(top_k, t));
      const Var w = softmax_lastdim(top.values);
      rows.push_back(matmul(w, gather_rows(vh, top.indices)));
    }
    return concat_rows(rows);
  });
}

Var causal_attention(Var q, Var k, Var v, const AttentionShape& s) {
  return assemble(q, s, [&](std::size_t b, std::size_t h, std::size_t dh) {
    const Var qh = head_block(q, b, s.seq, h, dh);
    const Var kh = head_block(k, b, s.seq, h, dh);
    const Var vh = head_block(v, b, s.seq, h, dh);
    const Var scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Var> rows;
    for (std::size_t t = 0; t < s.seq; ++t) {
      const Var w = softmax_lastdim(slice_cols(slice_rows(scores, t, t + 1), 0, t + 1));
      rows.push_back(matmul(w, slice_rows(vh, 0, t + 1)));
    }
    return concat_rows(rows);
  });
}

}  // namespace amor::reference
