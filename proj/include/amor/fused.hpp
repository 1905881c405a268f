#pragma once

#include <cstddef>
#include <cstdint>

#include "amor/tape.hpp"

// Sequence-level tape operations with hand-written backward passes. These carry
// the training workload; amor/reference.hpp rebuilds each of them from the
// primitive ops in amor/ops.hpp, and the tests hold the two to the same values
// and gradients.
//
// Layout convention: a batch of sequences is a matrix with one row per
// (sequence, position), row index b * seq + t.

namespace amor {

/// One GRU layer. Gate blocks along the 3d axis are ordered (reset, update, candidate):
///
///   r_t = sigmoid(x_t W_ir + b_ir + h_{t-1} W_hr + b_hr)
///   z_t = sigmoid(x_t W_iz + b_iz + h_{t-1} W_hz + b_hz)
///   n_t = tanh(x_t W_in + b_in + r_t * (h_{t-1} W_hn + b_hn))
///   h_t = (1 - z_t) * n_t + z_t * h_{t-1},        h_{-1} = 0
struct GruWeights {
  Var w_ih;  // [d_in x 3d]
  Var w_hh;  // [d x 3d]
  Var b_ih;  // [3d]
  Var b_hh;  // [3d]
};

/// x[batch*seq x d_in] -> hidden states [batch*seq x d].
Var gru_sequence(Var x, const GruWeights& w, std::size_t batch, std::size_t seq);

struct AttentionShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
};

/// Multi-head sparse attention over strictly earlier positions. For each head and
/// position t the scores q_t . k_j / sqrt(d_head), j < t, are reduced to the
/// min(top_k, t) largest (ties to the lower j), softmax-normalised over that set,
/// and used to average v_j. Position 0 has no history and yields zeros.
/// Heads are concatenated along the feature axis. Optional dropout acts on the
/// normalised weights, with the mask a pure function of `dropout_seed`.
struct SparseAttentionConfig {
  AttentionShape shape;
  std::size_t top_k = 3;
  double dropout = 0.0;
  std::uint64_t dropout_seed = 0;
};
Var sparse_topk_attention(Var q, Var k, Var v, const SparseAttentionConfig& cfg);

/// Standard causal multi-head softmax attention (positions j <= t).
Var causal_attention(Var q, Var k, Var v, const AttentionShape& shape);

}  // namespace amor
