#pragma once

#include "amor/fused.hpp"

// Serial reference versions of the fused sequence ops, composed only from the
// primitive ops in amor/ops.hpp (one tape node per step and head). Orders of
// magnitude slower; used by tests as an independent route to the same values
// and gradients.

namespace amor::reference {

Var gru_sequence(Var x, const GruWeights& w, std::size_t batch, std::size_t seq);

/// Same contract as amor::sparse_topk_attention without dropout.
Var sparse_topk_attention(Var q, Var k, Var v, const AttentionShape& shape, std::size_t top_k);

Var causal_attention(Var q, Var k, Var v, const AttentionShape& shape);

}  // namespace amor::reference
