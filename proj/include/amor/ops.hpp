#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "amor/tape.hpp"

// Differentiable operations over Tape values. Matrices are rank-2 row-major;
// "lastdim" operations treat any tensor as rows x cols with cols = last axis.
// Binary elementwise ops accept equal shapes, or one operand holding a single
// value (scalar broadcast). No other broadcasting is supported.

namespace amor {

Var matmul(Var a, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var sigmoid(Var x);
Var tanh(Var x);
Var exp(Var x);
/// Throws DomainError on any non-positive input.
Var log(Var x);
Var relu(Var x);

/// Dispatch by name: add, sub, mul (binary) or sigmoid, tanh, exp, log, relu (unary).
Var elementwise(std::string_view name, Var a, Var b = {});

Var scale(Var x, double s);
/// x[m x n] + bias[n], bias broadcast over rows.
Var add_bias(Var x, Var bias);

Var softmax_lastdim(Var x);
Var log_softmax_lastdim(Var x);
/// Shannon entropy in nats of softmax(row) for each row; shape [rows]. 0 log 0 := 0.
Var entropy_lastdim(Var logits);

/// Mean of -log softmax(logits)[t, target[t]] over positions with mask[t] != 0.
/// Throws std::invalid_argument if the mask selects nothing or a target is out of range.
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

struct TopK {
  Var values;                         // [rows x k], descending per row
  std::vector<std::size_t> indices;   // rows * k column indices
};
/// k largest entries of each row; ties go to the lower index. Gradient flows to
/// the selected entries only. Requires 1 <= k <= cols.
TopK topk_lastdim(Var x, std::size_t k);

/// Hard threshold forward (1 where p > level, else 0); identity backward.
Var ste_threshold(Var p, double level);

Var concat_lastdim(Var a, Var b);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
/// Rows of x in the given order (repeats allowed).
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var transpose(Var x);
Var reshape(Var x, Shape shape);

/// table[V x d] -> [ids.size() x d]
Var embedding_lookup(Var table, std::span<const int> ids);
/// Row r of x[m x n] multiplied by g[r]; gradient flows to both x and g.
Var masked_scale(Var x, Var g);

Var sum(Var x);
Var mean(Var x);
/// A value-identical copy that blocks gradient flow.
Var detach(Var x);

/// Per-row layer normalisation with learned gain and bias over the last axis.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

/// Inverted dropout. The keep mask is a pure function of (seed, element index).
Var dropout(Var x, double rate, std::uint64_t seed);

}  // namespace amor
