#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "amor/tape.hpp"

namespace amor {

/// Scalar-valued function of tape leaves, rebuilt on a fresh tape per evaluation.
using GradFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of f against central differences.
/// Relative error per element is |a - n| / max(|a|, |n|, 1e-6); the floor sits
/// above central-difference round-off for O(1) function values. Inputs whose entry
/// in `check` is false are still fed to f but not perturbed.
GradCheckResult grad_check(const GradFn& f, const std::vector<Tensor>& inputs, double step = 1e-5,
                           const std::vector<bool>& check = {});

}  // namespace amor
