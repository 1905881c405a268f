#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "amor/grad_check.hpp"
#include "amor/rng.hpp"
#include "amor/tensor.hpp"
#include "doctest.h"

namespace amor::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline void expect_gradients(const GradFn& f, const std::vector<Tensor>& inputs, double tol,
                             const std::vector<bool>& check = {}) {
  const GradCheckResult r = grad_check(f, inputs, 1e-5, check);
  INFO("worst input " << r.worst_input << " index " << r.worst_index << " analytic " << r.analytic << " numeric "
                      << r.numeric);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < tol);
}

}  // namespace amor::test
