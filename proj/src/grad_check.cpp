#include "amor/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace amor {

namespace {

double evaluate(const GradFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, false));
  return f(tape, vars).value().item();
}

}  // namespace

GradCheckResult grad_check(const GradFn& f, const std::vector<Tensor>& inputs, double step,
                           const std::vector<bool>& check) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  tape.backward(f(tape, vars));

  GradCheckResult res;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!check.empty() && !check[i]) continue;
    const auto analytic = vars[i].grad();
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x0 = inputs[i][j];
      probe[i][j] = x0 + step;
      const double up = evaluate(f, probe);
      probe[i][j] = x0 - step;
      const double down = evaluate(f, probe);
      probe[i][j] = x0;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.empty() ? 0.0 : analytic[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      const double rel = std::abs(a - numeric) / denom;
      ++res.checked;
      if (res.checked == 1 || rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_input = i;
        res.worst_index = j;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace amor
