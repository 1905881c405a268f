#include "amor/tape.hpp"

#include <algorithm>

namespace amor {

const Tensor& Var::value() const { return tape_->value(id_); }
std::span<const double> Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  const bool rg = std::any_of(inputs.begin(), inputs.end(),
                              [this](const Var& v) { return nodes_[v.id()].requires_grad; });
  nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

std::vector<double>& Tape::grad_mut(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad.clear();
}

void Tape::backward(Var root) {
  if (root.size() != 1) {
    throw DimensionError("backward() root must be a single value, got " + shape_str(root.shape()));
  }
  grad_mut(root.id())[0] += 1.0;
  propagate();
}

void Tape::backward(std::span<const std::pair<Var, std::vector<double>>> seeds) {
  for (const auto& [v, g] : seeds) {
    if (g.size() != v.size()) {
      throw DimensionError("seed gradient of length " + std::to_string(g.size()) + " for value " +
                           shape_str(v.shape()));
    }
    auto& dst = grad_mut(v.id());
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
  propagate();
}

void Tape::propagate() {
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

}  // namespace amor
