#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "amor/tensor.hpp"

namespace amor {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  /// Gradient after backward(); empty span when nothing flowed into this value.
  std::span<const double> grad() const;
  bool requires_grad() const;

  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of executed operations. Nodes are appended in execution order,
/// so every node's inputs precede it; backward() replays the rules in reverse
/// and accumulates gradients additively.
///
/// Single-threaded: a tape may be moved between threads but never shared mutably.
class Tape {
 public:
  /// Backward rule. Receives the tape and the id of the node being differentiated;
  /// reads grad(out) and accumulates into grad_mut() of its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an op result. The node requires grad iff any input does; the
  /// backward rule is dropped otherwise.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
  void backward(Var root);
  /// Seeds several outputs with explicit upstream gradients (one value per element).
  void backward(std::span<const std::pair<Var, std::vector<double>>> seeds);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Read access to a gradient, empty if none accumulated.
  std::span<const double> grad(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient buffer, zero-allocated on first use.
  std::vector<double>& grad_mut(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }
  void zero_grad();

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void propagate();

  std::vector<Node> nodes_;
};

}  // namespace amor
