#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dinf/numerics/parameter_store.hpp"
#include "dinf/numerics/tensor.hpp"

namespace dinf {

template <typename Scalar>
class Tape;

/// Handle to a tensor recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<Scalar>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  Index size() const { return value().size(); }

  Tape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of executed primitives. Nodes are appended in execution
/// order, so a reverse sweep is a valid topological order for backward.
///
/// Non-smooth primitives report which branch each element took via
/// note_branches(); the running hash lets a finite-difference checker tell
/// whether a perturbation crossed a kink.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, {}, nullptr); }

  Var<Scalar> variable(Tensor<Scalar> value) { return push(std::move(value), true, {}, nullptr); }

  /// Leaf bound to a store entry. Repeated lookups of one name return the
  /// same node, so shared uses accumulate into one gradient.
  Var<Scalar> parameter(const ParameterStore<Scalar>& store, const std::string& name) {
    if (auto it = params_.find(name); it != params_.end()) return Var<Scalar>(this, it->second);
    Var<Scalar> v = push(store.value(name), true, {}, nullptr);
    params_.emplace(name, v.id());
    return v;
  }

  /// Appends the output of a primitive. The node requires a gradient iff
  /// any parent does; otherwise the backward function is dropped.
  Var<Scalar> record(Tensor<Scalar> value, std::vector<std::size_t> parents, BackwardFn backward) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_.at(p).requires_grad;
    if (!needs) return push(std::move(value), false, {}, nullptr);
    return push(std::move(value), true, std::move(parents), std::move(backward));
  }

  const Tensor<Scalar>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Upstream gradient of a node during the backward sweep.
  const Tensor<Scalar>& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient buffer of a node, zero-allocated on first touch. Backward
  /// functions accumulate into this with `+=`.
  Tensor<Scalar>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<Scalar>(n.value.shape());
    return n.grad;
  }

  /// Gradient of the last backward() root with respect to `v`; zeros when
  /// nothing flowed into it.
  Tensor<Scalar> gradient(const Var<Scalar>& v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad.empty() ? Tensor<Scalar>(n.value.shape()) : n.grad;
  }

  void backward(const Var<Scalar>& root) {
    if (consumed_) throw std::logic_error("tape already replayed; record a new forward pass");
    if (root.size() != 1) throw ShapeError("backward root must be a scalar, got " + to_string(root.shape()));
    consumed_ = true;
    if (!nodes_.at(root.id()).requires_grad) return;
    grad_buffer(root.id())[0] = Scalar(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  /// Adds tape gradients of every bound parameter into the store, in name order.
  void accumulate_into(ParameterStore<Scalar>& store) const {
    for (const auto& [name, id] : params_) {
      const Node& n = nodes_[id];
      if (!n.grad.empty()) store.entry(name).grad.data() += n.grad.data();
    }
  }

  template <typename Codes>
  void note_branches(const Codes& codes) {
    for (auto c : codes) {
      signature_ ^= static_cast<std::uint64_t>(c) + 0x9e3779b97f4a7c15ULL;
      signature_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t branch_signature() const { return signature_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, std::vector<std::size_t> parents, BackwardFn fn) {
    if (consumed_) throw std::logic_error("tape already replayed; record a new forward pass");
    nodes_.push_back(Node{std::move(value), Tensor<Scalar>(), requires_grad, std::move(parents), std::move(fn)});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
  bool consumed_ = false;
};

using Taped = Tape<double>;
using Vard = Var<double>;

}  // namespace dinf
