#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cas/error.hpp"
#include "cas/tensor.hpp"

namespace cas {

template <std::floating_point T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <std::floating_point T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Shape& shape() const { return tape->shape(*this); }
  std::span<const T> value() const { return tape->value(*this); }
  std::size_t size() const { return numel(shape()); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  T item() const {
    require(size() == 1, ErrorCode::shape, "item() on non-scalar value " + cas::to_string(shape()));
    return value()[0];
  }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so every node's
/// inputs precede it and a single reverse sweep visits each node once.
///
/// Leaves either borrow an external Tensor (which must outlive the tape) or own
/// a copy. Borrowed leaves with requires_grad receive their gradient additively
/// in Tensor::grad when backward() runs.
template <std::floating_point T>
class Tape {
 public:
  /// Backward closure: receives the tape and the gradient of the node's output,
  /// and accumulates into its inputs via Tape::grad_of().
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf borrowing `t`; gradient flows into t.grad when t.requires_grad.
  Var<T> leaf(Tensor<T>& t) {
    Node node;
    node.shape = t.shape;
    node.source = &t;
    node.needs_grad = t.requires_grad;
    if (t.requires_grad) node.sink = &t;
    return push(std::move(node));
  }

  /// Read-only borrowed leaf; never receives gradient.
  Var<T> borrow(const Tensor<T>& t) {
    Node node;
    node.shape = t.shape;
    node.source = &t;
    return push(std::move(node));
  }

  /// Leaf owning a copy of `t`; never receives gradient.
  Var<T> constant(Tensor<T> t) {
    Node node;
    node.shape = std::move(t.shape);
    node.value = std::move(t.data);
    return push(std::move(node));
  }

  /// Appends an op result. `backward` may be empty for non-differentiable outputs.
  Var<T> record(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    Node node;
    node.shape = std::move(shape);
    node.value = std::move(value);
    require(node.value.size() == numel(node.shape), ErrorCode::shape, "recorded value does not match its shape");
    for (const Var<T>& in : inputs) {
      check_owned(in);
      node.needs_grad = node.needs_grad || nodes_[in.id].needs_grad;
    }
    if (node.needs_grad) node.backward = std::move(backward);
    return push(std::move(node));
  }

  const Shape& shape(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].shape;
  }

  std::span<const T> value(Var<T> v) const {
    check_owned(v);
    return value_of(v.id);
  }

  bool needs_grad(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].needs_grad;
  }

  Tensor<T> tensor(Var<T> v) const {
    auto values = value(v);
    return Tensor<T>(shape(v), std::vector<T>(values.begin(), values.end()));
  }

  /// Gradient accumulator of `v` for use inside backward closures.
  std::span<T> grad_of(Var<T> v) {
    Node& node = nodes_[v.id];
    if (node.grad.empty()) node.grad.assign(numel(node.shape), T{0});
    return node.grad;
  }

  /// Gradient of the last backward() sweep w.r.t. any node (zeros if it received none).
  std::vector<T> gradient(Var<T> v) const {
    check_owned(v);
    const Node& node = nodes_[v.id];
    if (node.grad.empty()) return std::vector<T>(numel(node.shape), T{0});
    return node.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and sweeps in reverse. Internal node gradients are
  /// reset per call; leaf Tensor::grad buffers accumulate across calls.
  void backward(Var<T> loss) {
    require(loss.tape == this && loss.id < nodes_.size(), ErrorCode::invalid_argument,
            "backward: loss is not recorded on this tape");
    require(numel(nodes_[loss.id].shape) == 1, ErrorCode::shape,
            "backward: loss must be a scalar, got shape " + cas::to_string(nodes_[loss.id].shape));
    for (Node& node : nodes_) node.grad.clear();
    grad_of(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.needs_grad || node.grad.empty()) continue;
      if (node.backward) {
        // Closures only touch their inputs' buffers, which precede node i.
        node.backward(*this, std::span<const T>(node.grad));
      } else if (node.sink != nullptr) {
        auto& dst = node.sink->grad_buffer();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += node.grad[j];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    const Tensor<T>* source = nullptr;
    Tensor<T>* sink = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
    std::vector<T> grad;
  };

  Var<T> push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::span<const T> value_of(std::size_t id) const {
    const Node& node = nodes_[id];
    if (node.source != nullptr) return node.source->data;
    return node.value;
  }

  void check_owned(Var<T> v) const {
    require(v.tape == this && v.id < nodes_.size(), ErrorCode::invalid_argument,
            "value is not recorded on this tape");
  }

  std::vector<Node> nodes_;
};

}  // namespace cas
