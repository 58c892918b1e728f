#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "bitlm/tensor.hpp"

namespace bitlm {

/// A learnable tensor plus its accumulated gradient. The gradient is a
/// mutable accumulator so that forward code can take models by const
/// reference on both the training and the inference path.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  mutable Tensor<T> grad;

  void zero_grad() const {
    if (grad.same_shape(value)) {
      grad.fill(T{0});
    } else {
      grad = Tensor<T>(value.shape());
    }
  }
};

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Value {
  Graph<T>* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Tape for reverse-mode differentiation. Nodes are appended in evaluation
/// order, which is a topological order; `backward` walks it in reverse.
///
/// In inference mode no backward closures are stored and parameters are
/// referenced rather than copied, so the same model code serves both paths.
template <typename T>
class Graph {
 public:
  enum class Mode { kRecord, kInference };

  /// Receives the gradient of the node's output; accumulates into inputs.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  explicit Graph(Mode mode = Mode::kRecord) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return mode_ == Mode::kRecord; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Value<T> constant(Tensor<T> t) { return push(std::move(t), nullptr, false); }

  /// Differentiable input that is not a parameter (gradient checks, probes).
  Value<T> leaf(Tensor<T> t) { return push(std::move(t), nullptr, recording()); }

  /// References `p.value` without copying. On a recording graph backward
  /// accumulates into `p.grad`.
  Value<T> param(const Parameter<T>& p) {
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = recording();
    return append(std::move(n));
  }

  const Tensor<T>& value(Value<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref != nullptr ? *n.ref : n.value;
  }

  bool requires_grad(Value<T> v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward pass; zeros when the node received none.
  Tensor<T> grad(Value<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(value(v).shape());
    return n.grad;
  }

  /// Appends an op result. `fn` is dropped unless some input needs a gradient.
  Value<T> record(Tensor<T> out, std::initializer_list<Value<T>> inputs,
                  BackwardFn fn) {
    bool needs = false;
    if (recording()) {
      for (const auto& in : inputs) needs = needs || requires_grad(in);
    }
    return push(std::move(out), needs ? std::move(fn) : nullptr, needs);
  }

  Value<T> record(Tensor<T> out, const std::vector<Value<T>>& inputs,
                  BackwardFn fn) {
    bool needs = false;
    if (recording()) {
      for (const auto& in : inputs) needs = needs || requires_grad(in);
    }
    return push(std::move(out), needs ? std::move(fn) : nullptr, needs);
  }

  /// Zero-initialized gradient accumulator of `v`, or nullptr when `v` does
  /// not take part in differentiation.
  Tensor<T>* grad_sink(Value<T> v) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
    return &n.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one element.
  /// A graph can be differentiated once.
  void backward(Value<T> loss);

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    BackwardFn backward;
    const Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Value<T> push(Tensor<T> t, BackwardFn fn, bool requires_grad) {
    Node n;
    n.value = std::move(t);
    n.backward = std::move(fn);
    n.requires_grad = requires_grad;
    return append(std::move(n));
  }

  Value<T> append(Node n) {
    nodes_.push_back(std::move(n));
    return Value<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Mode mode_;
  std::deque<Node> nodes_;  // stable references across appends
  bool backward_done_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace bitlm
