#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "fcdm/tensor.hpp"

namespace fcdm {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
  using value_type = T;

  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Reverse-mode gradient tape. Nodes are appended in execution order, so the
/// node list is always topologically sorted. A tape is built per step and
/// thrown away; it is not thread-safe.
template <class T>
class Tape {
 public:
  using Inputs = std::vector<const Tensor<T>*>;
  using ForwardFn = std::function<Tensor<T>(const Inputs&)>;
  /// Accumulates into gin[i]; gin[i] is null when input i needs no gradient.
  using BackwardFn = std::function<void(const Inputs& in, const Tensor<T>& out, const Tensor<T>& gout,
                                        const std::vector<Tensor<T>*>& gin)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf owning its value. Trainable leaves receive gradients.
  Var<T> leaf(Tensor<T> value, bool trainable = true) {
    Node n;
    n.op = "leaf";
    n.value = std::move(value);
    n.trainable = trainable;
    n.requires_grad = trainable && grad_enabled_;
    return push(std::move(n));
  }

  /// Leaf that aliases an external tensor (parameters); the tensor must outlive the tape.
  Var<T> leaf_ref(const Tensor<T>& value, bool trainable = true) {
    Node n;
    n.op = "leaf";
    n.external = &value;
    n.trainable = trainable;
    n.requires_grad = trainable && grad_enabled_;
    return push(std::move(n));
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> record(std::string_view op, const std::vector<Var<T>>& inputs, ForwardFn fwd, BackwardFn bwd,
                std::uint64_t macs = 0) {
    Node n;
    n.op = std::string(op);
    n.inputs.reserve(inputs.size());
    for (const auto& v : inputs) {
      if (v.tape != this) throw Error(std::string(op) + ": input recorded on a different tape");
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    n.value = fwd(gather(n.inputs));
#ifndef NDEBUG
    bool finite_in = true;
    for (int i : n.inputs) finite_in = finite_in && value(i).all_finite();
    if (finite_in && !n.value.all_finite()) throw Error(std::string(op) + ": non-finite output from finite inputs");
#endif
    n.forward = std::move(fwd);
    if (n.requires_grad) n.backward = std::move(bwd);
    macs_ += macs;
    return push(std::move(n));
  }

  const Tensor<T>& value(int id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  const std::string& op_name(int id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Disabling gradients makes new leaves non-trainable (inference mode).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  /// Multiply-accumulate count of recorded conv/linear/matmul work.
  std::uint64_t macs() const { return macs_; }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw Error("backward: loss recorded on a different tape");
    const Tensor<T>& lv = value(loss.id);
    if (lv.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(lv.shape()));
    if (!nodes_[loss.id].requires_grad) throw Error("backward: loss is detached from every trainable leaf");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    nodes_[loss.id].grad = Tensor<T>(lv.shape(), T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      std::vector<Tensor<T>*> gin(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& in = nodes_[n.inputs[k]];
        if (!in.requires_grad) continue;
        if (in.grad.empty()) in.grad = Tensor<T>(value(n.inputs[k]).shape(), T(0));
        gin[k] = &in.grad;
      }
      n.backward(gather(n.inputs), value(i), n.grad, gin);
    }
  }

  /// Gradient of the last backward pass; zeros for nodes it never reached.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(value(v.id).shape(), T(0));
    return n.grad;
  }

  /// Recomputes every op node from its inputs in recorded order. Returns true
  /// when all outputs reproduce bit-exactly.
  bool replay() {
    bool same = true;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!n.forward) continue;
      Tensor<T> v = n.forward(gather(n.inputs));
      same = same && bit_identical(v, n.value);
      n.value = std::move(v);
    }
    return same;
  }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    std::vector<int> inputs;
    ForwardFn forward;
    BackwardFn backward;
    bool trainable = false;
    bool requires_grad = false;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
  }

  Inputs gather(const std::vector<int>& ids) const {
    Inputs in;
    in.reserve(ids.size());
    for (int id : ids) in.push_back(&value(id));
    return in;
  }

  std::deque<Node> nodes_;
  std::uint64_t macs_ = 0;
  bool grad_enabled_ = true;
};

}  // namespace fcdm
