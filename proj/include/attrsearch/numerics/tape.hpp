#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "attrsearch/numerics/tensor.hpp"

namespace attrsearch {

/// Named parameter tensors. Ordered so that iteration (and hence checkpoint
/// layout) is deterministic.
template <typename T>
using ParamSet = std::map<std::string, Tensor<T>>;

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

/// Reverse-mode gradient tape.
///
/// Every operation appends one node holding its forward value and a closure
/// that pushes the node's gradient into its inputs. Nodes that do not depend
/// on anything requiring a gradient keep no closure, so inference on a tape
/// costs only the forward values.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;
  using TrainablePredicate = std::function<bool(std::string_view)>;

  Tape() = default;

  explicit Tape(const ParamSet<T>& params, TrainablePredicate trainable = {})
      : params_(&params), trainable_(std::move(trainable)) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, ""); }

  /// Unnamed leaf that receives a gradient.
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, {}, ""); }

  /// Leaf bound to a registered parameter; repeated calls return the same node.
  Var<T> param(const std::string& name) {
    if (params_ == nullptr) throw UsageError("tape has no parameter registry");
    if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return {this, it->second};
    auto pit = params_->find(name);
    if (pit == params_->end()) throw UsageError("unknown parameter '" + name + "'");
    const bool trainable = !trainable_ || trainable_(name);
    Var<T> v = push(pit->second, trainable, {}, name);
    param_nodes_.emplace(name, v.id);
    return v;
  }

  bool has_param(const std::string& name) const {
    return params_ != nullptr && params_->count(name) != 0;
  }

  /// Appends an operation node. The closure is kept only if some input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<std::size_t> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<std::size_t>(inputs), std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<std::size_t>& inputs, BackwardFn fn) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, "");
  }

  const Tensor<T>& value(Var<T> v) const { return node(v).value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var<T> v) const { return node(v).requires_grad; }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }

  /// Gradient buffer of a node, allocated (zero) on first use.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Gradient of the last backward() target w.r.t. v (zeros if v was unreached).
  Tensor<T> grad_of(Var<T> v) const {
    const Node& n = node(v);
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  std::size_t node_count() const { return nodes_.size(); }

  void backward(Var<T> loss) {
    if (loss.tape != this || loss.id >= nodes_.size()) {
      throw UsageError("backward: loss node is not on this tape");
    }
    if (nodes_[loss.id].value.size() != 1) {
      throw UsageError("backward: loss must be a scalar, got " +
                       shape_str(nodes_[loss.id].value.shape()));
    }
    nodes_[loss.id].value.check_finite("backward: loss");
    for (Node& n : nodes_) n.grad = Tensor<T>();
    grad(loss.id)[0] = T{1};
    backward_order_.clear();
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.empty()) continue;
      backward_order_.push_back(id);
      n.backward(*this, id);
    }
  }

  /// Operation ids visited by the last backward(), in visiting order.
  const std::vector<std::size_t>& backward_order() const { return backward_order_; }

  /// Gradients for every trainable registered parameter; unused ones are zero.
  ParamSet<T> gradients() const {
    ParamSet<T> out;
    if (params_ == nullptr) return out;
    for (const auto& [name, value] : *params_) {
      if (trainable_ && !trainable_(name)) continue;
      auto it = param_nodes_.find(name);
      if (it == param_nodes_.end() || nodes_[it->second].grad.empty()) {
        out.emplace(name, Tensor<T>(value.shape()));
      } else {
        out.emplace(name, nodes_[it->second].grad);
      }
    }
    return out;
  }

  // Kink tracking: relu records the sign pattern of its inputs so a finite
  // difference oracle can detect perturbations that cross a kink.
  void track_kinks(bool on) { track_kinks_ = on; }
  bool tracking_kinks() const { return track_kinks_; }
  void note_kinks(std::span<const T> pre_activation) {
    if (!track_kinks_) return;
    for (T v : pre_activation) kink_mask_.push_back(v > T{0} ? 1 : 0);
  }
  const std::vector<std::uint8_t>& kink_mask() const { return kink_mask_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string param_name;
  };

  const Node& node(Var<T> v) const {
    if (v.tape != this) throw UsageError("variable belongs to another tape");
    return nodes_.at(v.id);
  }

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn, std::string name) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(fn),
                          std::move(name)});
    return {this, nodes_.size() - 1};
  }

  const ParamSet<T>* params_ = nullptr;
  TrainablePredicate trainable_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_nodes_;
  std::vector<std::size_t> backward_order_;
  bool track_kinks_ = false;
  std::vector<std::uint8_t> kink_mask_;
};

template <typename T>
ParamSet<T> zeros_like(const ParamSet<T>& params) {
  ParamSet<T> out;
  for (const auto& [name, value] : params) out.emplace(name, Tensor<T>(value.shape()));
  return out;
}

template <typename To, typename From>
ParamSet<To> cast_params(const ParamSet<From>& params) {
  ParamSet<To> out;
  for (const auto& [name, value] : params) out.emplace(name, value.template cast<To>());
  return out;
}

}  // namespace attrsearch
