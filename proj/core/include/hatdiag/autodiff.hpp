#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hatdiag/tensor.hpp"

namespace hatdiag {

/// One vertex of the eager computation graph. The value is computed when the
/// node is built; `backward` reads `grad` and accumulates into the inputs.
struct Node {
  std::string op;
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  bool is_leaf = false;

  /// Lazily allocates the accumulator with the value's shape.
  Tensor& grad_buffer();
};

/// Shared handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var leaf(Tensor value, bool requires_grad = true);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Accumulated gradient; zero tensor of the value's shape if none was written.
  const Tensor& grad() const { return node_->grad_buffer(); }
  Tensor& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a node from a precomputed value. `backward` is only stored when some input
/// requires a gradient.
Var make_node(std::string op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Returns the root's cached output. Values are computed eagerly at construction,
/// so this is a checked accessor.
const Tensor& forward_eval(const Var& root);

/// Reverse sweep from a scalar root. Leaf gradients accumulate; intermediate
/// accumulators are reset first so repeated calls stay consistent.
void backward_pass(const Var& root);

namespace ad {

Var matmul(const Var& a, const Var& b);  // (m,k)x(k,n) -> (m,n); (m,k)x(k) -> (m)
Var linear(const Var& x, const Var& w);  // (b,in)x(out,in)^T -> (b,out)
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_row(const Var& x, const Var& bias);  // broadcast bias over rows
Var scale(const Var& a, double k);
Var add_scalar(const Var& a, double k);
Var mul_by_scalar(const Var& a, const Var& s);  // s has one element
Var div_by_scalar(const Var& a, const Var& s);
Var relu(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var clip(const Var& a, double lo, double hi);
Var sum(const Var& a);
Var mean(const Var& a);
Var max_abs(const Var& a);
/// Mean softmax cross-entropy over rows of `logits`.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);

}  // namespace ad

/// Trainable tensor with a persistent leaf node. `frozen` (if non-empty) marks
/// coordinates with 1.0 that must never receive gradient or updates.
struct Parameter {
  std::string name;
  Var var;
  bool trainable = true;
  Tensor frozen;

  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true);

  const Tensor& value() const { return var.value(); }
  Tensor& value() { return var.mutable_value(); }
  const Tensor& grad() const { return var.grad(); }
  Tensor& grad() { return var.mutable_grad(); }
  bool is_frozen(std::size_t i) const { return !frozen.empty() && frozen[i] != 0.0; }
  void mask_frozen_gradient();
};

/// Central difference (l(w+h)-l(w-h))/(2h) per entry of `param`; `loss` must
/// rebuild its graph from the current parameter values.
Tensor finite_difference_gradient(const std::function<double()>& loss, Parameter& param, double h);

}  // namespace hatdiag
