#include "hatdiag/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace hatdiag {

Tensor& Node::grad_buffer() {
  if (!grad.same_shape(value)) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->op = "const";
  n->value = std::move(value);
  n->is_leaf = true;
  return Var(std::move(n));
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->op = "leaf";
  n->value = std::move(value);
  n->is_leaf = true;
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

void Var::zero_grad() { node_->grad_buffer().fill(0.0); }

Var make_node(std::string op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->op = std::move(op);
  n->value = std::move(value);
  for (auto& in : inputs) {
    n->requires_grad = n->requires_grad || in.requires_grad();
    n->inputs.push_back(in.ptr());
  }
  if (n->requires_grad) n->backward = std::move(backward);
  return Var(std::move(n));
}

const Tensor& forward_eval(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("forward_eval: undefined root");
  return root.value();
}

void backward_pass(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward_pass: undefined root");
  if (root.value().size() != 1) {
    throw std::invalid_argument("backward_pass: root must be scalar, got shape " +
                                shape_to_string(root.shape()));
  }
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!n->is_leaf) n->grad_buffer().fill(0.0);
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backward) n->backward(*n);
  }
}

namespace ad {
namespace {

Tensor& grad_of(Node& self, std::size_t i) { return self.inputs[i]->grad_buffer(); }
bool wants(Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

void require_same(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void require_scalar(const char* op, const Var& s) {
  if (s.value().size() != 1) throw ShapeError(op, s.shape(), Shape{1});
}

template <typename Fwd, typename Bwd>
Var unary(const char* op, const Var& a, Fwd f, Bwd df) {
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make_node(op, std::move(out), {a}, [df](Node& self) {
    const Tensor& x = self.inputs[0]->value;
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || (B.rank() != 1 && B.rank() != 2) || A.shape()[1] != B.shape()[0]) {
    throw ShapeError("matmul", A.shape(), B.shape());
  }
  const std::size_t m = A.shape()[0], k = A.shape()[1];
  const std::size_t n = B.rank() == 1 ? 1 : B.shape()[1];
  Tensor out(B.rank() == 1 ? Shape{m} : Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
    }
  return make_node("matmul", std::move(out), {a, b}, [m, k, n](Node& self) {
    const Tensor& A = self.inputs[0]->value;
    const Tensor& B = self.inputs[1]->value;
    const Tensor& G = self.grad;
    if (wants(self, 0)) {
      Tensor& gA = grad_of(self, 0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          gA[i * k + p] += acc;
        }
    }
    if (wants(self, 1)) {
      Tensor& gB = grad_of(self, 1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gB[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

Var linear(const Var& x, const Var& w) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  if (W.rank() != 2 || X.rank() > 2 || X.cols() != W.shape()[1]) {
    throw ShapeError("linear", X.shape(), W.shape());
  }
  const std::size_t b = X.rows(), in = W.shape()[1], out = W.shape()[0];
  Tensor Z(X.rank() == 1 ? Shape{out} : Shape{b, out});
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t j = 0; j < in; ++j) acc += X[r * in + j] * W[o * in + j];
      Z[r * out + o] = acc;
    }
  return make_node("linear", std::move(Z), {x, w}, [b, in, out](Node& self) {
    const Tensor& X = self.inputs[0]->value;
    const Tensor& W = self.inputs[1]->value;
    const Tensor& G = self.grad;
    if (wants(self, 0)) {
      Tensor& gX = grad_of(self, 0);
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t o = 0; o < out; ++o) {
          const double g = G[r * out + o];
          for (std::size_t j = 0; j < in; ++j) gX[r * in + j] += g * W[o * in + j];
        }
    }
    if (wants(self, 1)) {
      Tensor& gW = grad_of(self, 1);
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t o = 0; o < out; ++o) {
          const double g = G[r * out + o];
          for (std::size_t j = 0; j < in; ++j) gW[o * in + j] += g * X[r * in + j];
        }
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same("add", a, b);
  return make_node("add", a.value() + b.value(), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (!wants(self, i)) continue;
      Tensor& g = grad_of(self, i);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same("sub", a, b);
  return make_node("sub", a.value() - b.value(), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = grad_of(self, 0);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
    }
    if (wants(self, 1)) {
      Tensor& g = grad_of(self, 1);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] -= self.grad[k];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same("mul", a, b);
  return make_node("mul", hadamard(a.value(), b.value()), {a, b}, [](Node& self) {
    const Tensor& A = self.inputs[0]->value;
    const Tensor& B = self.inputs[1]->value;
    if (wants(self, 0)) {
      Tensor& g = grad_of(self, 0);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k] * B[k];
    }
    if (wants(self, 1)) {
      Tensor& g = grad_of(self, 1);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k] * A[k];
    }
  });
}

Var add_row(const Var& x, const Var& bias) {
  const Tensor& X = x.value();
  const Tensor& B = bias.value();
  if (B.rank() != 1 || X.cols() != B.size()) throw ShapeError("add_row", X.shape(), B.shape());
  const std::size_t rows = X.rows(), cols = X.cols();
  Tensor out(X);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += B[c];
  return make_node("add_row", std::move(out), {x, bias}, [rows, cols](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = grad_of(self, 0);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
    }
    if (wants(self, 1)) {
      Tensor& g = grad_of(self, 1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
    }
  });
}

Var scale(const Var& a, double k) {
  return unary("scale", a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

Var add_scalar(const Var& a, double k) {
  return unary("add_scalar", a, [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

Var mul_by_scalar(const Var& a, const Var& s) {
  require_scalar("mul_by_scalar", s);
  const double k = s.value()[0];
  return make_node("mul_by_scalar", scaled(a.value(), k), {a, s}, [](Node& self) {
    const Tensor& A = self.inputs[0]->value;
    const double k = self.inputs[1]->value[0];
    if (wants(self, 0)) {
      Tensor& g = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * k;
    }
    if (wants(self, 1)) grad_of(self, 1)[0] += dot(self.grad.data(), A.data());
  });
}

Var div_by_scalar(const Var& a, const Var& s) {
  require_scalar("div_by_scalar", s);
  const double k = s.value()[0];
  if (k == 0.0) throw std::domain_error("div_by_scalar: division by zero");
  Tensor out(a.value());
  for (auto& v : out.data()) v /= k;
  return make_node("div_by_scalar", std::move(out), {a, s}, [](Node& self) {
    const double k = self.inputs[1]->value[0];
    if (wants(self, 0)) {
      Tensor& g = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / k;
    }
    // d(a/k)/dk = -a/k^2 = -out/k
    if (wants(self, 1)) grad_of(self, 1)[0] -= dot(self.grad.data(), self.value.data()) / k;
  });
}

Var relu(const Var& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var abs(const Var& a) {
  return unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clip(const Var& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clip: lo > hi");
  return unary(
      "clip", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  return make_node("sum", Tensor::scalar(pairwise_sum(a.value().data())), {a}, [](Node& self) {
    Tensor& g = grad_of(self, 0);
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make_node("mean", Tensor::scalar(pairwise_sum(a.value().data()) / n), {a}, [n](Node& self) {
    Tensor& g = grad_of(self, 0);
    const double up = self.grad[0] / n;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

Var max_abs(const Var& a) {
  const Tensor& x = a.value();
  std::size_t arg = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (std::abs(x[i]) > std::abs(x[arg])) arg = i;
  return make_node("max_abs", Tensor::scalar(std::abs(x[arg])), {a}, [arg](Node& self) {
    const double v = self.inputs[0]->value[arg];
    const double s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    grad_of(self, 0)[arg] += self.grad[0] * s;
  });
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Tensor& Z = logits.value();
  const std::size_t rows = Z.rows(), classes = Z.cols();
  if (labels.size() != rows) throw ShapeError("softmax_cross_entropy", Z.shape(), Shape{labels.size()});
  Tensor probs(Shape{rows, classes});
  std::vector<double> per_row(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    }
    double zmax = Z[r * classes];
    for (std::size_t c = 1; c < classes; ++c) zmax = std::max(zmax, Z[r * classes + c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[r * classes + c] = std::exp(Z[r * classes + c] - zmax);
      denom += probs[r * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= denom;
    per_row[r] = std::log(denom) + zmax - Z[r * classes + static_cast<std::size_t>(y)];
  }
  const double loss = pairwise_sum(per_row) / static_cast<double>(rows);
  return make_node("softmax_ce", Tensor::scalar(loss), {logits},
                   [probs = std::move(probs), labels, rows, classes](Node& self) {
                     Tensor& g = grad_of(self, 0);
                     const double up = self.grad[0] / static_cast<double>(rows);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < classes; ++c) {
                         const double onehot = static_cast<std::size_t>(labels[r]) == c ? 1.0 : 0.0;
                         g[r * classes + c] += up * (probs[r * classes + c] - onehot);
                       }
                   });
}

}  // namespace ad

Parameter::Parameter(std::string name_, Tensor value, bool trainable_)
    : name(std::move(name_)), var(Var::leaf(std::move(value), trainable_)), trainable(trainable_) {}

void Parameter::mask_frozen_gradient() {
  if (frozen.empty()) return;
  Tensor& g = grad();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (frozen[i] != 0.0) g[i] = 0.0;
}

Tensor finite_difference_gradient(const std::function<double()>& loss, Parameter& param, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: step must be positive");
  Tensor& w = param.value();
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double saved = w[i];
    w[i] = saved + h;
    const double up = loss();
    w[i] = saved - h;
    const double down = loss();
    w[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("finite_difference_gradient: non-finite loss at entry " + std::to_string(i));
    }
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace hatdiag
