#include "hatdiag/optimizer.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hatdiag {

void OptimizerState::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("optimizer: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("optimizer: momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("optimizer: weight decay must be non-negative");
}

void sgd_update(std::span<Parameter* const> params, OptimizerState& state) {
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const Parameter* p : params) state.velocity.emplace_back(p->value().shape(), 0.0);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& w = p.value();
    Tensor& g = p.grad();
    Tensor& v = state.velocity[k];
    if (!v.same_shape(w)) throw ShapeError("sgd_update velocity", v.shape(), w.shape());
    if (p.trainable) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (p.is_frozen(i)) continue;
        v[i] = state.momentum * v[i] + (g[i] + state.weight_decay * w[i]);
        w[i] -= state.learning_rate * v[i];
      }
    }
    g.fill(0.0);
  }
}

double cosine_learning_rate(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double frac = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace hatdiag
