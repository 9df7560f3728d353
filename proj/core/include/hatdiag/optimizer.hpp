#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hatdiag/autodiff.hpp"

namespace hatdiag {

struct OptimizerState {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<Tensor> velocity;  // one per parameter, allocated on first update

  void validate() const;
};

/// Heavy-ball SGD: v <- mu*v + (g + wd*w); w <- w - lr*v. Frozen coordinates and
/// non-trainable parameters are left untouched. Gradients are zeroed afterwards.
void sgd_update(std::span<Parameter* const> params, OptimizerState& state);

/// Cosine annealing from `base` to zero over `total` steps.
double cosine_learning_rate(double base, std::size_t step, std::size_t total);

}  // namespace hatdiag
