#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "hatdiag/autodiff.hpp"
#include "hatdiag/tensor.hpp"

namespace hatdiag {

struct CrossbarConfig {
  double g_min = 1e-6;  // siemens
  double g_max = 1e-4;
  double w_min = -1.0;
  double w_max = 1.0;
  std::size_t array_size = 128;  // logical columns per physical array
  int adc_bits = 8;

  double g_range() const noexcept { return g_max - g_min; }
  void validate() const;
};

/// Differential conductance encoding of one weight matrix.
struct ProgrammedPair {
  Tensor g_p;
  Tensor g_n;
  double scale = 0.0;  // max |clip(W)|; zero for an all-zero matrix
};

ProgrammedPair program_weights(const Tensor& w, const CrossbarConfig& cfg);
Tensor reconstruct_effective(const ProgrammedPair& pair, const CrossbarConfig& cfg);

/// Half-open column ranges of width <= array_size covering [0, columns).
std::vector<std::pair<std::size_t, std::size_t>> column_blocks(std::size_t columns, std::size_t array_size);

/// Graph form of the mapping. Gradients reach W through the clamp, the
/// normalisation and the scale.
struct ProgrammedVars {
  Var g_p;
  Var g_n;
  Var scale;
  bool degenerate = false;  // all-zero clamped weights
};

ProgrammedVars program_weights(const Var& w, const CrossbarConfig& cfg);
Var reconstruct_effective(const Var& g_p, const Var& g_n, const Var& scale, const CrossbarConfig& cfg);

}  // namespace hatdiag
