#include "hatdiag/crossbar.hpp"

#include <algorithm>
#include <stdexcept>

namespace hatdiag {

void CrossbarConfig::validate() const {
  if (!(g_min > 0.0 && g_min < g_max)) throw std::invalid_argument("crossbar: require 0 < g_min < g_max");
  if (!(w_min < w_max)) throw std::invalid_argument("crossbar: require w_min < w_max");
  if (array_size < 1) throw std::invalid_argument("crossbar: array_size must be >= 1");
  if (adc_bits < 1) throw std::invalid_argument("crossbar: adc_bits must be >= 1");
}

ProgrammedPair program_weights(const Tensor& w, const CrossbarConfig& cfg) {
  if (w.empty()) throw std::invalid_argument("program_weights: empty weight matrix");
  Tensor clamped(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) clamped[i] = std::clamp(w[i], cfg.w_min, cfg.w_max);
  ProgrammedPair pair{Tensor(w.shape(), cfg.g_min), Tensor(w.shape(), cfg.g_min), max_abs(clamped)};
  if (pair.scale == 0.0) return pair;
  const double range = cfg.g_range();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double wp = std::max(clamped[i], 0.0) / pair.scale;
    const double wn = std::max(-clamped[i], 0.0) / pair.scale;
    pair.g_p[i] = cfg.g_min + wp * range;
    pair.g_n[i] = cfg.g_min + wn * range;
  }
  return pair;
}

Tensor reconstruct_effective(const ProgrammedPair& pair, const CrossbarConfig& cfg) {
  if (!pair.g_p.same_shape(pair.g_n)) throw ShapeError("reconstruct_effective", pair.g_p.shape(), pair.g_n.shape());
  Tensor out(pair.g_p.shape(), 0.0);
  if (pair.scale == 0.0) return out;
  const double k = pair.scale / cfg.g_range();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (pair.g_p[i] - pair.g_n[i]) * k;
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> column_blocks(std::size_t columns, std::size_t array_size) {
  if (array_size < 1) throw std::invalid_argument("column_blocks: array_size must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  for (std::size_t start = 0; start < columns; start += array_size) {
    blocks.emplace_back(start, std::min(start + array_size, columns));
  }
  return blocks;
}

ProgrammedVars program_weights(const Var& w, const CrossbarConfig& cfg) {
  if (w.value().empty()) throw std::invalid_argument("program_weights: empty weight matrix");
  Var clamped = ad::clip(w, cfg.w_min, cfg.w_max);
  Var scale = ad::max_abs(clamped);
  if (scale.value()[0] == 0.0) {
    // Nothing to normalise: both arrays sit at g_min and carry no gradient.
    return {Var::constant(Tensor(w.shape(), cfg.g_min)), Var::constant(Tensor(w.shape(), cfg.g_min)),
            Var::constant(Tensor::scalar(0.0)), true};
  }
  const double range = cfg.g_range();
  Var wp = ad::div_by_scalar(ad::relu(clamped), scale);
  Var wn = ad::div_by_scalar(ad::relu(ad::scale(clamped, -1.0)), scale);
  return {ad::add_scalar(ad::scale(wp, range), cfg.g_min), ad::add_scalar(ad::scale(wn, range), cfg.g_min), scale,
          false};
}

Var reconstruct_effective(const Var& g_p, const Var& g_n, const Var& scale, const CrossbarConfig& cfg) {
  return ad::mul_by_scalar(ad::scale(ad::sub(g_p, g_n), 1.0 / cfg.g_range()), scale);
}

}  // namespace hatdiag
