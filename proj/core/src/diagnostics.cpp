#include "hatdiag/diagnostics.hpp"

#include <algorithm>
#include <cmath>

namespace hatdiag {

namespace {

double row_norm(const Tensor& t, std::size_t r, std::size_t n) {
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += t[r * n + j] * t[r * n + j];
  return std::sqrt(s);
}

double row_diff_norm(const Tensor& a, const Tensor& b, std::size_t r, std::size_t n) {
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = a[r * n + j] - b[r * n + j];
    s += d * d;
  }
  return std::sqrt(s);
}

std::string describe(const std::vector<PerturbationSpec>& specs) {
  if (specs.empty()) return "clean";
  std::string out;
  for (const auto& s : specs) {
    if (!out.empty()) out += "+";
    out += kind_name(s);
  }
  return out;
}

/// Programming event shared across draws; read noise drawn per draw.
NoiseStreams draw_streams(const RngStream& rng, std::size_t draw) {
  return {rng.child("program"), rng.child("read", draw)};
}

bool all_zero(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

}  // namespace

double distortion_delta(const Tensor& y_clean, const Tensor& y_perturbed, double eps_num) {
  if (!y_clean.same_shape(y_perturbed)) throw ShapeError("distortion_delta", y_clean.shape(), y_perturbed.shape());
  if (!(eps_num > 0)) throw std::invalid_argument("distortion_delta: eps_num must be > 0");
  const std::size_t rows = y_clean.rows(), n = y_clean.cols();
  std::vector<double> terms(rows);
  for (std::size_t r = 0; r < rows; ++r)
    terms[r] = row_diff_norm(y_perturbed, y_clean, r, n) / (row_norm(y_clean, r, n) + eps_num);
  return pairwise_sum(terms) / static_cast<double>(rows);
}

double distortion_global(const std::vector<Tensor>& clean, const std::vector<Tensor>& perturbed, double eps_num) {
  if (clean.size() != perturbed.size()) {
    throw std::invalid_argument("distortion_global: clean and perturbed layer lists differ in length");
  }
  if (!(eps_num > 0)) throw std::invalid_argument("distortion_global: eps_num must be > 0");
  std::vector<double> num, den;
  for (std::size_t l = 0; l < clean.size(); ++l) {
    if (!clean[l].same_shape(perturbed[l])) throw ShapeError("distortion_global", clean[l].shape(), perturbed[l].shape());
    const std::size_t rows = clean[l].rows(), n = clean[l].cols();
    for (std::size_t r = 0; r < rows; ++r) {
      num.push_back(row_diff_norm(perturbed[l], clean[l], r, n));
      den.push_back(row_norm(clean[l], r, n));
    }
  }
  return pairwise_sum(num) / (pairwise_sum(den) + eps_num);
}

NonFiniteGradient::NonFiniteGradient(std::string spec, std::size_t draw)
    : std::runtime_error("non-finite gradient under " + spec + " at draw " + std::to_string(draw)),
      spec_(std::move(spec)),
      draw_(draw) {}

std::vector<double> task_gradient(HatModel& model, const Batch& batch, NoiseStreams& rng, const TimeState& time,
                                  const ForwardOptions& options) {
  const Var logits = model_forward(model, batch.x, rng, time, options);
  const Var loss = ad::softmax_cross_entropy(logits, batch.labels);
  for (Parameter* p : model.parameters()) p->var.zero_grad();
  backward_pass(loss);
  std::vector<double> flat;
  for (Parameter* w : model.weights()) {
    w->mask_frozen_gradient();
    const auto g = w->grad().data();
    flat.insert(flat.end(), g.begin(), g.end());
  }
  for (Parameter* p : model.parameters()) p->var.zero_grad();
  return flat;
}

ConsistencyResult expectation_consistency(HatModel& model, const Batch& batch,
                                          const std::vector<PerturbationSpec>& specs, std::size_t k,
                                          const RngStream& rng, const TimeState& time) {
  if (k < 2) throw std::invalid_argument("expectation_consistency: K must be >= 2");
  PipelineScope scope(model, specs);
  const std::string name = describe(specs);
  std::vector<double> lhs;
  std::vector<Tensor> w_sum;
  bool identical = true;
  std::vector<double> first;
  std::vector<Tensor> first_w;
  for (std::size_t d = 0; d < k; ++d) {
    NoiseStreams streams = draw_streams(rng, d);
    std::vector<Tensor> w_eff;
    ForwardOptions opts;
    opts.effective_weights = &w_eff;
    const std::vector<double> g = task_gradient(model, batch, streams, time, opts);
    if (!std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); })) throw NonFiniteGradient(name, d);
    if (d == 0) {
      lhs = g;
      w_sum = w_eff;
      first = g;
      first_w = w_eff;
      continue;
    }
    identical = identical && g == first && w_eff == first_w;
    for (std::size_t i = 0; i < g.size(); ++i) lhs[i] += g[i];
    for (std::size_t l = 0; l < w_eff.size(); ++l) w_sum[l] = w_sum[l] + w_eff[l];
  }
  std::vector<Tensor> w_mean;
  if (identical) {
    lhs = first;
    w_mean = first_w;
  } else {
    const double inv = 1.0 / static_cast<double>(k);
    for (double& v : lhs) v *= inv;
    for (const Tensor& t : w_sum) w_mean.push_back(scaled(t, inv));
  }

  NoiseStreams streams = draw_streams(rng, k);
  ForwardOptions mean_opts;
  mean_opts.mean_field_weights = &w_mean;
  const std::vector<double> rhs = task_gradient(model, batch, streams, time, mean_opts);

  ConsistencyResult res;
  if (all_zero(lhs) || all_zero(rhs)) {
    res.degenerate = true;
    return res;
  }
  if (lhs == rhs) {
    res.cosine = 1.0;
    return res;
  }
  const double c = dot(lhs, rhs) / (l2_norm(lhs) * l2_norm(rhs));
  res.cosine = std::clamp(c, -1.0, 1.0);
  return res;
}

double gradient_variance_mc(const std::function<std::vector<double>(std::size_t)>& sampler, std::size_t k,
                            const std::string& spec_name) {
  if (k < 2) throw std::invalid_argument("gradient_variance_mc: K must be >= 2");
  std::vector<double> mean, m2;
  for (std::size_t d = 0; d < k; ++d) {
    const std::vector<double> g = sampler(d);
    if (d == 0) {
      mean.assign(g.size(), 0.0);
      m2.assign(g.size(), 0.0);
    } else if (g.size() != mean.size()) {
      throw std::invalid_argument("gradient_variance_mc: draws differ in length");
    }
    const double n = static_cast<double>(d + 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) throw NonFiniteGradient(spec_name, d);
      const double delta = g[i] - mean[i];
      mean[i] += delta / n;
      m2[i] += delta * (g[i] - mean[i]);
    }
  }
  if (m2.empty()) return 0.0;
  for (double& v : m2) v /= static_cast<double>(k);
  return pairwise_sum(m2) / static_cast<double>(m2.size());
}

double gradient_variance_mc(HatModel& model, const Batch& batch, const std::vector<PerturbationSpec>& specs,
                            std::size_t k, const RngStream& rng, const TimeState& time) {
  PipelineScope scope(model, specs);
  const std::string name = describe(specs);
  return gradient_variance_mc(
      [&](std::size_t d) {
        NoiseStreams streams = draw_streams(rng, d);
        return task_gradient(model, batch, streams, time);
      },
      k, name);
}

SensitivityResult sensitivity_probe(HatModel& model, const Batch& batch, const std::vector<PerturbationSpec>& specs,
                                    const RngStream& rng, const TimeState& time) {
  if (batch.labels.empty()) throw std::invalid_argument("sensitivity_probe: batch must be non-empty");
  PipelineScope scope(model, specs);
  NoiseStreams streams = draw_streams(rng, 0);
  const std::vector<double> g = task_gradient(model, batch, streams, time);
  std::size_t active = 0, nonzero = 0, frozen = 0, offset = 0;
  double sq = 0.0;
  for (Parameter* w : model.weights()) {
    for (std::size_t i = 0; i < w->value().size(); ++i) {
      if (w->is_frozen(i)) {
        ++frozen;
        continue;
      }
      ++active;
      const double v = g[offset + i];
      nonzero += v != 0.0;
      sq += v * v;
    }
    offset += w->value().size();
  }
  SensitivityResult res;
  res.frozen_fraction = static_cast<double>(frozen) / static_cast<double>(offset);
  res.nonzero_fraction = active == 0 ? 0.0 : static_cast<double>(nonzero) / static_cast<double>(active);
  res.norm = std::sqrt(sq);
  return res;
}

double measure_delta_global(HatModel& model, const Tensor& x, const std::vector<PerturbationSpec>& specs,
                            const RngStream& rng, std::size_t draws, const TimeState& time) {
  if (draws < 1) throw std::invalid_argument("measure_delta_global: draws must be >= 1");
  std::vector<Tensor> clean, pert;
  {
    PipelineScope scope(model, {});
    NoiseStreams streams = NoiseStreams::from(rng.child("clean"));
    ForwardOptions opts;
    opts.layer_outputs = &clean;
    model_forward(model, x, streams, time, opts);
  }
  PipelineScope scope(model, specs);
  std::vector<double> deltas;
  for (std::size_t d = 0; d < draws; ++d) {
    NoiseStreams streams = draw_streams(rng, d);
    ForwardOptions opts;
    opts.layer_outputs = &pert;
    model_forward(model, x, streams, time, opts);
    deltas.push_back(distortion_global(clean, pert));
  }
  return pairwise_sum(deltas) / static_cast<double>(draws);
}

// ---- Gradient trace -------------------------------------------------------------

GradientTrace::GradientTrace(std::size_t window) : window_(window) {
  if (window < 1) throw std::invalid_argument("GradientTrace: window must be >= 1");
}

void GradientTrace::record(double norm) {
  if (!(norm >= 0)) throw std::invalid_argument("GradientTrace: norms must be non-negative");
  norms_.push_back(norm);
  const std::size_t end = norms_.size();
  const std::size_t begin = end > window_ ? end - window_ : 0;
  const double n = static_cast<double>(end - begin);
  double mean = 0.0;
  for (std::size_t i = begin; i < end; ++i) mean += norms_[i];
  mean /= n;
  double var = 0.0;
  for (std::size_t i = begin; i < end; ++i) var += (norms_[i] - mean) * (norms_[i] - mean);
  rolling_mean_.push_back(mean);
  rolling_std_.push_back(std::sqrt(var / n));
}

TraceStats GradientTrace::summary() const {
  if (norms_.empty()) return {};
  const double n = static_cast<double>(norms_.size());
  const double mean = pairwise_sum(norms_) / n;
  double var = 0.0;
  for (double v : norms_) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / n), false};
}

void record_trace(GradientTrace& trace, const StepRecord& step) { trace.record(step.grad_norm); }

// ---- Regimes ----------------------------------------------------------------------

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::kI: return "I";
    case Regime::kII: return "II";
    case Regime::kIII: return "III";
  }
  return "?";
}

Regime classify_regime(const DiagnosticsReport& report, const RegimeThresholds& t) {
  if (report.nonfinite || report.sensitivity_fraction < t.t_sens || report.grad_variance > t.t_var) return Regime::kIII;
  if (report.frozen_fraction > t.t_frozen) return Regime::kII;
  return Regime::kI;
}

DiagnosticsReport diagnose_spec(HatModel& model, const Batch& batch, const std::vector<PerturbationSpec>& specs,
                                const RngStream& rng, const RegimeThresholds& thresholds,
                                const DiagnoseSettings& settings, const TimeState& time) {
  DiagnosticsReport rep;
  rep.spec = describe(specs);
  rep.thresholds = thresholds;
  try {
    const ConsistencyResult c =
        expectation_consistency(model, batch, specs, settings.k_consistency, rng.child("consistency"), time);
    rep.consistency_cosine = c.cosine;
    rep.consistency_degenerate = c.degenerate;
    rep.grad_variance = gradient_variance_mc(model, batch, specs, settings.k_variance, rng.child("variance"), time);
    const SensitivityResult s = sensitivity_probe(model, batch, specs, rng.child("sensitivity"), time);
    rep.sensitivity_fraction = s.nonzero_fraction;
    rep.sensitivity_norm = s.norm;
    rep.frozen_fraction = s.frozen_fraction;
    rep.delta_global = measure_delta_global(model, batch.x, specs, rng.child("distortion"), 1, time);
  } catch (const NonFiniteGradient& e) {
    rep.nonfinite = true;
    rep.failure = e.what();
  } catch (const CoupledDivergence& e) {
    rep.nonfinite = true;
    rep.failure = e.what();
  }
  rep.regime = classify_regime(rep, thresholds);
  return rep;
}

}  // namespace hatdiag
