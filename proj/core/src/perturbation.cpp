#include "hatdiag/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>

namespace hatdiag {

namespace {
constexpr double kEpsNum = 1e-12;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}
}  // namespace

void WriteModelConfig::validate() const {
  require(a_plus > 0 && a_minus > 0 && p_plus > 0 && p_minus > 0 && gamma > 0 && sigma_w >= 0 && v_write > 0 &&
              t_min > 0 && t_scale > 0 && max_pulses > 0 && tolerance > 0,
          "write model: parameters must be positive");
}

Stage stage_of(const PerturbationSpec& spec) {
  return std::visit(overloaded{
                        [](const Additive&) { return Stage::kRead; },
                        [](const Multiplicative&) { return Stage::kProgramming; },
                        [](const Drift&) { return Stage::kTime; },
                        [](const StuckAt&) { return Stage::kProgramming; },
                        [](const IrDropSimplified&) { return Stage::kCompute; },
                        [](const IrDropCoupled&) { return Stage::kCompute; },
                        [](const AdcQuant&) { return Stage::kOutput; },
                        [](const WriteProgram&) { return Stage::kProgramming; },
                    },
                    spec);
}

std::string kind_name(const PerturbationSpec& spec) {
  return std::visit(overloaded{
                        [](const Additive&) { return std::string("additive"); },
                        [](const Multiplicative&) { return std::string("multiplicative"); },
                        [](const Drift&) { return std::string("drift"); },
                        [](const StuckAt&) { return std::string("stuck_at"); },
                        [](const IrDropSimplified&) { return std::string("ir_drop_simplified"); },
                        [](const IrDropCoupled&) { return std::string("ir_drop_coupled"); },
                        [](const AdcQuant&) { return std::string("adc_quant"); },
                        [](const WriteProgram&) { return std::string("write_program"); },
                    },
                    spec);
}

void validate(const PerturbationSpec& spec) {
  std::visit(overloaded{
                 [](const Additive& a) { require(a.sigma_r >= 0, "additive: sigma_r must be >= 0"); },
                 [](const Multiplicative& m) { require(m.sigma_v >= 0, "multiplicative: sigma_v must be >= 0"); },
                 [](const Drift& d) {
                   require(d.alpha >= 0, "drift: alpha must be >= 0");
                   require(d.tau > 0, "drift: tau must be > 0");
                   require(d.horizon >= 0, "drift: horizon must be >= 0");
                 },
                 [](const StuckAt& s) { require(s.rho >= 0 && s.rho <= 1, "stuck_at: rho must lie in [0,1]"); },
                 [](const IrDropSimplified& s) { require(s.beta >= 0, "ir_drop_simplified: beta must be >= 0"); },
                 [](const IrDropCoupled& c) {
                   require(c.s >= 0, "ir_drop_coupled: s must be >= 0");
                   require(c.r_wire >= 0, "ir_drop_coupled: r_wire must be >= 0");
                   require(c.max_iters >= 1, "ir_drop_coupled: max_iters must be >= 1");
                   require(c.tol > 0, "ir_drop_coupled: tol must be > 0");
                   require(c.nonlinearity >= 0, "ir_drop_coupled: nonlinearity must be >= 0");
                   require(c.jitter >= 0 && c.jitter <= 1, "ir_drop_coupled: jitter must lie in [0,1]");
                 },
                 [](const AdcQuant& q) {
                   require(q.bits >= 1 && q.bits <= 30, "adc_quant: bits must lie in [1,30]");
                   require(q.range_policy != RangePolicy::kFixed || q.lo < q.hi, "adc_quant: require lo < hi");
                   require(q.smooth_alpha > 0, "adc_quant: smooth_alpha must be > 0");
                 },
                 [](const WriteProgram& w) { w.config.validate(); },
             },
             spec);
}

bool is_identity(const PerturbationSpec& spec) {
  return std::visit(overloaded{
                        [](const Additive& a) { return a.sigma_r == 0; },
                        [](const Multiplicative& m) { return m.sigma_v == 0; },
                        [](const Drift& d) { return d.alpha == 0; },
                        [](const StuckAt& s) { return s.rho == 0; },
                        [](const IrDropSimplified& s) { return s.beta == 0; },
                        [](const IrDropCoupled& c) { return c.s == 0 || c.r_wire == 0; },
                        [](const AdcQuant&) { return false; },
                        [](const WriteProgram&) { return false; },
                    },
                    spec);
}

// ---- Conductance-domain operators -----------------------------------------

Tensor apply_read_noise(const Tensor& g, double sigma_r, RngStream& rng) {
  if (sigma_r < 0) throw std::invalid_argument("apply_read_noise: sigma_r must be >= 0");
  Tensor out(g);
  if (sigma_r == 0) return out;
  for (auto& v : out.data()) v += sigma_r * rng.normal();
  return out;
}

Tensor apply_variability(const Tensor& g, double sigma_v, const CrossbarConfig& cfg, RngStream& rng) {
  if (sigma_v < 0) throw std::invalid_argument("apply_variability: sigma_v must be >= 0");
  Tensor out(g);
  if (sigma_v == 0) return out;
  for (auto& v : out.data()) v = std::clamp(v * (1.0 + sigma_v * rng.normal()), cfg.g_min, cfg.g_max);
  return out;
}

double drift_factor(double alpha, double tau, double t) {
  if (t < 0) throw std::invalid_argument("drift: t must be >= 0");
  if (!(tau > 0)) throw std::invalid_argument("drift: tau must be > 0");
  return 1.0 - alpha * std::log1p(t / tau);
}

DriftResult apply_drift(const Tensor& g0, double alpha, double tau, double t, double g_min) {
  const double f = drift_factor(alpha, tau, t);
  DriftResult r{Tensor(g0), false};
  if (t == 0) return r;
  for (auto& v : r.g.data()) {
    const double next = v * f;
    if (next < g_min) {
      r.clipped = true;
      v = g_min;
    } else {
      v = next;
    }
  }
  return r;
}

double StuckState::frozen_fraction() const {
  if (mask.empty()) return 0.0;
  std::size_t frozen = 0;
  for (double m : mask.data()) frozen += (m == 0.0);
  return static_cast<double>(frozen) / static_cast<double>(mask.size());
}

StuckState sample_stuck_mask(const Shape& shape, double rho, StuckPolicy policy, const ProgrammedPair& programmed,
                             const CrossbarConfig& cfg, RngStream& rng) {
  if (!(rho >= 0 && rho <= 1)) throw std::invalid_argument("sample_stuck_mask: rho must lie in [0,1]");
  StuckState st{Tensor(shape, 1.0), Tensor(shape, cfg.g_min), Tensor(shape, cfg.g_min)};
  if (policy == StuckPolicy::kHoldProgrammed) {
    if (programmed.g_p.shape() != shape) throw ShapeError("sample_stuck_mask", shape, programmed.g_p.shape());
    st.c_p = programmed.g_p;
    st.c_n = programmed.g_n;
  }
  for (std::size_t i = 0; i < st.mask.size(); ++i) {
    const bool stuck = rho > 0 && rng.uniform() < rho;
    if (!stuck) continue;
    st.mask[i] = 0.0;
    if (policy == StuckPolicy::kPinToBound) {
      st.c_p[i] = rng.bernoulli(0.5) ? cfg.g_max : cfg.g_min;
      st.c_n[i] = rng.bernoulli(0.5) ? cfg.g_max : cfg.g_min;
    }
  }
  return st;
}

Tensor apply_stuck(const Tensor& g, const Tensor& mask, const Tensor& stuck_values) {
  if (!g.same_shape(mask)) throw ShapeError("apply_stuck", g.shape(), mask.shape());
  if (!g.same_shape(stuck_values)) throw ShapeError("apply_stuck", g.shape(), stuck_values.shape());
  Tensor out(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = mask[i] * g[i] + (1.0 - mask[i]) * stuck_values[i];
  return out;
}

// ---- Simplified IR drop ----------------------------------------------------

namespace {
struct RowStats {
  double sum_abs = 0;
  double max_abs = 0;
  std::size_t argmax = 0;
};

RowStats row_stats(const Tensor& x, std::size_t r, std::size_t n) {
  RowStats s;
  for (std::size_t j = 0; j < n; ++j) {
    const double a = std::abs(x[r * n + j]);
    s.sum_abs += a;
    if (a > s.max_abs) {
      s.max_abs = a;
      s.argmax = j;
    }
  }
  return s;
}

double depth_ratio(std::size_t j, std::size_t array_size) {
  return static_cast<double>(j % array_size) / static_cast<double>(array_size);
}
}  // namespace

Tensor ir_drop_scaling(const Tensor& x, double beta, std::size_t array_size) {
  if (beta < 0) throw std::invalid_argument("ir_drop: beta must be >= 0");
  if (array_size < 1) throw std::invalid_argument("ir_drop: array_size must be >= 1");
  const std::size_t rows = x.rows(), n = x.cols();
  Tensor d(x.shape(), 1.0);
  if (beta == 0) return d;
  for (std::size_t r = 0; r < rows; ++r) {
    const RowStats s = row_stats(x, r, n);
    const double m = (s.sum_abs / static_cast<double>(n)) / (s.max_abs + kEpsNum);
    for (std::size_t j = 0; j < n; ++j) d[r * n + j] = std::max(0.0, 1.0 - beta * depth_ratio(j, array_size) * m);
  }
  return d;
}

Tensor ir_drop_simplified(const Tensor& w_eff, const Tensor& x, double beta, std::size_t array_size) {
  const Tensor scaled_x = hadamard(x, ir_drop_scaling(x, beta, array_size));
  return ad::linear(Var::constant(scaled_x), Var::constant(w_eff)).value();
}

Var ir_drop_inputs(const Var& x, double beta, std::size_t array_size) {
  const Tensor d = ir_drop_scaling(x.value(), beta, array_size);
  return make_node("ir_drop_inputs", hadamard(x.value(), d), {x}, [d, beta, array_size](Node& self) {
    const Tensor& X = self.inputs[0]->value;
    Tensor& gx = self.inputs[0]->grad_buffer();
    const std::size_t rows = X.rows(), n = X.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      double a = 0.0;  // sum_k g_k x_k dD_k/dm
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = r * n + j;
        gx[k] += self.grad[k] * d[k];
        if (d[k] > 0.0) a += self.grad[k] * X[k] * (-beta * depth_ratio(j, array_size));
      }
      if (a == 0.0) continue;
      const RowStats s = row_stats(X, r, n);
      const double denom = static_cast<double>(n) * (s.max_abs + kEpsNum);
      for (std::size_t j = 0; j < n; ++j) {
        const double xj = X[r * n + j];
        const double sgn = xj > 0 ? 1.0 : (xj < 0 ? -1.0 : 0.0);
        double dm = sgn / denom;
        if (j == s.argmax) dm -= sgn * s.sum_abs / (denom * (s.max_abs + kEpsNum));
        gx[r * n + j] += a * dm;
      }
    }
  });
}

// ---- Coupled IR drop -------------------------------------------------------

CoupledDivergence::CoupledDivergence(const std::string& what, Tensor last_iterate, int iterations)
    : std::runtime_error(what), last_(std::move(last_iterate)), iterations_(iterations) {}

namespace {
double cell_current(double v, double k) {
  const double t = std::tanh(v);
  return v * (1.0 + k * t * t);
}

double cell_current_derivative(double v, double k) {
  const double t = std::tanh(v);
  return 1.0 + k * t * t + 2.0 * k * v * t * (1.0 - t * t);
}

std::vector<double> line_loads(const Tensor& g_sum) {
  const std::size_t out = g_sum.shape()[0], in = g_sum.shape()[1];
  std::vector<double> s(in, 0.0);
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t j = 0; j < in; ++j) s[j] += g_sum[i * in + j];
  return s;
}

std::vector<double> line_coupling(const IrDropCoupled& spec, std::size_t in, std::size_t array_size,
                                  const Tensor& jitter) {
  if (jitter.size() != in) throw ShapeError("coupled jitter", jitter.shape(), Shape{in});
  std::vector<double> c(in);
  for (std::size_t j = 0; j < in; ++j) {
    const double position = static_cast<double>(j % array_size + 1);
    c[j] = spec.s * spec.r_wire * jitter[j] * position;
  }
  return c;
}
}  // namespace

Tensor sample_wire_jitter(std::size_t lines, double jitter, RngStream& rng) {
  Tensor f(Shape{lines}, 1.0);
  if (jitter == 0) return f;
  for (auto& v : f.data()) v = 1.0 + jitter * rng.uniform(-1.0, 1.0);
  return f;
}

CoupledSolve solve_coupled_voltages(const Tensor& x, const Tensor& g_sum, const IrDropCoupled& spec,
                                    std::size_t array_size, const Tensor& jitter) {
  validate(spec);
  if (g_sum.rank() != 2 || x.cols() != g_sum.shape()[1]) throw ShapeError("ir_drop_coupled", x.shape(), g_sum.shape());
  const std::size_t rows = x.rows(), in = x.cols();
  const std::vector<double> load = line_loads(g_sum);
  const std::vector<double> c = line_coupling(spec, in, array_size, jitter);
  CoupledSolve sol{Tensor(x), 0, false};
  if (spec.s == 0 || spec.r_wire == 0) {
    sol.converged = true;
    return sol;
  }
  Tensor next(x.shape());
  double prev_change = std::numeric_limits<double>::infinity();
  int growth = 0;
  for (int it = 1; it <= spec.max_iters; ++it) {
    double change = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < in; ++j) {
        const std::size_t k = r * in + j;
        next[k] = x[k] - c[j] * load[j] * cell_current(sol.voltages[k], spec.nonlinearity);
        change = std::max(change, std::abs(next[k] - sol.voltages[k]));
      }
    std::swap(sol.voltages, next);
    sol.iterations = it;
    if (!std::isfinite(change)) throw CoupledDivergence("ir_drop_coupled: non-finite iterate", sol.voltages, it);
    if (change < spec.tol) {
      sol.converged = true;
      break;
    }
    growth = change > prev_change ? growth + 1 : 0;
    if (growth >= 3) {
      throw CoupledDivergence("ir_drop_coupled: fixed-point iteration diverges (strength too large)", sol.voltages, it);
    }
    prev_change = change;
  }
  return sol;
}

CoupledResult ir_drop_coupled(const ProgrammedPair& pair, const CrossbarConfig& cfg, const Tensor& x,
                              const IrDropCoupled& spec, RngStream& rng) {
  const Tensor w_eff = reconstruct_effective(pair, cfg);
  const Tensor jitter = sample_wire_jitter(x.cols(), spec.jitter, rng);
  const CoupledSolve sol = solve_coupled_voltages(x, pair.g_p + pair.g_n, spec, cfg.array_size, jitter);
  CoupledResult res;
  res.z = ad::linear(Var::constant(sol.voltages), Var::constant(w_eff)).value();
  res.delta = res.z - ad::linear(Var::constant(x), Var::constant(w_eff)).value();
  res.iterations = sol.iterations;
  res.converged = sol.converged;
  return res;
}

Var coupled_voltages(const Var& x, const Var& g_sum, const IrDropCoupled& spec, std::size_t array_size,
                     const Tensor& jitter) {
  CoupledSolve sol = solve_coupled_voltages(x.value(), g_sum.value(), spec, array_size, jitter);
  const std::size_t in = x.value().cols();
  std::vector<double> c = line_coupling(spec, in, array_size, jitter);
  std::vector<double> load = line_loads(g_sum.value());
  const double k = spec.nonlinearity;
  return make_node("coupled_voltages", std::move(sol.voltages), {x, g_sum},
                   [c = std::move(c), load = std::move(load), k, in](Node& self) {
                     const Tensor& V = self.value;
                     const std::size_t rows = V.rows();
                     const bool want_x = self.inputs[0]->requires_grad;
                     const bool want_g = self.inputs[1]->requires_grad;
                     std::vector<double> g_load(in, 0.0);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < in; ++j) {
                         const std::size_t idx = r * in + j;
                         // F(v) = v + c*S*h(v) - x = 0
                         const double denom = 1.0 + c[j] * load[j] * cell_current_derivative(V[idx], k);
                         if (want_x) self.inputs[0]->grad_buffer()[idx] += self.grad[idx] / denom;
                         g_load[j] -= self.grad[idx] * c[j] * cell_current(V[idx], k) / denom;
                       }
                     if (!want_g) return;
                     Tensor& gg = self.inputs[1]->grad_buffer();
                     const std::size_t out = gg.shape()[0];
                     for (std::size_t i = 0; i < out; ++i)
                       for (std::size_t j = 0; j < in; ++j) gg[i * in + j] += g_load[j];
                   });
}

// ---- ADC -------------------------------------------------------------------

QuantizerRange quantizer_range(const Tensor& z, const AdcQuant& spec) {
  if (spec.range_policy == RangePolicy::kFixed) {
    if (!(spec.lo < spec.hi)) throw std::invalid_argument("adc_quantize: require lo < hi");
    return {spec.lo, spec.hi};
  }
  const auto [mn, mx] = std::minmax_element(z.data().begin(), z.data().end());
  return {*mn, *mx};
}

double quantize_value(double z, int bits, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("adc_quantize: require lo < hi");
  const double levels = std::ldexp(1.0, bits);
  const double step = (hi - lo) / (levels - 1.0);
  const double u = (std::clamp(z, lo, hi) - lo) / step;
  return std::min(hi, lo + std::round(u) * step);
}

Tensor adc_quantize(const Tensor& z, const AdcQuant& spec) {
  if (spec.bits < 1) throw std::invalid_argument("adc_quantize: bits must be >= 1");
  const QuantizerRange range = quantizer_range(z, spec);
  Tensor out(z);
  if (!(range.lo < range.hi)) return out;  // per-batch range collapsed to a point
  for (auto& v : out.data()) v = quantize_value(v, spec.bits, range.lo, range.hi);
  return out;
}

namespace {
double smooth_step_derivative(double z, int bits, double lo, double hi, double alpha) {
  const double levels = std::ldexp(1.0, bits);
  const double step = (hi - lo) / (levels - 1.0);
  const double u = (z - lo) / step;
  // Q(z) ~ lo + step * sum_k sigmoid(alpha*(u - k + 1/2)), k = 1..L-1; terms with
  // |alpha*(u-k+1/2)| > 40 contribute below double precision.
  const double reach = 40.0 / alpha;
  const double k_lo = std::max(1.0, std::floor(u + 0.5 - reach));
  const double k_hi = std::min(levels - 1.0, std::ceil(u + 0.5 + reach));
  double d = 0.0;
  for (double k = k_lo; k <= k_hi; k += 1.0) {
    const double s = 1.0 / (1.0 + std::exp(-alpha * (u - k + 0.5)));
    d += alpha * s * (1.0 - s);
  }
  return d;
}
}  // namespace

Var adc_quantize(const Var& z, const AdcQuant& spec, RngStream& rng) {
  validate(spec);
  const Tensor& zv = z.value();
  const QuantizerRange range = quantizer_range(zv, spec);
  const bool collapsed = !(range.lo < range.hi);
  Tensor out(zv);
  double step = 0.0;
  if (!collapsed) {
    step = (range.hi - range.lo) / (std::ldexp(1.0, spec.bits) - 1.0);
    if (spec.surrogate == Surrogate::kStochastic) {
      for (auto& v : out.data()) v += rng.uniform(-0.5 * step, 0.5 * step);
    } else {
      for (auto& v : out.data()) v = quantize_value(v, spec.bits, range.lo, range.hi);
    }
  }
  const Surrogate mode = spec.surrogate;
  const int bits = spec.bits;
  const double alpha = spec.smooth_alpha;
  return make_node("adc_quantize", std::move(out), {z}, [mode, range, collapsed, bits, alpha](Node& self) {
    const Tensor& Z = self.inputs[0]->value;
    Tensor& g = self.inputs[0]->grad_buffer();
    if (collapsed) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      return;
    }
    switch (mode) {
      case Surrogate::kNone:
        return;  // dQ/dz = 0 almost everywhere
      case Surrogate::kSte:
        for (std::size_t i = 0; i < g.size(); ++i)
          if (Z[i] >= range.lo && Z[i] <= range.hi) g[i] += self.grad[i];
        return;
      case Surrogate::kStochastic:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        return;
      case Surrogate::kSmooth:
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += self.grad[i] * smooth_step_derivative(Z[i], bits, range.lo, range.hi, alpha);
        return;
    }
  });
}

// ---- Write model -----------------------------------------------------------

WriteResult write_program(const Tensor& target, const Tensor& init, const WriteModelConfig& wcfg,
                          const CrossbarConfig& cfg, RngStream& rng) {
  wcfg.validate();
  if (!target.same_shape(init)) throw ShapeError("write_program", target.shape(), init.shape());
  const double range = cfg.g_range();
  const double tol = wcfg.tolerance * range;
  WriteResult res{Tensor(init), 0, 0.0, true};
  for (std::size_t e = 0; e < target.size(); ++e) {
    if (target[e] < cfg.g_min || target[e] > cfg.g_max) {
      throw std::invalid_argument("write_program: target outside [g_min, g_max]");
    }
    double g = res.g[e];
    int pulses = 0;
    while (std::abs(target[e] - g) > tol && pulses < wcfg.max_pulses) {
      const double err = target[e] - g;
      // Pulse width grows with the remaining error; measured in units of t_scale.
      const double width = wcfg.t_min + wcfg.t_scale * std::abs(err) / range;
      const double drive = 1.0 - std::exp(-wcfg.gamma * wcfg.v_write * width / wcfg.t_scale);
      const double dg = err > 0 ? wcfg.a_plus * std::pow(1.0 - g / cfg.g_max, wcfg.p_plus) * drive
                                : -wcfg.a_minus * std::pow(g / cfg.g_max, wcfg.p_minus) * drive;
      const double noise = wcfg.sigma_w > 0 ? rng.normal(0.0, wcfg.sigma_w * std::abs(dg)) : 0.0;
      g = std::clamp(g + dg + noise, cfg.g_min, cfg.g_max);
      ++pulses;
    }
    res.g[e] = g;
    res.pulses = std::max(res.pulses, pulses);
    res.residual = std::max(res.residual, std::abs(target[e] - g));
  }
  res.converged = res.residual <= tol;
  return res;
}

// ---- Fault statistics ------------------------------------------------------

std::uint64_t required_redundancy(double p, double lipschitz, double amplification, double weight_norm,
                                  double epsilon) {
  if (!(epsilon > 0)) throw std::invalid_argument("required_redundancy: epsilon must be > 0");
  if (!(p >= 0 && p <= 1)) throw std::invalid_argument("required_redundancy: p must lie in [0,1]");
  const double factor = lipschitz * amplification * weight_norm / epsilon;
  const double bound = p * (1.0 - p) * factor * factor;
  if (bound <= 0) return 0;
  return static_cast<std::uint64_t>(std::ceil(bound * (1.0 - 1e-12)));
}

double averaged_stuck_variance_mc(double w, double alpha, double p, std::size_t r, std::size_t samples,
                                  RngStream& rng) {
  if (r < 1) throw std::invalid_argument("averaged_stuck_variance_mc: r must be >= 1");
  if (samples < 1) throw std::invalid_argument("averaged_stuck_variance_mc: samples must be >= 1");
  const double e = alpha * w;
  double mean = 0.0, m2 = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t faults = 0;
    for (std::size_t j = 0; j < r; ++j) faults += rng.uniform() < p;
    const double x = e * static_cast<double>(faults) / static_cast<double>(r);
    const double delta = x - mean;
    mean += delta / static_cast<double>(s + 1);
    m2 += delta * (x - mean);
  }
  return m2 / static_cast<double>(samples);
}

}  // namespace hatdiag
