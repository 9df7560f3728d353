#include "hatdiag/hat.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <type_traits>
#include <utility>

#include "hatdiag/diagnostics.hpp"

namespace hatdiag {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

bool is_conductance_stage(const PerturbationSpec& spec) {
  const Stage s = stage_of(spec);
  return s == Stage::kProgramming || s == Stage::kTime || s == Stage::kRead;
}

/// Elementwise node whose value was computed outside the graph; the backward
/// multiplies by a fixed local derivative.
Var elementwise(std::string op, const Var& in, Tensor out, Tensor derivative) {
  return make_node(std::move(op), std::move(out), {in}, [d = std::move(derivative)](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * d[i];
  });
}

Var apply_variability_var(const Var& g, double sigma_v, const CrossbarConfig& cfg, RngStream& rng) {
  const Tensor& v = g.value();
  Tensor out(v.shape()), d(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = 1.0 + sigma_v * rng.normal();
    const double raw = v[i] * f;
    out[i] = std::clamp(raw, cfg.g_min, cfg.g_max);
    d[i] = (raw >= cfg.g_min && raw <= cfg.g_max) ? f : 0.0;
  }
  return elementwise("variability", g, std::move(out), std::move(d));
}

Var apply_stuck_var(const Var& g, const Tensor& mask, const Tensor& stuck) {
  return elementwise("stuck_at", g, apply_stuck(g.value(), mask, stuck), Tensor(mask));
}

Var apply_drift_var(const Var& g, const Drift& spec, double t, double g_min, bool& clipped) {
  const double f = drift_factor(spec.alpha, spec.tau, t);
  const Tensor& v = g.value();
  Tensor out(v.shape()), d(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double next = t == 0 ? v[i] : v[i] * f;
    if (next < g_min) {
      clipped = true;
      out[i] = g_min;
      d[i] = 0.0;
    } else {
      out[i] = next;
      d[i] = t == 0 ? 1.0 : f;
    }
  }
  return elementwise("drift", g, std::move(out), std::move(d));
}

Var apply_read_noise_var(const Var& g, double sigma_r, RngStream& rng) {
  return elementwise("read_noise", g, apply_read_noise(g.value(), sigma_r, rng), Tensor(g.shape(), 1.0));
}

/// Straight-through write: value of the written conductance, identity derivative.
Var apply_write_var(const Var& g, const WriteModelConfig& wcfg, const CrossbarConfig& cfg, RngStream& rng) {
  const Tensor init(g.shape(), cfg.g_min);
  WriteResult written = write_program(g.value(), init, wcfg, cfg, rng);
  return elementwise("write_program", g, std::move(written.g), Tensor(g.shape(), 1.0));
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

const StuckAt* find_stuck(const std::vector<PerturbationSpec>& specs) {
  for (const auto& s : specs)
    if (const auto* p = std::get_if<StuckAt>(&s)) return p;
  return nullptr;
}

Parameter clone_parameter(const Parameter& p) {
  Parameter out(p.name, p.value(), p.trainable);
  out.frozen = p.frozen;
  return out;
}

double grad_norm(const std::vector<Parameter*>& params) {
  std::vector<double> squares;
  for (const Parameter* p : params) {
    if (!p->trainable) continue;
    for (double g : p->grad().data()) squares.push_back(g * g);
  }
  return std::sqrt(pairwise_sum(squares));
}

}  // namespace

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "identity" || name == "linear") return Activation::kIdentity;
  throw std::invalid_argument("unknown activation '" + name + "' (expected relu|identity)");
}

std::string activation_name(Activation a) { return a == Activation::kRelu ? "relu" : "identity"; }

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("train: learning_rate must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("train: momentum must lie in [0,1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (steps == 0 && epochs == 0) throw std::invalid_argument("train: need epochs or steps");
  if (!(lambda_reg >= 0)) throw std::invalid_argument("train: lambda_reg must be >= 0");
  if (!(beta_reg > 0 && beta_reg < 1)) throw std::invalid_argument("train: beta_reg must lie in (0,1)");
}

std::size_t TrainConfig::total_steps(std::size_t train_size) const {
  if (steps > 0) return steps;
  const std::size_t per_epoch = (train_size + batch_size - 1) / batch_size;
  return epochs * per_epoch;
}

void validate_pipeline(const std::vector<PerturbationSpec>& specs) {
  int compute = 0, stuck = 0;
  Stage previous = Stage::kProgramming;
  for (const auto& s : specs) {
    validate(s);
    const Stage st = stage_of(s);
    if (st < previous) {
      throw std::invalid_argument("perturbation pipeline out of order at '" + kind_name(s) +
                                  "' (programming, time, read, compute, output)");
    }
    previous = st;
    compute += st == Stage::kCompute;
    stuck += std::holds_alternative<StuckAt>(s);
  }
  if (compute > 1) throw std::invalid_argument("perturbation pipeline: at most one IR-drop operator per layer");
  if (stuck > 1) throw std::invalid_argument("perturbation pipeline: at most one stuck_at operator per layer");
}

// ---- HatModel ---------------------------------------------------------------

HatModel::HatModel(const std::vector<std::size_t>& sizes, Activation hidden, const CrossbarConfig& crossbar,
                   std::uint64_t seed)
    : seed_(seed) {
  if (sizes.size() < 2) throw std::invalid_argument("HatModel: need at least input and output sizes");
  crossbar.validate();
  RngStream init(seed, "init");
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::size_t in = sizes[l], out = sizes[l + 1];
    if (in == 0 || out == 0) throw std::invalid_argument("HatModel: layer sizes must be positive");
    RngStream r = init.child("layer", l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Tensor w(Shape{out, in}), b(Shape{out});
    for (auto& v : w.data()) v = r.uniform(-bound, bound);
    for (auto& v : b.data()) v = r.uniform(-bound, bound);
    Layer layer;
    layer.weight = Parameter("W" + std::to_string(l), std::move(w));
    layer.bias = Parameter("b" + std::to_string(l), std::move(b));
    layer.activation = l + 2 == sizes.size() ? Activation::kIdentity : hidden;
    layer.crossbar = crossbar;
    layers_.push_back(std::move(layer));
  }
}

HatModel::HatModel(const HatModel& other) : seed_(other.seed_) {
  layers_.reserve(other.layers_.size());
  for (const Layer& src : other.layers_) {
    Layer l;
    l.weight = clone_parameter(src.weight);
    l.bias = clone_parameter(src.bias);
    l.activation = src.activation;
    l.crossbar = src.crossbar;
    l.perturbations = src.perturbations;
    l.stuck = src.stuck;
    layers_.push_back(std::move(l));
  }
}

HatModel& HatModel::operator=(const HatModel& other) {
  if (this != &other) *this = HatModel(other);
  return *this;
}

void HatModel::set_perturbations(const std::vector<PerturbationSpec>& specs) {
  validate_pipeline(specs);
  for (Layer& l : layers_) {
    l.perturbations = specs;
    if (!find_stuck(specs)) {
      l.stuck.reset();
      l.weight.frozen = Tensor();
    }
  }
}

std::vector<Parameter*> HatModel::parameters() {
  std::vector<Parameter*> out;
  for (Layer& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<Parameter*> HatModel::weights() {
  std::vector<Parameter*> out;
  for (Layer& l : layers_) out.push_back(&l.weight);
  return out;
}

void HatModel::prepare_faults() {
  RngStream faults(seed_, "faults");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& l = layers_[i];
    const StuckAt* spec = find_stuck(l.perturbations);
    if (!spec) {
      l.stuck.reset();
      l.weight.frozen = Tensor();
      continue;
    }
    if (l.stuck && l.stuck->rho == spec->rho && l.stuck->policy == spec->policy) continue;
    RngStream r = faults.child("layer", i);
    const ProgrammedPair programmed = program_weights(l.weight.value(), l.crossbar);
    StuckCache cache{spec->rho, spec->policy,
                     sample_stuck_mask(l.weight.value().shape(), spec->rho, spec->policy, programmed, l.crossbar, r)};
    Tensor frozen(cache.state.mask.shape());
    for (std::size_t k = 0; k < frozen.size(); ++k) frozen[k] = 1.0 - cache.state.mask[k];
    l.weight.frozen = std::move(frozen);
    l.stuck = std::move(cache);
  }
}

double HatModel::frozen_fraction() const {
  std::size_t frozen = 0, total = 0;
  for (const Layer& l : layers_) {
    total += l.weight.value().size();
    if (l.stuck)
      for (double m : l.stuck->state.mask.data()) frozen += (m == 0.0);
  }
  return total == 0 ? 0.0 : static_cast<double>(frozen) / static_cast<double>(total);
}

// ---- Effective weights -------------------------------------------------------

EffectiveWeights build_effective_weights(Layer& layer, std::size_t layer_index, NoiseStreams& rng,
                                         const TimeState& time) {
  const CrossbarConfig& cfg = layer.crossbar;
  EffectiveWeights ew;
  const bool needs_pair = std::any_of(layer.perturbations.begin(), layer.perturbations.end(),
                                      [](const PerturbationSpec& s) { return std::holds_alternative<IrDropCoupled>(s); });
  ew.bypass = std::none_of(layer.perturbations.begin(), layer.perturbations.end(), [](const PerturbationSpec& s) {
    return is_conductance_stage(s) && !is_identity(s);
  });
  if (ew.bypass) {
    ew.w_eff = ad::clip(layer.weight.var, cfg.w_min, cfg.w_max);
    if (needs_pair) ew.programmed = program_weights(layer.weight.var, cfg);
    return ew;
  }

  ProgrammedVars pv = program_weights(layer.weight.var, cfg);
  RngStream prog = rng.program.child("layer", layer_index);
  RngStream read = rng.read.child("layer", layer_index);
  Var gp = pv.g_p, gn = pv.g_n;
  for (const PerturbationSpec& spec : layer.perturbations) {
    if (!is_conductance_stage(spec) || is_identity(spec)) continue;
    std::visit(overloaded{
                   [&](const Multiplicative& m) {
                     gp = apply_variability_var(gp, m.sigma_v, cfg, prog);
                     gn = apply_variability_var(gn, m.sigma_v, cfg, prog);
                   },
                   [&](const StuckAt&) {
                     if (!layer.stuck) throw std::logic_error("build_effective_weights: faults not prepared");
                     const StuckState& st = layer.stuck->state;
                     gp = apply_stuck_var(gp, st.mask, st.c_p);
                     gn = apply_stuck_var(gn, st.mask, st.c_n);
                   },
                   [&](const WriteProgram& w) {
                     gp = apply_write_var(gp, w.config, cfg, prog);
                     gn = apply_write_var(gn, w.config, cfg, prog);
                   },
                   [&](const Drift& d) {
                     const double t = d.time_mode == TimeMode::kAccumulated ? static_cast<double>(time.step)
                                                                              : prog.uniform(0.0, d.horizon);
                     gp = apply_drift_var(gp, d, t, cfg.g_min, ew.drift_clipped);
                     gn = apply_drift_var(gn, d, t, cfg.g_min, ew.drift_clipped);
                   },
                   [&](const Additive& a) {
                     gp = apply_read_noise_var(gp, a.sigma_r, read);
                     gn = apply_read_noise_var(gn, a.sigma_r, read);
                   },
                   [](const auto&) {},
               },
               spec);
  }
  ew.w_eff = reconstruct_effective(gp, gn, pv.scale, cfg);
  ew.programmed = {gp, gn, pv.scale, pv.degenerate};
  return ew;
}

Var model_forward(HatModel& model, const Tensor& x, NoiseStreams& rng, const TimeState& time,
                  const ForwardOptions& options) {
  model.prepare_faults();
  auto& layers = model.layers();
  if (options.mean_field_weights && options.mean_field_weights->size() != layers.size()) {
    throw std::invalid_argument("model_forward: one mean-field weight matrix per layer required");
  }
  if (options.layer_outputs) options.layer_outputs->clear();
  if (options.effective_weights) options.effective_weights->clear();
  const bool mean_field = options.mean_field_weights != nullptr;

  Var h = Var::constant(x);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Layer& layer = layers[l];
    EffectiveWeights ew;
    if (mean_field) {
      const Tensor& target = (*options.mean_field_weights)[l];
      Var clipped = ad::clip(layer.weight.var, layer.crossbar.w_min, layer.crossbar.w_max);
      ew.w_eff = ad::add(clipped, Var::constant(target - clipped.value()));
      ew.programmed = program_weights(layer.weight.var, layer.crossbar);
    } else {
      ew = build_effective_weights(layer, l, rng, time);
    }
    if (options.effective_weights) options.effective_weights->push_back(ew.w_eff.value());

    RngStream read = rng.read.child("compute", l);
    Var z;
    const auto compute = std::find_if(layer.perturbations.begin(), layer.perturbations.end(),
                                      [](const PerturbationSpec& s) { return stage_of(s) == Stage::kCompute; });
    if (compute == layer.perturbations.end() || is_identity(*compute)) {
      z = ad::linear(h, ew.w_eff);
    } else if (const auto* ir = std::get_if<IrDropSimplified>(&*compute)) {
      z = ad::linear(ir_drop_inputs(h, ir->beta, layer.crossbar.array_size), ew.w_eff);
    } else {
      const auto& spec = std::get<IrDropCoupled>(*compute);
      const Tensor jitter = mean_field ? Tensor(Shape{layer.inputs()}, 1.0)
                                       : sample_wire_jitter(layer.inputs(), spec.jitter, read);
      Var g_sum = ad::add(ew.programmed.g_p, ew.programmed.g_n);
      z = ad::linear(coupled_voltages(h, g_sum, spec, layer.crossbar.array_size, jitter), ew.w_eff);
    }

    for (const PerturbationSpec& spec : layer.perturbations) {
      const auto* adc = std::get_if<AdcQuant>(&spec);
      if (!adc) continue;
      if (mean_field && adc->surrogate == Surrogate::kStochastic) continue;
      RngStream q = read.child("adc");
      z = adc_quantize(z, *adc, q);
    }
    z = ad::add_row(z, layer.bias.var);
    if (options.layer_outputs) options.layer_outputs->push_back(z.value());
    h = layer.activation == Activation::kRelu ? ad::relu(z) : z;
  }
  return h;
}

Var range_regularization(HatModel& model, double beta_reg) {
  if (!(beta_reg > 0 && beta_reg < 1)) throw std::invalid_argument("range_regularization: beta_reg must lie in (0,1)");
  auto& layers = model.layers();
  if (layers.empty()) return Var::constant(Tensor::scalar(0.0));
  Var total;
  for (Layer& l : layers) {
    const double threshold = beta_reg * l.crossbar.w_max;
    Var term = ad::mean(ad::square(ad::relu(ad::add_scalar(ad::abs(l.weight.var), -threshold))));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(layers.size()));
}

// ---- Training -----------------------------------------------------------------

TrainingDivergence::TrainingDivergence(std::size_t step, std::string spec, const std::string& what)
    : std::runtime_error(what), step_(step), spec_(std::move(spec)) {}

StepRecord hat_train_step(HatModel& model, const Batch& batch, const TrainConfig& cfg, OptimizerState& opt,
                          const RngStream& rng, TimeState& time) {
  if (batch.labels.empty() || batch.x.rows() != batch.labels.size()) {
    throw std::invalid_argument("hat_train_step: batch must be non-empty with one label per row");
  }
  const std::string pipeline = model.layers().empty() ? "clean" : describe(model.layers().front().perturbations);
  NoiseStreams streams = NoiseStreams::from(rng);
  Var logits;
  try {
    logits = model_forward(model, batch.x, streams, time);
  } catch (const CoupledDivergence& e) {
    throw TrainingDivergence(time.step, pipeline, e.what());
  }
  Var task = ad::softmax_cross_entropy(logits, batch.labels);
  Var total = task;
  if (cfg.lambda_reg > 0) total = ad::add(task, ad::scale(range_regularization(model, cfg.beta_reg), cfg.lambda_reg));

  StepRecord rec;
  rec.step = time.step;
  rec.task_loss = task.value().item();
  rec.total_loss = total.value().item();
  rec.learning_rate = opt.learning_rate;
  if (!std::isfinite(rec.total_loss)) throw TrainingDivergence(time.step, pipeline, "non-finite loss under " + pipeline);

  std::vector<Parameter*> params = model.parameters();
  backward_pass(total);
  for (Parameter* p : params) p->mask_frozen_gradient();
  rec.grad_norm = grad_norm(params);
  if (!std::isfinite(rec.grad_norm)) {
    throw TrainingDivergence(time.step, pipeline, "non-finite gradient under " + pipeline);
  }
  sgd_update(params, opt);
  time.advance();
  return rec;
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (rows != labels.size()) throw std::invalid_argument("accuracy: one label per row required");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (logits[r * cols + c] > logits[r * cols + best]) best = c;
    correct += static_cast<int>(best) == labels[r];
  }
  return static_cast<double>(correct) / static_cast<double>(rows);
}

namespace {
double single_draw_accuracy(HatModel& model, const Dataset& data, const RngStream& rng, const TimeState& time) {
  NoiseStreams streams = NoiseStreams::from(rng);
  return accuracy(model_forward(model, data.features, streams, time).value(), data.labels);
}
}  // namespace

TrainResult hat_train(HatModel& model, const Dataset& train, const Dataset* val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw std::invalid_argument("hat_train: empty training set");
  TrainResult result;
  const std::size_t total = cfg.total_steps(train.size());
  OptimizerState opt{cfg.learning_rate, cfg.momentum, cfg.weight_decay, {}};
  const RngStream base(cfg.seed, "train");
  TimeState& time = result.time;
  for (const auto& s : model.layers().front().perturbations)
    if (const auto* d = std::get_if<Drift>(&s)) time.mode = d->time_mode;

  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size();
  std::size_t epoch = 0;
  auto close_epoch = [&] {
    const RngStream eval_rng = base.child("epoch_eval", epoch);
    result.epoch_train_accuracy.push_back(single_draw_accuracy(model, train, eval_rng, time));
    if (val && val->size() > 0) result.epoch_val_accuracy.push_back(single_draw_accuracy(model, *val, eval_rng, time));
  };

  for (std::size_t step = 0; step < total; ++step) {
    if (cursor >= order.size()) {
      if (step > 0) {
        close_epoch();
        ++epoch;
      }
      std::iota(order.begin(), order.end(), std::size_t{0});
      RngStream shuffle = base.child("shuffle", epoch);
      for (std::size_t i = order.size() - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(shuffle.next_u64() % (i + 1));
        std::swap(order[i], order[j]);
      }
      cursor = 0;
    }
    const std::size_t n = std::min(cfg.batch_size, order.size() - cursor);
    Dataset part = train.subset(std::span<const std::size_t>(order).subspan(cursor, n));
    cursor += n;
    Batch batch{std::move(part.features), std::move(part.labels)};
    if (cfg.cosine) opt.learning_rate = cosine_learning_rate(cfg.learning_rate, step, total);
    try {
      StepRecord rec = hat_train_step(model, batch, cfg, opt, base.child("step", step), time);
      rec.step = step;
      result.steps.push_back(rec);
    } catch (const TrainingDivergence& e) {
      result.diverged = true;
      result.failed_step = step;
      result.failure = e.what();
      return result;
    }
  }
  close_epoch();
  return result;
}

PipelineScope::PipelineScope(HatModel& model, const std::vector<PerturbationSpec>& specs) : model_(model) {
  validate_pipeline(specs);
  for (Layer& l : model_.layers()) {
    saved_.push_back({l.perturbations, l.stuck, l.weight.frozen});
    l.perturbations = specs;
  }
}

PipelineScope::~PipelineScope() {
  for (std::size_t i = 0; i < saved_.size(); ++i) {
    Layer& l = model_.layers()[i];
    l.perturbations = std::move(saved_[i].perturbations);
    l.stuck = std::move(saved_[i].stuck);
    l.weight.frozen = std::move(saved_[i].frozen);
  }
}

EvalResult evaluate(HatModel& model, const Dataset& data, const std::vector<PerturbationSpec>& eval_specs,
                    const RngStream& rng, std::size_t n_noise_samples, const TimeState& time) {
  if (n_noise_samples < 1) throw std::invalid_argument("evaluate: n_noise_samples must be >= 1");
  EvalResult result;
  std::vector<Tensor> clean_outputs, pert_outputs;
  {
    PipelineScope clean(model, {});
    NoiseStreams streams = NoiseStreams::from(rng.child("clean"));
    ForwardOptions opts;
    opts.layer_outputs = &clean_outputs;
    model_forward(model, data.features, streams, time, opts);
  }
  PipelineScope scope(model, eval_specs);
  for (std::size_t d = 0; d < n_noise_samples; ++d) {
    NoiseStreams streams = NoiseStreams::from(rng.child("draw", d));
    ForwardOptions opts;
    opts.layer_outputs = &pert_outputs;
    const Var logits = model_forward(model, data.features, streams, time, opts);
    result.draw_accuracy.push_back(accuracy(logits.value(), data.labels));
    result.draw_delta_global.push_back(distortion_global(clean_outputs, pert_outputs, kDefaultEpsNum));
  }

  const double n = static_cast<double>(n_noise_samples);
  result.accuracy = pairwise_sum(result.draw_accuracy) / n;
  result.delta_global = pairwise_sum(result.draw_delta_global) / n;
  double var = 0.0;
  for (double a : result.draw_accuracy) var += (a - result.accuracy) * (a - result.accuracy);
  result.accuracy_std = std::sqrt(var / n);
  const auto all_equal = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (all_equal(result.draw_accuracy)) {
    result.accuracy = result.draw_accuracy.front();
    result.accuracy_std = 0.0;
  }
  if (all_equal(result.draw_delta_global)) result.delta_global = result.draw_delta_global.front();
  return result;
}

}  // namespace hatdiag
