#include "hatdiag/experiment.hpp"

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <set>
#include <thread>
#include <utility>

#include "hatdiag/io.hpp"
#include "json.hpp"

#ifndef HATDIAG_VERSION
#define HATDIAG_VERSION "0.0.0"
#endif

namespace hatdiag {

using json = nlohmann::json;

std::string_view artifact_version() noexcept { return HATDIAG_VERSION; }

namespace {

template <class E, std::size_t N>
using EnumTable = std::array<std::pair<E, std::string_view>, N>;

constexpr EnumTable<TimeMode, 2> kTimeModes{{{TimeMode::kFixed, "fixed"}, {TimeMode::kAccumulated, "accumulated"}}};
constexpr EnumTable<StuckPolicy, 2> kStuckPolicies{
    {{StuckPolicy::kHoldProgrammed, "hold_programmed"}, {StuckPolicy::kPinToBound, "pin_to_bound"}}};
constexpr EnumTable<RangePolicy, 2> kRangePolicies{
    {{RangePolicy::kFixed, "fixed"}, {RangePolicy::kPerBatchMinMax, "per_batch_minmax"}}};
constexpr EnumTable<Surrogate, 4> kSurrogates{{{Surrogate::kNone, "none"},
                                               {Surrogate::kSte, "ste"},
                                               {Surrogate::kStochastic, "stochastic"},
                                               {Surrogate::kSmooth, "smooth"}}};

template <class E, std::size_t N>
struct EnumField {
  E& value;
  const EnumTable<E, N>& names;

  std::string name() const {
    for (const auto& [v, n] : names)
      if (v == value) return std::string(n);
    return "?";
  }
  bool assign(const std::string& s) {
    for (const auto& [v, n] : names) {
      if (n == s) {
        value = v;
        return true;
      }
    }
    return false;
  }
  std::string choices() const {
    std::string out;
    for (const auto& p : names) out += (out.empty() ? "" : "|") + std::string(p.second);
    return out;
  }
};

template <class E, std::size_t N>
EnumField<E, N> enum_field(E& v, const EnumTable<E, N>& t) {
  return {v, t};
}

template <class F>
void visit_fields(Additive& s, F&& f) {
  f("sigma_r", s.sigma_r);
}
template <class F>
void visit_fields(Multiplicative& s, F&& f) {
  f("sigma_v", s.sigma_v);
}
template <class F>
void visit_fields(Drift& s, F&& f) {
  f("alpha", s.alpha);
  f("tau", s.tau);
  f("time_mode", enum_field(s.time_mode, kTimeModes));
  f("horizon", s.horizon);
}
template <class F>
void visit_fields(StuckAt& s, F&& f) {
  f("rho", s.rho);
  f("policy", enum_field(s.policy, kStuckPolicies));
}
template <class F>
void visit_fields(IrDropSimplified& s, F&& f) {
  f("beta", s.beta);
}
template <class F>
void visit_fields(IrDropCoupled& s, F&& f) {
  f("s", s.s);
  f("r_wire", s.r_wire);
  f("max_iters", s.max_iters);
  f("tol", s.tol);
  f("nonlinearity", s.nonlinearity);
  f("jitter", s.jitter);
}
template <class F>
void visit_fields(AdcQuant& s, F&& f) {
  f("bits", s.bits);
  f("range_policy", enum_field(s.range_policy, kRangePolicies));
  f("lo", s.lo);
  f("hi", s.hi);
  f("surrogate", enum_field(s.surrogate, kSurrogates));
  f("smooth_alpha", s.smooth_alpha);
}
template <class F>
void visit_fields(WriteProgram& s, F&& f) {
  WriteModelConfig& c = s.config;
  f("a_plus", c.a_plus);
  f("a_minus", c.a_minus);
  f("p_plus", c.p_plus);
  f("p_minus", c.p_minus);
  f("gamma", c.gamma);
  f("sigma_w", c.sigma_w);
  f("v_write", c.v_write);
  f("t_min", c.t_min);
  f("t_scale", c.t_scale);
  f("max_pulses", c.max_pulses);
  f("tolerance", c.tolerance);
}
template <class F>
void visit_spec(PerturbationSpec& spec, F&& f) {
  std::visit([&](auto& s) { visit_fields(s, f); }, spec);
}

PerturbationSpec make_spec(const std::string& kind) {
  if (kind == "additive") return Additive{};
  if (kind == "multiplicative") return Multiplicative{};
  if (kind == "drift") return Drift{};
  if (kind == "stuck_at") return StuckAt{};
  if (kind == "ir_drop_simplified") return IrDropSimplified{};
  if (kind == "ir_drop_coupled") return IrDropCoupled{};
  if (kind == "adc_quant") return AdcQuant{};
  if (kind == "write_program") return WriteProgram{};
  throw ConfigError("unknown perturbation kind '" + kind + "'");
}

// ---- Reading ------------------------------------------------------------------

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  const json* find(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }
  std::string path(const char* key) const { return path_ + "." + key; }

  void operator()(const char* key, double& v) {
    if (const json* x = find(key)) {
      if (!x->is_number()) fail(key, "expected a number");
      v = x->get<double>();
    }
  }
  void operator()(const char* key, int& v) {
    if (const json* x = find(key)) {
      if (!x->is_number_integer()) fail(key, "expected an integer");
      const auto i = x->get<std::int64_t>();
      if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max()) fail(key, "out of range");
      v = static_cast<int>(i);
    }
  }
  void operator()(const char* key, std::uint64_t& v) {
    if (const json* x = find(key)) {
      if (!x->is_number_unsigned()) fail(key, "expected a non-negative integer");
      v = x->get<std::uint64_t>();
    }
  }
  void operator()(const char* key, bool& v) {
    if (const json* x = find(key)) {
      if (!x->is_boolean()) fail(key, "expected true or false");
      v = x->get<bool>();
    }
  }
  void operator()(const char* key, std::string& v) {
    if (const json* x = find(key)) {
      if (!x->is_string()) fail(key, "expected a string");
      v = x->get<std::string>();
    }
  }
  template <class E, std::size_t N>
  void operator()(const char* key, EnumField<E, N> e) {
    std::string s;
    if (!find(key)) return;
    (*this)(key, s);
    if (!e.assign(s)) fail(key, "expected one of " + e.choices() + ", got '" + s + "'");
  }

  void size(const char* key, std::size_t& v) {
    std::uint64_t u = v;
    (*this)(key, u);
    v = static_cast<std::size_t>(u);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path_ + "." + it.key() + ": unknown key");
    }
  }

  [[noreturn]] void fail(const char* key, const std::string& msg) const { throw ConfigError(path(key) + ": " + msg); }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

PerturbationSpec spec_from(const json& j, const std::string& path) {
  Reader r(j, path);
  std::string kind;
  r("kind", kind);
  if (kind.empty()) throw ConfigError(path + ".kind: required");
  PerturbationSpec spec = make_spec(kind);
  visit_spec(spec, r);
  r.finish();
  return spec;
}

std::vector<PerturbationSpec> pipeline_from(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array");
  std::vector<PerturbationSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(spec_from(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

// ---- Writing ------------------------------------------------------------------

struct JsonWriter {
  json& o;
  void operator()(const char* key, double& v) { o[key] = v; }
  void operator()(const char* key, int& v) { o[key] = v; }
  template <class E, std::size_t N>
  void operator()(const char* key, EnumField<E, N> e) {
    o[key] = e.name();
  }
};

json spec_json(PerturbationSpec spec) {
  json o = json::object();
  o["kind"] = kind_name(spec);
  visit_spec(spec, JsonWriter{o});
  return o;
}

json pipeline_json(const std::vector<PerturbationSpec>& specs) {
  json a = json::array();
  for (const auto& s : specs) a.push_back(spec_json(s));
  return a;
}

json config_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["dataset"] = {{"kind", dataset_kind_name(c.dataset.kind)}, {"n", c.dataset.n}, {"noise", c.dataset.noise}};
  j["model"] = {{"layers", c.model.layers}, {"activation", activation_name(c.model.activation)}};
  const CrossbarConfig& x = c.crossbar;
  j["crossbar"] = {{"g_min", x.g_min},          {"g_max", x.g_max}, {"w_min", x.w_min},
                   {"w_max", x.w_max},          {"array_size", x.array_size},
                   {"adc_bits", x.adc_bits}};
  const TrainConfig& t = c.train;
  j["train"] = {{"learning_rate", t.learning_rate}, {"momentum", t.momentum}, {"weight_decay", t.weight_decay},
                {"batch_size", t.batch_size},       {"epochs", t.epochs},     {"steps", t.steps},
                {"cosine", t.cosine},               {"lambda_reg", t.lambda_reg}, {"beta_reg", t.beta_reg}};
  j["train_perturbations"] = pipeline_json(c.train_perturbations);
  j["eval_perturbations"] = pipeline_json(c.eval_perturbations);
  j["eval"] = {{"noise_samples", c.noise_samples}};
  if (c.sweep) j["sweep"] = {{"parameter", c.sweep->parameter}, {"values", c.sweep->values}};
  const DiagnoseConfig& d = c.diagnose;
  j["diagnose"] = {{"batch_size", d.batch_size},
                   {"k_consistency", d.k_consistency},
                   {"k_variance", d.k_variance},
                   {"baseline_sigma_r", d.baseline_sigma_r},
                   {"t_sens", d.thresholds.t_sens},
                   {"t_frozen", d.thresholds.t_frozen},
                   {"t_var_factor", d.thresholds.t_var_factor}};
  const CalibrationConfig& k = c.calibration;
  j["calibration"] = {{"target", k.target},
                      {"trials", k.trials},
                      {"s0", k.s0},
                      {"s_min", k.s_min},
                      {"s_max", k.s_max},
                      {"band", k.band},
                      {"samples", k.samples},
                      {"family", {{"kind", c.family.kind}, {"parameter", c.family.parameter}, {"span", c.family.span}}}};
  return j;
}

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

json header(const std::string& hash) {
  return {{"artifact_version", std::string(artifact_version())}, {"config_hash", hash}};
}

// ---- Axis resolution ----------------------------------------------------------

struct AxisSetter {
  std::string_view field;
  double value;
  bool found = false;

  void operator()(const char* key, double& v) {
    if (field != key) return;
    v = value;
    found = true;
  }
  void operator()(const char* key, int& v) {
    if (field != key) return;
    if (value != std::floor(value) || std::abs(value) > std::numeric_limits<int>::max()) {
      throw ConfigError("axis " + std::string(key) + ": value " + format_number(value) + " is not an integer");
    }
    v = static_cast<int>(value);
    found = true;
  }
  template <class E, std::size_t N>
  void operator()(const char* key, EnumField<E, N>) {
    if (field == key) throw ConfigError("axis " + std::string(key) + ": field is not numeric");
  }
};

std::pair<std::string, std::string> split_parameter(const std::string& parameter) {
  const auto dot = parameter.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == parameter.size()) {
    throw ConfigError("axis '" + parameter + "': expected <kind>.<field>");
  }
  return {parameter.substr(0, dot), parameter.substr(dot + 1)};
}

bool set_field(PerturbationSpec& spec, const std::string& field, double value) {
  AxisSetter setter{field, value};
  visit_spec(spec, setter);
  return setter.found;
}

std::size_t find_kind(const std::vector<PerturbationSpec>& specs, const std::string& kind) {
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (kind_name(specs[i]) == kind) return i;
  return specs.size();
}

std::string describe(const std::vector<PerturbationSpec>& specs) {
  if (specs.empty()) return "clean";
  std::string out;
  for (const auto& s : specs) out += (out.empty() ? "" : "+") + kind_name(s);
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

std::string status_of(const RunRecord& r) {
  if (r.diverged) return "diverged";
  return r.failure.empty() ? "ok" : "error";
}

struct Reference {
  HatModel model;
  TrainResult result;
};

Reference train_reference(const ExperimentConfig& cfg, const DatasetSplits& data) {
  Reference ref{build_model(cfg), {}};
  ref.result = hat_train(ref.model, data.train, &data.val, train_config(cfg));
  if (ref.result.diverged) {
    throw TrainingDivergence(ref.result.failed_step, "clean", "reference training: " + ref.result.failure);
  }
  return ref;
}

DatasetSplits make_data(const ExperimentConfig& cfg) {
  DatasetSplits data = synth_dataset(cfg.dataset.kind, cfg.dataset.n, cfg.dataset.noise, cfg.seed);
  if (data.train.dims() != cfg.model.layers.front()) {
    throw ConfigError("model.layers[0] = " + std::to_string(cfg.model.layers.front()) + " but the dataset has " +
                      std::to_string(data.train.dims()) + " features");
  }
  return data;
}

RegimeThresholds thresholds_for(const ExperimentConfig& cfg, HatModel& model, const Batch& batch,
                                const RngStream& rng, const TimeState& time, double* baseline) {
  RegimeThresholds th = cfg.diagnose.thresholds;
  const double base = gradient_variance_mc(model, batch, {Additive{cfg.diagnose.baseline_sigma_r}},
                                           cfg.diagnose.k_variance, rng.child("baseline"), time);
  th.t_var = th.t_var_factor * base;
  if (baseline) *baseline = base;
  return th;
}

DiagnosticsReport diagnose_one(const ExperimentConfig& cfg, HatModel& model, const Batch& batch,
                               const std::vector<PerturbationSpec>& specs, const RngStream& rng,
                               const RegimeThresholds& th, const TimeState& time) {
  const DiagnoseSettings settings{cfg.diagnose.k_consistency, cfg.diagnose.k_variance};
  try {
    return diagnose_spec(model, batch, specs, rng, th, settings, time);
  } catch (const std::exception& e) {
    throw std::runtime_error("diagnose " + describe(specs) + ": " + e.what());
  }
}

}  // namespace

// ---- Config -------------------------------------------------------------------

void ExperimentConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  try {
    crossbar.validate();
    train.validate();
    validate_pipeline(train_perturbations);
    validate_pipeline(eval_perturbations);
    calibration.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  check(dataset.n >= 30, "dataset.n must be >= 30");
  check(dataset.noise >= 0, "dataset.noise must be >= 0");
  check(model.layers.size() >= 2, "model.layers needs at least input and output sizes");
  for (std::size_t s : model.layers) check(s > 0, "model.layers entries must be > 0");
  check(model.layers.back() >= 2, "model.layers: output size must be >= 2");
  check(model.layers.front() == 2, "model.layers: input size must be 2 for the synthetic datasets");
  check(noise_samples >= 1, "eval.noise_samples must be >= 1");
  check(diagnose.batch_size >= 1, "diagnose.batch_size must be >= 1");
  check(diagnose.k_consistency >= 1 && diagnose.k_variance >= 1, "diagnose: sample counts must be >= 1");
  check(diagnose.baseline_sigma_r > 0, "diagnose.baseline_sigma_r must be > 0");
  check(family.span > 0, "calibration.family.span must be > 0");
  if (sweep) {
    check(!sweep->values.empty(), "sweep.values must not be empty");
    for (double v : sweep->values) {
      ExperimentConfig point = *this;
      point.sweep.reset();
      apply_axis_value(point, sweep->parameter, v);
      point.validate();
    }
  }
}

ExperimentConfig parse_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader top(j, "config");
  top("seed", c.seed);
  top("out", c.out_dir);
  if (const json* d = top.find("dataset")) {
    Reader r(*d, top.path("dataset"));
    std::string kind = dataset_kind_name(c.dataset.kind);
    r("kind", kind);
    try {
      c.dataset.kind = parse_dataset_kind(kind);
    } catch (const std::exception& e) {
      throw ConfigError(r.path("kind") + ": " + e.what());
    }
    r.size("n", c.dataset.n);
    r("noise", c.dataset.noise);
    r.finish();
  }
  if (const json* m = top.find("model")) {
    Reader r(*m, top.path("model"));
    if (const json* layers = r.find("layers")) {
      if (!layers->is_array()) r.fail("layers", "expected an array");
      c.model.layers.clear();
      for (const auto& v : *layers) {
        if (!v.is_number_unsigned()) r.fail("layers", "expected positive integers");
        c.model.layers.push_back(v.get<std::size_t>());
      }
    }
    std::string act = activation_name(c.model.activation);
    r("activation", act);
    try {
      c.model.activation = parse_activation(act);
    } catch (const std::exception& e) {
      throw ConfigError(r.path("activation") + ": " + e.what());
    }
    r.finish();
  }
  if (const json* x = top.find("crossbar")) {
    Reader r(*x, top.path("crossbar"));
    r("g_min", c.crossbar.g_min);
    r("g_max", c.crossbar.g_max);
    r("w_min", c.crossbar.w_min);
    r("w_max", c.crossbar.w_max);
    r.size("array_size", c.crossbar.array_size);
    r("adc_bits", c.crossbar.adc_bits);
    r.finish();
  }
  if (const json* t = top.find("train")) {
    Reader r(*t, top.path("train"));
    r("learning_rate", c.train.learning_rate);
    r("momentum", c.train.momentum);
    r("weight_decay", c.train.weight_decay);
    r.size("batch_size", c.train.batch_size);
    r.size("epochs", c.train.epochs);
    r.size("steps", c.train.steps);
    r("cosine", c.train.cosine);
    r("lambda_reg", c.train.lambda_reg);
    r("beta_reg", c.train.beta_reg);
    r.finish();
  }
  if (const json* p = top.find("train_perturbations")) c.train_perturbations = pipeline_from(*p, top.path("train_perturbations"));
  if (const json* p = top.find("eval_perturbations")) c.eval_perturbations = pipeline_from(*p, top.path("eval_perturbations"));
  if (const json* e = top.find("eval")) {
    Reader r(*e, top.path("eval"));
    r.size("noise_samples", c.noise_samples);
    r.finish();
  }
  if (const json* s = top.find("sweep")) {
    Reader r(*s, top.path("sweep"));
    SweepAxis axis;
    r("parameter", axis.parameter);
    if (const json* values = r.find("values")) {
      if (!values->is_array()) r.fail("values", "expected an array");
      for (const auto& v : *values) {
        if (!v.is_number()) r.fail("values", "expected numbers");
        axis.values.push_back(v.get<double>());
      }
    }
    r.finish();
    if (axis.parameter.empty()) throw ConfigError(r.path("parameter") + ": required");
    c.sweep = std::move(axis);
  }
  if (const json* d = top.find("diagnose")) {
    Reader r(*d, top.path("diagnose"));
    r.size("batch_size", c.diagnose.batch_size);
    r.size("k_consistency", c.diagnose.k_consistency);
    r.size("k_variance", c.diagnose.k_variance);
    r("baseline_sigma_r", c.diagnose.baseline_sigma_r);
    r("t_sens", c.diagnose.thresholds.t_sens);
    r("t_frozen", c.diagnose.thresholds.t_frozen);
    r("t_var_factor", c.diagnose.thresholds.t_var_factor);
    r.finish();
  }
  if (const json* k = top.find("calibration")) {
    Reader r(*k, top.path("calibration"));
    r("target", c.calibration.target);
    r("trials", c.calibration.trials);
    r("s0", c.calibration.s0);
    r("s_min", c.calibration.s_min);
    r("s_max", c.calibration.s_max);
    r("band", c.calibration.band);
    r.size("samples", c.calibration.samples);
    if (const json* f = r.find("family")) {
      Reader fr(*f, r.path("family"));
      fr("kind", c.family.kind);
      fr("parameter", c.family.parameter);
      fr("span", c.family.span);
      fr.finish();
    }
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_text_file(path)); }

std::string canonical_config(const ExperimentConfig& cfg) { return config_json(cfg).dump(); }

std::string config_hash(const ExperimentConfig& cfg) { return sha256_hex(canonical_config(cfg)); }

std::string spec_to_json(const PerturbationSpec& spec) { return spec_json(spec).dump(); }

PerturbationSpec spec_from_json(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("spec: invalid JSON: ") + e.what());
  }
  PerturbationSpec s = spec_from(j, "spec");
  try {
    validate(s);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return s;
}

void apply_axis_value(ExperimentConfig& cfg, const std::string& parameter, double value) {
  const auto [kind, field] = split_parameter(parameter);
  make_spec(kind);
  bool present = false;
  for (auto* list : {&cfg.train_perturbations, &cfg.eval_perturbations}) {
    for (auto& spec : *list) {
      if (kind_name(spec) != kind) continue;
      present = true;
      if (!set_field(spec, field, value)) throw ConfigError("axis '" + parameter + "': " + kind + " has no field '" + field + "'");
    }
  }
  if (!present) throw ConfigError("axis '" + parameter + "': no " + kind + " entry in either pipeline");
}

// ---- Run ----------------------------------------------------------------------

HatModel build_model(const ExperimentConfig& cfg) {
  return HatModel(cfg.model.layers, cfg.model.activation, cfg.crossbar, cfg.seed);
}

TrainConfig train_config(const ExperimentConfig& cfg) {
  TrainConfig t = cfg.train;
  t.seed = cfg.seed;
  return t;
}

Batch diagnostic_batch(const ExperimentConfig& cfg, const DatasetSplits& data) {
  Dataset d = data.train.head(cfg.diagnose.batch_size);
  return {std::move(d.features), std::move(d.labels)};
}

RunRecord execute_run(const ExperimentConfig& cfg) { return execute_run(cfg, make_data(cfg)); }

RunRecord execute_run(const ExperimentConfig& cfg, const DatasetSplits& data) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.config_hash = config_hash(cfg);
  rec.seed = cfg.seed;
  const RngStream eval_rng(cfg.seed, "eval");

  Reference ref = train_reference(cfg, data);
  rec.uncompensated_train_accuracy = ref.result.epoch_train_accuracy;
  rec.uncompensated_val_accuracy = ref.result.epoch_val_accuracy;
  rec.clean_accuracy = evaluate(ref.model, data.test, {}, eval_rng, 1, ref.result.time).accuracy;
  const EvalResult unc =
      evaluate(ref.model, data.test, cfg.eval_perturbations, eval_rng, cfg.noise_samples, ref.result.time);
  rec.uncompensated_accuracy = unc.accuracy;
  rec.uncompensated_accuracy_std = unc.accuracy_std;
  rec.delta_global = unc.delta_global;

  HatModel hat = build_model(cfg);
  hat.set_perturbations(cfg.train_perturbations);
  const TrainResult hr = hat_train(hat, data.train, &data.val, train_config(cfg));
  rec.steps = hr.steps;
  for (const auto& s : hr.steps) record_trace(rec.trace, s);
  rec.trace_summary = rec.trace.summary();
  rec.train_accuracy = hr.epoch_train_accuracy;
  rec.val_accuracy = hr.epoch_val_accuracy;
  rec.trained_frozen_fraction = hat.frozen_fraction();
  if (hr.diverged) {
    rec.diverged = true;
    rec.failed_step = hr.failed_step;
    rec.failure = hr.failure;
    rec.compensated_accuracy = nan();
    rec.compensated_accuracy_std = nan();
  } else {
    const EvalResult comp = evaluate(hat, data.test, cfg.eval_perturbations, eval_rng, cfg.noise_samples, hr.time);
    rec.compensated_accuracy = comp.accuracy;
    rec.compensated_accuracy_std = comp.accuracy_std;
  }

  const Batch batch = diagnostic_batch(cfg, data);
  const RngStream diag_rng(cfg.seed, "diagnose");
  const RegimeThresholds th = thresholds_for(cfg, ref.model, batch, diag_rng, ref.result.time, nullptr);
  rec.diagnostics = diagnose_one(cfg, ref.model, batch, cfg.eval_perturbations, diag_rng.child("spec"), th,
                                 ref.result.time);
  rec.wall_clock_seconds = seconds_since(t0);
  return rec;
}

namespace {

json step_json(const StepRecord& s) {
  return {{"step", s.step},
          {"task_loss", s.task_loss},
          {"total_loss", s.total_loss},
          {"grad_norm", s.grad_norm},
          {"learning_rate", s.learning_rate}};
}

json report_object(const DiagnosticsReport& r) {
  return {{"spec", r.spec},
          {"consistency_cosine", r.consistency_cosine},
          {"consistency_degenerate", r.consistency_degenerate},
          {"grad_variance", r.grad_variance},
          {"sensitivity_fraction", r.sensitivity_fraction},
          {"sensitivity_norm", r.sensitivity_norm},
          {"frozen_fraction", r.frozen_fraction},
          {"delta_global", r.delta_global},
          {"nonfinite", r.nonfinite},
          {"failure", r.failure},
          {"regime", regime_name(r.regime)},
          {"thresholds",
           {{"t_sens", r.thresholds.t_sens},
            {"t_var", r.thresholds.t_var},
            {"t_frozen", r.thresholds.t_frozen},
            {"t_var_factor", r.thresholds.t_var_factor}}}};
}

json record_object(const RunRecord& r) {
  json j = header(r.config_hash);
  j["seed"] = r.seed;
  j["status"] = status_of(r);
  j["failure"] = r.failure;
  j["failed_step"] = r.diverged ? json(r.failed_step) : json(nullptr);
  j["epochs"] = {{"train_accuracy", r.train_accuracy},
                 {"val_accuracy", r.val_accuracy},
                 {"uncompensated_train_accuracy", r.uncompensated_train_accuracy},
                 {"uncompensated_val_accuracy", r.uncompensated_val_accuracy}};
  j["test"] = {{"compensated_accuracy", r.compensated_accuracy},
               {"compensated_accuracy_std", r.compensated_accuracy_std},
               {"uncompensated_accuracy", r.uncompensated_accuracy},
               {"uncompensated_accuracy_std", r.uncompensated_accuracy_std},
               {"clean_accuracy", r.clean_accuracy},
               {"delta_global", r.delta_global}};
  j["trained_frozen_fraction"] = r.trained_frozen_fraction;
  j["gradient_trace"] = {{"steps", r.steps.size()},
                         {"window", r.trace.window()},
                         {"mean", r.trace_summary.mean},
                         {"std", r.trace_summary.std}};
  if (!r.steps.empty()) j["final_step"] = step_json(r.steps.back());
  j["diagnostics"] = report_object(r.diagnostics);
  return j;
}

std::string opt_number(const std::vector<double>& v, std::size_t i) { return i < v.size() ? format_number(v[i]) : ""; }

}  // namespace

std::string report_json(const DiagnosticsReport& report) { return pretty(report_object(report)); }

std::string run_record_json(const RunRecord& record) { return pretty(record_object(record)); }

std::string trace_csv(const RunRecord& record) {
  CsvWriter csv({"step", "task_loss", "total_loss", "grad_norm", "learning_rate", "rolling_mean", "rolling_std"});
  for (std::size_t i = 0; i < record.steps.size(); ++i) {
    const StepRecord& s = record.steps[i];
    csv.add_row({std::to_string(s.step), format_number(s.task_loss), format_number(s.total_loss),
                 format_number(s.grad_norm), format_number(s.learning_rate),
                 opt_number(record.trace.rolling_mean(), i), opt_number(record.trace.rolling_std(), i)});
  }
  return csv.str();
}

std::string epochs_csv(const RunRecord& record) {
  CsvWriter csv({"epoch", "train_accuracy", "val_accuracy", "uncompensated_train_accuracy",
                 "uncompensated_val_accuracy"});
  const std::size_t n = std::max(record.train_accuracy.size(), record.uncompensated_train_accuracy.size());
  for (std::size_t e = 0; e < n; ++e) {
    csv.add_row({std::to_string(e), opt_number(record.train_accuracy, e), opt_number(record.val_accuracy, e),
                 opt_number(record.uncompensated_train_accuracy, e), opt_number(record.uncompensated_val_accuracy, e)});
  }
  return csv.str();
}

void write_run_outputs(const RunRecord& record, const std::filesystem::path& dir) {
  write_text_file(dir / "run.json", run_record_json(record));
  write_text_file(dir / "trace.csv", trace_csv(record));
  write_text_file(dir / "epochs.csv", epochs_csv(record));
}

// ---- Sweep --------------------------------------------------------------------

bool SweepResult::any_diverged() const {
  for (const auto& p : points)
    if (p.record.diverged) return true;
  return false;
}

SweepResult execute_sweep(const ExperimentConfig& cfg, std::size_t jobs) {
  if (!cfg.sweep) throw ConfigError("sweep: config has no sweep axis");
  SweepResult res;
  res.config_hash = config_hash(cfg);
  res.axis = *cfg.sweep;
  const DatasetSplits data = make_data(cfg);

  const std::size_t n = res.axis.values.size();
  res.points.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    SweepPoint& p = res.points[i];
    p.value = res.axis.values[i];
    p.config = cfg;
    p.config.sweep.reset();
    p.config.seed = cfg.seed ^ static_cast<std::uint64_t>(i);
    apply_axis_value(p.config, res.axis.parameter, p.value);
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      SweepPoint& p = res.points[i];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        p.record = execute_run(p.config, data);
      } catch (const TrainingDivergence& e) {
        p.record = RunRecord{};
        p.record.diverged = true;
        p.record.failed_step = e.step();
        p.record.failure = e.what();
      } catch (const std::exception& e) {
        p.record = RunRecord{};
        p.record.failure = e.what();
      }
      if (p.record.config_hash.empty()) {
        p.record.config_hash = config_hash(p.config);
        p.record.seed = p.config.seed;
        p.record.compensated_accuracy = p.record.uncompensated_accuracy = nan();
        p.record.diagnostics.spec = describe(p.config.eval_perturbations);
        p.record.diagnostics.failure = p.record.failure;
      }
      p.record.wall_clock_seconds = seconds_since(t0);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return res;
}

std::string sweep_csv(const SweepResult& result) {
  CsvWriter csv({result.axis.parameter, "seed", "status", "compensated_accuracy", "uncompensated_accuracy",
                 "grad_norm_mean", "grad_norm_std", "grad_variance", "regime", "frozen_fraction"});
  for (const auto& p : result.points) {
    const RunRecord& r = p.record;
    const bool ran = !r.diagnostics.spec.empty() && r.diagnostics.failure.empty() && status_of(r) != "error";
    csv.add_row({format_number(p.value), std::to_string(r.seed), status_of(r), format_number(r.compensated_accuracy),
                 format_number(r.uncompensated_accuracy),
                 r.trace_summary.empty ? "" : format_number(r.trace_summary.mean),
                 r.trace_summary.empty ? "" : format_number(r.trace_summary.std),
                 ran ? format_number(r.diagnostics.grad_variance) : "", ran ? regime_name(r.diagnostics.regime) : "",
                 ran ? format_number(r.diagnostics.frozen_fraction) : ""});
  }
  return csv.str();
}

std::string sweep_json(const SweepResult& result) {
  json j = header(result.config_hash);
  j["axis"] = {{"parameter", result.axis.parameter}, {"values", result.axis.values}};
  json points = json::array();
  for (std::size_t i = 0; i < result.points.size(); ++i) {
    const RunRecord& r = result.points[i].record;
    char dir[32];
    std::snprintf(dir, sizeof dir, "points/%03zu", i);
    points.push_back({{"index", i},
                      {"value", result.points[i].value},
                      {"seed", r.seed},
                      {"config_hash", r.config_hash},
                      {"status", status_of(r)},
                      {"failure", r.failure},
                      {"record", dir}});
  }
  j["points"] = std::move(points);
  return pretty(j);
}

void write_sweep_outputs(const SweepResult& result, const std::filesystem::path& dir) {
  write_text_file(dir / "sweep.csv", sweep_csv(result));
  write_text_file(dir / "sweep.json", sweep_json(result));
  for (std::size_t i = 0; i < result.points.size(); ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "%03zu", i);
    write_run_outputs(result.points[i].record, dir / "points" / name);
  }
}

// ---- Diagnose -----------------------------------------------------------------

DiagnoseOutput execute_diagnose(const ExperimentConfig& cfg) {
  DiagnoseOutput out;
  out.config_hash = config_hash(cfg);
  const DatasetSplits data = make_data(cfg);
  Reference ref = train_reference(cfg, data);
  out.reference_accuracy = evaluate(ref.model, data.test, {}, RngStream(cfg.seed, "eval"), 1, ref.result.time).accuracy;

  const Batch batch = diagnostic_batch(cfg, data);
  const RngStream rng(cfg.seed, "diagnose");
  out.thresholds = thresholds_for(cfg, ref.model, batch, rng, ref.result.time, &out.baseline_variance);
  if (cfg.eval_perturbations.empty()) {
    out.reports.push_back(diagnose_one(cfg, ref.model, batch, {}, rng.child("spec", 0), out.thresholds, ref.result.time));
  }
  for (std::size_t i = 0; i < cfg.eval_perturbations.size(); ++i) {
    out.reports.push_back(diagnose_one(cfg, ref.model, batch, {cfg.eval_perturbations[i]}, rng.child("spec", i),
                                       out.thresholds, ref.result.time));
  }
  return out;
}

std::string diagnose_json(const DiagnoseOutput& out) {
  json j = header(out.config_hash);
  j["reference_accuracy"] = out.reference_accuracy;
  j["baseline_variance"] = out.baseline_variance;
  j["thresholds"] = {{"t_sens", out.thresholds.t_sens},
                     {"t_var", out.thresholds.t_var},
                     {"t_frozen", out.thresholds.t_frozen},
                     {"t_var_factor", out.thresholds.t_var_factor}};
  json reports = json::array();
  for (const auto& r : out.reports) reports.push_back(report_object(r));
  j["reports"] = std::move(reports);
  return pretty(j);
}

// ---- Calibrate ----------------------------------------------------------------

CalibrateOutput execute_calibrate(const ExperimentConfig& cfg, double target) {
  CalibrateOutput out;
  out.config_hash = config_hash(cfg);
  out.target = target;
  out.family = cfg.family;
  CalibrationConfig cc = cfg.calibration;
  cc.target = target;
  try {
    cc.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }

  const std::size_t idx = find_kind(cfg.eval_perturbations, cfg.family.kind);
  if (idx == cfg.eval_perturbations.size()) {
    throw ConfigError("calibration.family.kind: no " + cfg.family.kind + " entry in eval_perturbations");
  }
  {
    PerturbationSpec probe = cfg.eval_perturbations[idx];
    AxisSetter setter{cfg.family.parameter, 0.5};
    visit_spec(probe, setter);
    if (!setter.found) {
      throw ConfigError("calibration.family.parameter: " + cfg.family.kind + " has no real field '" +
                        cfg.family.parameter + "'");
    }
  }
  const SpecFamily family = [&](double s) {
    std::vector<PerturbationSpec> specs = cfg.eval_perturbations;
    set_field(specs[idx], cfg.family.parameter, s * cfg.family.span);
    return specs;
  };

  const DatasetSplits data = make_data(cfg);
  Reference ref = train_reference(cfg, data);
  const Tensor subset = data.train.head(cc.samples).features;
  try {
    out.result = calibrate_strength(ref.model, subset, family, cc, RngStream(cfg.seed, "calibration"), ref.result.time);
  } catch (const CalibrationError& e) {
    out.failed = true;
    out.failure = e.what();
    out.result.history = e.history();
    out.result.trials_used = static_cast<int>(e.history().size());
  }
  return out;
}

std::string calibrate_json(const CalibrateOutput& out) {
  json j = header(out.config_hash);
  j["target"] = out.target;
  j["family"] = {{"kind", out.family.kind}, {"parameter", out.family.parameter}, {"span", out.family.span}};
  j["status"] = out.failed ? "failed" : (out.result.converged ? "converged" : "best_trial");
  j["failure"] = out.failure;
  j["converged"] = out.result.converged;
  j["trials_used"] = out.result.trials_used;
  if (out.failed) {
    j["s_star"] = nullptr;
    j["value"] = nullptr;
    j["delta"] = nullptr;
  } else {
    j["s_star"] = out.result.s_star;
    j["value"] = out.result.s_star * out.family.span;
    j["delta"] = out.result.delta;
  }
  json hist = json::array();
  for (const auto& t : out.result.history) hist.push_back({{"s", t.s}, {"delta", t.delta}});
  j["history"] = std::move(hist);
  return pretty(j);
}

// ---- Data ---------------------------------------------------------------------

std::string dataset_csv(const Dataset& data) {
  std::vector<std::string> header;
  const std::size_t d = data.dims();
  for (std::size_t j = 0; j < d; ++j) header.push_back("x" + std::to_string(j));
  header.push_back("label");
  CsvWriter csv(std::move(header));
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<std::string> row;
    for (std::size_t j = 0; j < d; ++j) row.push_back(format_number(data.features[i * d + j]));
    row.push_back(std::to_string(data.labels[i]));
    csv.add_row(std::move(row));
  }
  return csv.str();
}

void write_dataset_outputs(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const DatasetSplits data = synth_dataset(cfg.dataset.kind, cfg.dataset.n, cfg.dataset.noise, cfg.seed);
  write_text_file(dir / "train.csv", dataset_csv(data.train));
  write_text_file(dir / "val.csv", dataset_csv(data.val));
  write_text_file(dir / "test.csv", dataset_csv(data.test));
  json j = header(config_hash(cfg));
  j["seed"] = cfg.seed;
  j["dataset"] = {{"kind", dataset_kind_name(cfg.dataset.kind)}, {"n", cfg.dataset.n}, {"noise", cfg.dataset.noise}};
  j["sizes"] = {{"train", data.train.size()}, {"val", data.val.size()}, {"test", data.test.size()}};
  write_text_file(dir / "dataset.json", pretty(j));
}

std::string timing_json(const std::string& command, const std::string& config_hash, double seconds) {
  json j = header(config_hash);
  j["command"] = command;
  j["wall_clock_seconds"] = seconds;
  return pretty(j);
}

}  // namespace hatdiag
