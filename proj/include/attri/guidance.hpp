#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attri/attention.hpp"
#include "attri/errors.hpp"
#include "attri/grid.hpp"
#include "attri/tokenizer.hpp"

namespace attri {

enum class StepRule { plain_gradient, adaptive_moment };

inline std::string to_string(StepRule r) {
  return r == StepRule::plain_gradient ? "plain-gradient" : "adaptive-moment";
}

inline StepRule parse_step_rule(std::string_view s) {
  if (s == "plain-gradient") return StepRule::plain_gradient;
  if (s == "adaptive-moment") return StepRule::adaptive_moment;
  throw ConfigError("unknown step rule \"" + std::string(s) + "\"");
}

/// Latent-optimization settings. Defaults: 50 denoising steps, the first half guided, one AdamW
/// update per guided step at learning rate 0.01.
struct GuidanceConfig {
  int total_steps = 50;
  double guided_fraction = 0.5;
  StepRule step_rule = StepRule::adaptive_moment;
  double learning_rate = 0.01;
  int updates_per_timestep = 1;
  double epsilon = 1e-8;
  // adaptive-moment parameters
  double beta1 = 0.9;
  double beta2 = 0.999;
  double moment_epsilon = 1e-8;
  double weight_decay = 0.0;
  bool enabled = true;
  AggregationPolicy aggregation;

  friend bool operator==(const GuidanceConfig&, const GuidanceConfig&) = default;
};

inline void validate(const GuidanceConfig& c) {
  if (c.total_steps < 1) throw ConfigError("total_steps must be positive");
  if (!(c.guided_fraction > 0.0 && c.guided_fraction <= 1.0)) throw ConfigError("guided_fraction must lie in (0, 1]");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) {
    throw ConfigError("learning_rate must be finite and non-negative");
  }
  if (c.updates_per_timestep < 1) throw ConfigError("updates_per_timestep must be at least 1");
  if (!(c.epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ConfigError("moment decay rates must lie in [0, 1)");
  }
  if (!(c.moment_epsilon > 0.0) || !(c.weight_decay >= 0.0)) {
    throw ConfigError("moment_epsilon must be positive and weight_decay non-negative");
  }
  if (c.aggregation.target.cells() == 0) throw ConfigError("aggregation target resolution must be positive");
}

inline nlohmann::ordered_json to_json(const GuidanceConfig& c) {
  nlohmann::ordered_json j;
  j["total_steps"] = c.total_steps;
  j["guided_fraction"] = c.guided_fraction;
  j["step_rule"] = to_string(c.step_rule);
  j["learning_rate"] = c.learning_rate;
  j["updates_per_timestep"] = c.updates_per_timestep;
  j["epsilon"] = c.epsilon;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["moment_epsilon"] = c.moment_epsilon;
  j["weight_decay"] = c.weight_decay;
  j["enabled"] = c.enabled;
  j["aggregation"] = {{"layers", c.aggregation.layers},
                      {"target_resolution", {c.aggregation.target.height, c.aggregation.target.width}},
                      {"min_max", c.aggregation.min_max}};
  return j;
}

/// Reads a config; absent keys keep the values of `base`.
template <class Json>
GuidanceConfig guidance_config_from_json(const Json& j, GuidanceConfig base = {}) {
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("total_steps", base.total_steps);
    get("guided_fraction", base.guided_fraction);
    if (j.contains("step_rule")) base.step_rule = parse_step_rule(j.at("step_rule").template get<std::string>());
    get("learning_rate", base.learning_rate);
    get("updates_per_timestep", base.updates_per_timestep);
    get("epsilon", base.epsilon);
    get("beta1", base.beta1);
    get("beta2", base.beta2);
    get("moment_epsilon", base.moment_epsilon);
    get("weight_decay", base.weight_decay);
    get("enabled", base.enabled);
    if (j.contains("aggregation")) {
      const auto& a = j.at("aggregation");
      if (a.contains("layers")) a.at("layers").get_to(base.aggregation.layers);
      if (a.contains("target_resolution")) {
        const auto& r = a.at("target_resolution");
        base.aggregation.target = {r.at(0).template get<std::size_t>(), r.at(1).template get<std::size_t>()};
      }
      if (a.contains("min_max")) a.at("min_max").get_to(base.aggregation.min_max);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed guidance config: ") + e.what());
  }
  validate(base);
  return base;
}

/// Guided scheduler steps: the first ceil(fraction * total) of 1..total, 1 being the noisiest.
inline std::vector<int> make_schedule(const GuidanceConfig& config) {
  validate(config);
  const double raw = config.guided_fraction * config.total_steps;
  // guards against products like 0.3 * 10 = 3.0000000000000004
  auto count = static_cast<int>(std::ceil(raw - 1e-9 * config.total_steps));
  count = std::clamp(count, 1, config.total_steps);
  std::vector<int> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = i + 1;
  return out;
}

struct LatentState {
  Tensor3 tensor;
  int timestep_index = 0;
};

struct DenoiserOutput {
  Tensor3 noise;
  RawAttention attention;  // conditional branch only
};

/// What a host pipeline exposes to the guidance loop. Attention must be differentiable in the
/// latent; attention_vjp returns dL/d(latent) for an upstream dL/d(attention). Identical inputs
/// must give identical outputs.
template <class A>
concept DenoiserAdapter = requires(const A& a, const LatentState& s, std::string_view prompt,
                                   const RawAttention& upstream, const Tensor3& noise, std::uint64_t seed) {
  { a.latent_shape() } -> std::convertible_to<LatentShape>;
  { a.tokenize(prompt) } -> std::convertible_to<std::vector<SubToken>>;
  { a.initial_latent(seed) } -> std::convertible_to<Tensor3>;
  { a.predict(s, prompt) } -> std::convertible_to<DenoiserOutput>;
  { a.attention_vjp(s, prompt, upstream) } -> std::convertible_to<Tensor3>;
  { a.scheduler_step(s, noise, 1) } -> std::convertible_to<Tensor3>;
};

/// Type-erased adapter base for backends discovered at run time.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::string name() const = 0;
  virtual LatentShape latent_shape() const = 0;
  virtual std::vector<SubToken> tokenize(std::string_view prompt) const = 0;
  virtual Tensor3 initial_latent(std::uint64_t seed) const = 0;
  virtual DenoiserOutput predict(const LatentState& state, std::string_view prompt) const = 0;
  virtual Tensor3 attention_vjp(const LatentState& state, std::string_view prompt,
                                const RawAttention& upstream) const = 0;
  virtual Tensor3 scheduler_step(const LatentState& state, const Tensor3& noise, int total_steps) const = 0;
  /// Aggregation resolution the backend's attention is meaningful at, if it prefers one.
  virtual std::optional<Resolution> native_resolution() const { return std::nullopt; }
  /// Whether distinct runs may call this instance from several threads at once.
  virtual bool concurrent() const { return false; }
};

static_assert(DenoiserAdapter<Denoiser>);

/// Name -> factory registry so host pipelines plug in without this library depending on them.
class BackendRegistry {
 public:
  using Factory = std::function<std::unique_ptr<Denoiser>(const nlohmann::json& options)>;

  static BackendRegistry& instance() {
    static BackendRegistry registry;
    return registry;
  }

  void add(std::string name, Factory factory) { factories_[std::move(name)] = std::move(factory); }
  bool contains(std::string_view name) const { return factories_.find(name) != factories_.end(); }

  std::unique_ptr<Denoiser> create(std::string_view name, const nlohmann::json& options = {}) const {
    const auto it = factories_.find(name);
    if (it == factories_.end()) throw ConfigError("unknown backend \"" + std::string(name) + "\"");
    return it->second(options);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : factories_) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, Factory, std::less<>> factories_;
};

/// Latent update rule: plain gradient descent, or AdamW-style adaptive moments.
class LatentOptimizer {
 public:
  explicit LatentOptimizer(const GuidanceConfig& config) : config_(config) {}

  void reset() {
    first_.clear();
    second_.clear();
    steps_ = 0;
  }

  int steps() const noexcept { return steps_; }

  Tensor3 step(const Tensor3& latent, const Tensor3& grad) {
    if (latent.shape != grad.shape) throw ShapeMismatch("gradient shape differs from latent shape");
    Tensor3 out = latent;
    const double lr = config_.learning_rate;
    if (config_.step_rule == StepRule::plain_gradient) {
      for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= lr * grad.values[i];
      ++steps_;
      return out;
    }
    if (first_.empty()) {
      first_.assign(grad.size(), 0.0);
      second_.assign(grad.size(), 0.0);
    }
    ++steps_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, steps_);
    const double c2 = 1.0 - std::pow(b2, steps_);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double g = grad.values[i];
      first_[i] = b1 * first_[i] + (1.0 - b1) * g;
      second_[i] = b2 * second_[i] + (1.0 - b2) * g * g;
      out.values[i] *= 1.0 - lr * config_.weight_decay;
      out.values[i] -= lr * (first_[i] / c1) / (std::sqrt(second_[i] / c2) + config_.moment_epsilon);
    }
    return out;
  }

 private:
  GuidanceConfig config_;
  std::vector<double> first_;
  std::vector<double> second_;
  int steps_ = 0;
};

struct TraceRecord {
  int timestep_index = 0;
  double loss = 0.0;
  std::vector<PairIou> pair_iou;
  double grad_norm = 0.0;
  bool applied = false;
  std::string event;  // empty unless something noteworthy happened
};

struct GuidanceTrace {
  std::vector<TraceRecord> records;
};

inline nlohmann::ordered_json to_json(const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["timestep_index"] = r.timestep_index;
  j["loss"] = r.loss;
  auto pairs = nlohmann::ordered_json::array();
  for (const auto& p : r.pair_iou) {
    pairs.push_back({{"attribute", p.pair.attribute},
                     {"object", p.pair.object},
                     {"polarity", p.positive ? "positive" : "negative"},
                     {"iou", p.iou}});
  }
  j["pair_iou"] = std::move(pairs);
  j["grad_norm"] = r.grad_norm;
  j["applied"] = r.applied;
  if (!r.event.empty()) j["event"] = r.event;
  return j;
}

/// One JSON object per line, one line per denoising step.
inline std::string to_jsonl(const GuidanceTrace& trace) {
  std::string out;
  for (const auto& r : trace.records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline GuidanceTrace trace_from_jsonl(std::string_view text) {
  GuidanceTrace trace;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (text::trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line);
    TraceRecord r;
    r.timestep_index = j.at("timestep_index").get<int>();
    r.loss = j.at("loss").get<double>();
    for (const auto& p : j.at("pair_iou")) {
      r.pair_iou.push_back({{p.at("attribute").get<std::string>(), p.at("object").get<std::string>()},
                            p.at("polarity").get<std::string>() == "positive",
                            p.at("iou").get<double>()});
    }
    r.grad_norm = j.at("grad_norm").get<double>();
    r.applied = j.at("applied").get<bool>();
    if (j.contains("event")) r.event = j.at("event").get<std::string>();
    trace.records.push_back(std::move(r));
  }
  return trace;
}

/// Raised when a backend call fails inside the denoising loop.
class AdapterFailure : public Error {
 public:
  AdapterFailure(int timestep, const std::string& what)
      : Error("denoiser failed at timestep " + std::to_string(timestep) + ": " + what), timestep_(timestep) {}
  int timestep() const noexcept { return timestep_; }

 private:
  int timestep_;
};

/// Token spans for every word the pairs name, via the adapter's own tokenization.
template <DenoiserAdapter A>
std::vector<TokenSpan> pair_spans(const A& adapter, std::string_view prompt, const AttributePairSet& pairs) {
  const auto tokens = adapter.tokenize(prompt);
  const auto spans = align_tokens(prompt, tokens);
  return resolve_spans(spans, pairs.words());
}

struct PairMeasurement {
  double loss = 0.0;
  std::vector<PairIou> pair_iou;

  double mean_iou(bool positive) const {
    double s = 0.0;
    int n = 0;
    for (const auto& p : pair_iou) {
      if (p.positive == positive) {
        s += p.iou;
        ++n;
      }
    }
    return n ? s / n : 0.0;
  }
};

template <DenoiserAdapter A>
PairMeasurement measure_pairs(const A& adapter, const LatentState& state, std::string_view prompt,
                              const AttributePairSet& pairs, std::span<const TokenSpan> spans,
                              const GuidanceConfig& config) {
  if (pairs.empty()) return {};
  const auto out = adapter.predict(state, prompt);
  const auto maps = aggregate_attention(out.attention, spans, config.aggregation);
  const auto r = attri_loss_with_grad(maps, pairs, config.epsilon);
  return {r.loss, r.pair_iou};
}

struct GuidanceStepResult {
  LatentState state;
  double loss = 0.0;
  std::vector<PairIou> pair_iou;
  double grad_norm = 0.0;
  bool applied = false;
  std::string event;
};

/// Loss and its gradient with respect to the latent, through the adapter's attention.
struct LatentGradient {
  AttriLossResult loss;
  Tensor3 gradient;
};

template <DenoiserAdapter A>
LatentGradient attri_loss_latent_gradient(const A& adapter, const LatentState& state, std::string_view prompt,
                                          const AttributePairSet& pairs, std::span<const TokenSpan> spans,
                                          const GuidanceConfig& config) {
  const auto out = adapter.predict(state, prompt);
  const auto maps = aggregate_attention(out.attention, spans, config.aggregation);
  auto loss = attri_loss_with_grad(maps, pairs, config.epsilon);
  const auto upstream = aggregate_attention_vjp(out.attention, spans, config.aggregation, loss.gradient);
  return {std::move(loss), adapter.attention_vjp(state, prompt, upstream)};
}

/// One latent update z' = z - step(grad L). A non-finite gradient or update leaves the latent
/// untouched and is reported through `event`.
template <DenoiserAdapter A>
GuidanceStepResult guidance_step(const LatentState& state, const A& adapter, std::string_view prompt,
                                  const AttributePairSet& pairs, std::span<const TokenSpan> spans,
                                  const GuidanceConfig& config, LatentOptimizer& optimizer) {
  const auto schedule = make_schedule(config);
  if (std::find(schedule.begin(), schedule.end(), state.timestep_index) == schedule.end()) {
    throw ConfigError("timestep " + std::to_string(state.timestep_index) + " is outside the guided schedule");
  }
  auto [loss, grad] = attri_loss_latent_gradient(adapter, state, prompt, pairs, spans, config);
  GuidanceStepResult result{state, loss.loss, std::move(loss.pair_iou), 0.0, false, {}};
  if (!all_finite(grad.values)) {
    result.event = "non-finite gradient; update skipped";
    return result;
  }
  result.grad_norm = l2_norm(grad.values);
  auto next = optimizer.step(state.tensor, grad);
  if (!all_finite(next.values)) {
    result.event = "non-finite update; update skipped";
    return result;
  }
  result.state.tensor = std::move(next);
  result.applied = true;
  return result;
}

struct GuidedRun {
  LatentState initial;
  LatentState final_state;
  GuidanceTrace trace;
};

/// Full denoising loop for one scene. Guided steps apply `updates_per_timestep` latent updates
/// with fresh optimizer moments, then the scheduler transition runs on the updated latent.
template <DenoiserAdapter A>
GuidedRun run_guided_denoise(const A& adapter, std::string_view prompt, const AttributePairSet& pairs,
                             const GuidanceConfig& config, std::uint64_t seed,
                             std::optional<Tensor3> initial_latent = std::nullopt) {
  validate(config);
  if (config.enabled) validate_pair_set(pairs);
  const auto schedule = make_schedule(config);
  const auto spans = pair_spans(adapter, prompt, pairs);

  LatentState state{initial_latent ? std::move(*initial_latent) : adapter.initial_latent(seed), 1};
  if (state.tensor.shape != adapter.latent_shape()) throw ShapeMismatch("initial latent does not match the backend");
  GuidedRun run{state, {}, {}};
  LatentOptimizer optimizer(config);

  for (int t = 1; t <= config.total_steps; ++t) {
    state.timestep_index = t;
    TraceRecord record;
    record.timestep_index = t;
    const bool guided = config.enabled && !pairs.empty() &&
                        std::binary_search(schedule.begin(), schedule.end(), t);
    try {
      DenoiserOutput out;
      if (guided) {
        optimizer.reset();
        for (int u = 0; u < config.updates_per_timestep; ++u) {
          auto step = guidance_step(state, adapter, prompt, pairs, spans, config, optimizer);
          if (u == 0) {
            record.loss = step.loss;
            record.pair_iou = step.pair_iou;
            record.grad_norm = step.grad_norm;
          }
          record.applied = record.applied || step.applied;
          if (!step.event.empty()) record.event = step.event;
          state = std::move(step.state);
        }
        out = adapter.predict(state, prompt);
      } else {
        out = adapter.predict(state, prompt);
        if (!pairs.empty()) {
          const auto maps = aggregate_attention(out.attention, spans, config.aggregation);
          auto r = attri_loss_with_grad(maps, pairs, config.epsilon);
          record.loss = r.loss;
          record.pair_iou = std::move(r.pair_iou);
        }
      }
      state.tensor = adapter.scheduler_step(state, out.noise, config.total_steps);
    } catch (const Error& e) {
      if (dynamic_cast<const AdapterFailure*>(&e)) throw;
      if (dynamic_cast<const WordNotFound*>(&e) || dynamic_cast<const MissingMap*>(&e)) throw;
      throw AdapterFailure(t, e.what());
    } catch (const std::exception& e) {
      throw AdapterFailure(t, e.what());
    }
    if (!all_finite(state.tensor.values)) throw AdapterFailure(t, "scheduler produced a non-finite latent");
    run.trace.records.push_back(std::move(record));
  }
  state.timestep_index = config.total_steps;
  run.final_state = std::move(state);
  return run;
}

}  // namespace attri
