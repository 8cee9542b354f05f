#pragma once

// Forecast models sharing one interface:
//   * PgLodeModel   - CNN encoder -> physics-gated latent ODE (RK4) -> decoder
//   * ConvLstmModel - per-day CNN encoder -> ConvLSTM over the history -> decoder
//   * persistence_forecast - yesterday's field
//
// Both learned models emit two [1,H,W] heads: log1p rainfall intensity and
// exceedance probability.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "pglode/autodiff.hpp"
#include "pglode/error.hpp"
#include "pglode/grid.hpp"
#include "pglode/parameters.hpp"
#include "pglode/random.hpp"

namespace pglode {

struct ModelConfig {
  std::size_t history_T = 3;
  std::size_t lead_tau = 1;
  std::size_t latent_channels = 16;
  std::size_t hidden_channels = 32;
  std::size_t convlstm_hidden = 12;  // sized so both learned models have ~equal parameter counts
  std::size_t rk4_steps = 8;
  double beta_init = 0.1;
  std::uint64_t seed = 42;

  void validate() const {
    if (history_T < 1) throw ConfigError("history_T must be >= 1");
    if (lead_tau < 1) throw ConfigError("lead_tau must be >= 1");
    if (rk4_steps < 1) throw ConfigError("rk4_steps must be >= 1");
    if (latent_channels < 1 || hidden_channels < 1 || convlstm_hidden < 1) {
      throw ConfigError("channel counts must be >= 1");
    }
  }
};

/// Normalized predictor history, oldest day first.
struct ModelInput {
  std::vector<PredictorStack> history;
};

struct Forecast {
  GridSpec spec;
  std::vector<double> log_intensity;
  std::vector<double> exceed_prob;
  friend bool operator==(const Forecast&, const Forecast&) = default;
};

/// Forecast heads on a tape, each [1,H,W].
struct ForecastNodes {
  ad::Var log_intensity;
  ad::Var exceed_prob;
};

inline Forecast to_forecast(const GridSpec& spec, const ForecastNodes& nodes) {
  return {spec, nodes.log_intensity.value().vec(), nodes.exceed_prob.value().vec()};
}

// ---------------------------------------------------------------------------
// Input assembly

inline ad::Tensor day_tensor(const PredictorStack& day) {
  const std::size_t n = day.spec.pixels();
  ad::Tensor t({kPredictorCount, day.spec.height(), day.spec.width()});
  for (std::size_t c = 0; c < kPredictorCount; ++c) {
    if (day.channels[c].size() != n) throw DataError("day_tensor: channel size mismatch");
    std::copy(day.channels[c].begin(), day.channels[c].end(), t.vec().begin() + static_cast<std::ptrdiff_t>(c * n));
  }
  return t;
}

/// History days concatenated along channels: [6T, H, W].
inline ad::Tensor history_tensor(const ModelInput& input) {
  if (input.history.empty()) throw DataError("model input: empty history");
  const GridSpec& spec = input.history.front().spec;
  const std::size_t n = spec.pixels();
  ad::Tensor t({kPredictorCount * input.history.size(), spec.height(), spec.width()});
  for (std::size_t d = 0; d < input.history.size(); ++d) {
    if (!input.history[d].spec.same_shape(spec)) {
      throw DataError("model input: history days on different grids");
    }
    const auto day = day_tensor(input.history[d]);
    std::copy(day.vec().begin(), day.vec().end(),
              t.vec().begin() + static_cast<std::ptrdiff_t>(d * kPredictorCount * n));
  }
  return t;
}

/// Normalized CAPE and omega500 of one day as [2, H, W].
inline ad::Tensor physics_tensor(const PredictorStack& day) {
  const std::size_t n = day.spec.pixels();
  ad::Tensor t({2, day.spec.height(), day.spec.width()});
  const auto& cape = day.channel(Predictor::kCape);
  const auto& omega = day.channel(Predictor::kOmega500);
  std::copy(cape.begin(), cape.end(), t.vec().begin());
  std::copy(omega.begin(), omega.end(), t.vec().begin() + static_cast<std::ptrdiff_t>(n));
  return t;
}

// ---------------------------------------------------------------------------
// Building blocks usable on any tape

/// dz/dt = f(z, t) [* gate]. `gate` may be null (ungated).
using LatentField = std::function<ad::Var(const ad::Var& z, double t)>;

/// Classical RK4 on [0, 1] with h = 1/steps; the gate ([1,H',W'] or scalar)
/// multiplies every stage derivative and is constant along the trajectory.
inline ad::Var integrate_gated_rk4(const ad::Var& z0, const LatentField& f, const ad::Var* gate,
                                   std::size_t steps) {
  if (steps < 1) throw ConfigError("integrate_gated_rk4: steps must be >= 1");
  const double h = 1.0 / static_cast<double>(steps);
  auto rate = [&](const ad::Var& z, double t) {
    ad::Var k = f(z, t);
    return gate ? ad::mul(k, *gate) : k;
  };
  ad::Var z = z0;
  for (std::size_t s = 0; s < steps; ++s) {
    const double t = static_cast<double>(s) * h;
    const ad::Var k1 = rate(z, t);
    const ad::Var k2 = rate(ad::add(z, ad::scale(k1, h / 2.0)), t + h / 2.0);
    const ad::Var k3 = rate(ad::add(z, ad::scale(k2, h / 2.0)), t + h / 2.0);
    const ad::Var k4 = rate(ad::add(z, ad::scale(k3, h)), t + h);
    const ad::Var incr = ad::add(ad::add(k1, ad::scale(k2, 2.0)), ad::add(ad::scale(k3, 2.0), k4));
    z = ad::add(z, ad::scale(incr, h / 6.0));
    if (!z.value().all_finite()) {
      throw NumericalError("integrate_gated_rk4: non-finite latent state at step " + std::to_string(s + 1) +
                           " of " + std::to_string(steps));
    }
  }
  return z;
}

/// One ConvLSTM cell update. x [Cx,H,W], h and c [Ch,H,W], weight
/// [4Ch, Cx+Ch, k, k], bias [4Ch]; gate order i, f, o, candidate.
inline std::pair<ad::Var, ad::Var> convlstm_step(const ad::Var& h, const ad::Var& c, const ad::Var& x,
                                                 const ad::Var& weight, const ad::Var& bias) {
  const auto& hs = h.shape();
  if (hs != c.shape()) throw ad::ShapeError(ad::OpKind::kConv2d, hs, c.shape(), "convlstm: h and c must match");
  const std::size_t ch = hs.at(0);
  if (weight.shape().at(0) != 4 * ch) {
    throw ad::ShapeError(ad::OpKind::kConv2d, weight.shape(), hs, "convlstm: weight must produce 4*hidden channels");
  }
  const ad::Var gates = ad::conv2d(ad::concat_channels({x, h}), weight, bias);
  const ad::Var i = ad::sigmoid(ad::slice_channels(gates, 0, ch));
  const ad::Var f = ad::sigmoid(ad::slice_channels(gates, ch, ch));
  const ad::Var o = ad::sigmoid(ad::slice_channels(gates, 2 * ch, ch));
  const ad::Var g = ad::tanh(ad::slice_channels(gates, 3 * ch, ch));
  const ad::Var c_next = ad::add(ad::mul(f, c), ad::mul(i, g));
  const ad::Var h_next = ad::mul(o, ad::tanh(c_next));
  return {h_next, c_next};
}

// ---------------------------------------------------------------------------
// Shared model plumbing

class ForecastModel {
 public:
  virtual ~ForecastModel() = default;

  virtual std::string name() const = 0;
  /// Build both forecast heads on `tape` from bound parameters.
  virtual ForecastNodes build(ad::Tape& tape, const Bindings& params, const ModelInput& input) const = 0;

  const ModelConfig& config() const { return cfg_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }

  /// Inference with all parameters bound as constants.
  Forecast forecast(const ModelInput& input) const {
    ad::Tape tape;
    const Bindings b = bind(tape, params_, false);
    return to_forecast(input.history.at(0).spec, build(tape, b, input));
  }

 protected:
  ForecastModel(ModelConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void add_conv(const std::string& prefix, std::size_t out, std::size_t in, std::size_t k, SplitMix64& rng) {
    params_.add(prefix + ".w", uniform_init({out, in, k, k}, in * k * k, rng));
    params_.add(prefix + ".b", ad::Tensor({out}, 0.0));
  }
  void add_pointwise(const std::string& prefix, std::size_t out, std::size_t in, SplitMix64& rng) {
    params_.add(prefix + ".w", uniform_init({out, in}, in, rng));
    params_.add(prefix + ".b", ad::Tensor({out}, 0.0));
  }

  /// Two (upsample x2 + conv3x3 + relu) blocks, then linear and sigmoid 1x1 heads.
  void add_decoder(std::size_t in_channels, SplitMix64& rng) {
    const std::size_t width = cfg_.latent_channels;
    add_conv("dec1", width, in_channels, 3, rng);
    add_conv("dec2", width, width, 3, rng);
    add_pointwise("head_intensity", 1, width, rng);
    add_pointwise("head_prob", 1, width, rng);
  }

  static ForecastNodes decode_with(const Bindings& p, const ad::Var& z) {
    ad::Var x = ad::relu(ad::conv2d(ad::upsample_nearest(z, 2), p["dec1.w"], p["dec1.b"]));
    x = ad::relu(ad::conv2d(ad::upsample_nearest(x, 2), p["dec2.w"], p["dec2.b"]));
    return {ad::conv1x1(x, p["head_intensity.w"], p["head_intensity.b"]),
            ad::sigmoid(ad::conv1x1(x, p["head_prob.w"], p["head_prob.b"]))};
  }

  /// (conv3x3 + relu + maxpool2) then (conv3x3 + maxpool2): H x W -> H/4 x W/4.
  static ad::Var encode_with(const Bindings& p, const std::string& prefix, const ad::Var& x) {
    const auto& s = x.shape();
    if (s.size() != 3 || s[1] % 4 != 0 || s[2] % 4 != 0) {
      throw DataError("encode: grid " + std::to_string(s.at(1)) + "x" + std::to_string(s.at(2)) +
                      " is not divisible by 4");
    }
    ad::Var y = ad::max_pool(ad::relu(ad::conv2d(x, p[prefix + "1.w"], p[prefix + "1.b"])), 2);
    return ad::max_pool(ad::conv2d(y, p[prefix + "2.w"], p[prefix + "2.b"]), 2);
  }

  void check_input(const ModelInput& input) const {
    if (input.history.size() != cfg_.history_T) {
      throw DataError(name() + ": expected " + std::to_string(cfg_.history_T) + " history days, got " +
                      std::to_string(input.history.size()));
    }
  }

  ModelConfig cfg_;
  ParameterSet params_;
};

// ---------------------------------------------------------------------------
// PG-LODE

class PgLodeModel : public ForecastModel {
 public:
  static constexpr const char* kName = "pg-lode";

  explicit PgLodeModel(ModelConfig cfg) : ForecastModel(cfg) {
    SplitMix64 rng(cfg_.seed);
    const std::size_t latent = cfg_.latent_channels;
    add_conv("enc1", latent, kPredictorCount * cfg_.history_T, 3, rng);
    add_conv("enc2", latent, latent, 3, rng);
    params_.add("gate.w", uniform_range({1, 2}, 0.01, rng));
    params_.add("gate.b", ad::Tensor({1}, 0.0));
    params_.add("gate.beta", ad::Tensor::scalar(cfg_.beta_init));
    add_conv("ode1", cfg_.hidden_channels, latent + 1, 3, rng);
    add_conv("ode2", latent, cfg_.hidden_channels, 3, rng);
    add_decoder(latent, rng);
  }

  std::string name() const override { return kName; }

  /// z(0) as [L, H/4, W/4].
  ad::Var encode(ad::Tape& tape, const Bindings& p, const ModelInput& input) const {
    check_input(input);
    return encode_with(p, "enc", tape.constant(history_tensor(input)));
  }

  /// G = 1 + sigmoid(conv1x1([CAPE, omega] avg-pooled 4x4)) * beta, shape [1, H/4, W/4].
  ad::Var physics_gate(ad::Tape& tape, const Bindings& p, const PredictorStack& last_day) const {
    return physics_gate(tape.constant(physics_tensor(last_day)), p["gate.w"], p["gate.b"], p["gate.beta"]);
  }

  static ad::Var physics_gate(const ad::Var& phys, const ad::Var& w, const ad::Var& b, const ad::Var& beta) {
    if (phys.shape().size() != 3 || phys.shape()[0] != 2) {
      throw ad::ShapeError(ad::OpKind::kConv1x1, phys.shape(), "physics input must be [2,H,W] (CAPE, omega500)");
    }
    const ad::Var pooled = ad::avg_pool(phys, 4);
    return ad::add_scalar(ad::mul(ad::sigmoid(ad::conv1x1(pooled, w, b)), beta), 1.0);
  }

  /// f(z, t): conv3x3 -> tanh -> conv3x3 on [z, t] (t as a constant channel).
  ad::Var latent_derivative(const Bindings& p, const ad::Var& z, double t) const {
    const auto& s = z.shape();
    const ad::Var time = z.tape().constant(ad::Tensor({1, s.at(1), s.at(2)}, t));
    const ad::Var hidden = ad::tanh(ad::conv2d(ad::concat_channels({z, time}), p["ode1.w"], p["ode1.b"]));
    return ad::conv2d(hidden, p["ode2.w"], p["ode2.b"]);
  }

  ad::Var integrate(const Bindings& p, const ad::Var& z0, const ad::Var* gate) const {
    return integrate_gated_rk4(z0, [&](const ad::Var& z, double t) { return latent_derivative(p, z, t); }, gate,
                               cfg_.rk4_steps);
  }

  ForecastNodes decode(const Bindings& p, const ad::Var& z1) const { return decode_with(p, z1); }

  ForecastNodes build(ad::Tape& tape, const Bindings& p, const ModelInput& input) const override {
    return build(tape, p, input, true);
  }

  /// `gated = false` drops the gate branch entirely (plain latent ODE).
  ForecastNodes build(ad::Tape& tape, const Bindings& p, const ModelInput& input, bool gated) const {
    const ad::Var z0 = encode(tape, p, input);
    if (!gated) return decode(p, integrate(p, z0, nullptr));
    const ad::Var gate = physics_gate(tape, p, input.history.back());
    return decode(p, integrate(p, z0, &gate));
  }

  Forecast forecast_ungated(const ModelInput& input) const {
    ad::Tape tape;
    const Bindings b = bind(tape, params_, false);
    return to_forecast(input.history.at(0).spec, build(tape, b, input, false));
  }
};

// ---------------------------------------------------------------------------
// ConvLSTM baseline

class ConvLstmModel : public ForecastModel {
 public:
  static constexpr const char* kName = "convlstm";

  explicit ConvLstmModel(ModelConfig cfg) : ForecastModel(cfg) {
    SplitMix64 rng(cfg_.seed);
    const std::size_t latent = cfg_.latent_channels;
    const std::size_t hidden = cfg_.convlstm_hidden;
    add_conv("enc1", latent, kPredictorCount, 3, rng);
    add_conv("enc2", latent, latent, 3, rng);
    add_conv("cell", 4 * hidden, latent + hidden, 3, rng);
    add_decoder(hidden, rng);
  }

  std::string name() const override { return kName; }

  ForecastNodes build(ad::Tape& tape, const Bindings& p, const ModelInput& input) const override {
    check_input(input);
    const auto& spec = input.history.front().spec;
    if (spec.height() % 4 != 0 || spec.width() % 4 != 0) {
      throw DataError("encode: grid " + spec.describe() + " is not divisible by 4");
    }
    const ad::Shape state{cfg_.convlstm_hidden, spec.height() / 4, spec.width() / 4};
    ad::Var h = tape.constant(ad::Tensor(state, 0.0));
    ad::Var c = tape.constant(ad::Tensor(state, 0.0));
    for (const auto& day : input.history) {
      const ad::Var x = encode_with(p, "enc", tape.constant(day_tensor(day)));
      std::tie(h, c) = convlstm_step(h, c, x, p["cell.w"], p["cell.b"]);
    }
    return decode_with(p, h);
  }
};

enum class ModelKind { kPgLode, kConvLstm };

inline ModelKind parse_model_kind(std::string_view name) {
  if (name == PgLodeModel::kName) return ModelKind::kPgLode;
  if (name == ConvLstmModel::kName) return ModelKind::kConvLstm;
  throw ConfigError("unknown model '" + std::string(name) + "' (valid: pg-lode, convlstm)");
}

inline std::unique_ptr<ForecastModel> make_model(ModelKind kind, const ModelConfig& cfg) {
  if (kind == ModelKind::kPgLode) return std::make_unique<PgLodeModel>(cfg);
  return std::make_unique<ConvLstmModel>(cfg);
}

// ---------------------------------------------------------------------------
// Persistence

inline Forecast persistence_forecast(const RainField& last_obs, const ThresholdMap& thresholds) {
  if (!last_obs.spec.same_shape(thresholds.spec) || last_obs.values.size() != thresholds.p95.size()) {
    throw DataError("persistence_forecast: grid mismatch (" + last_obs.spec.describe() + " vs " +
                    thresholds.spec.describe() + ")");
  }
  Forecast f{last_obs.spec, log1p_transform(last_obs), std::vector<double>(last_obs.values.size())};
  for (std::size_t i = 0; i < last_obs.values.size(); ++i) {
    f.exceed_prob[i] = last_obs.values[i] > thresholds.p95[i] ? 1.0 : 0.0;
  }
  return f;
}

}  // namespace pglode
