#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pglode/autodiff.hpp"
#include "pglode/error.hpp"
#include "pglode/grid.hpp"
#include "pglode/models.hpp"
#include "pglode/parameters.hpp"
#include "pglode/random.hpp"
#include "pglode/synthgen.hpp"

namespace pglode {

struct LossConfig {
  double lambda_extreme = 5.0;
  double bce_weight = 1.0;
  double learning_rate = 1e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 42;

  void validate() const {
    if (!(lambda_extreme >= 1.0)) throw ConfigError("lambda_extreme must be >= 1");
    if (!(bce_weight >= 0.0)) throw ConfigError("bce_weight must be >= 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

inline constexpr double kProbClamp = 1e-7;

// ---------------------------------------------------------------------------
// Losses

namespace detail {

inline void check_pixels(const char* what, const ad::Var& pred, std::size_t expected) {
  if (pred.value().size() != expected) {
    throw DataError(std::string(what) + ": prediction has " + std::to_string(pred.value().size()) +
                    " values, target grid has " + std::to_string(expected));
  }
}

}  // namespace detail

/// (1/N) sum w (log1p(y) - pred)^2 with w = lambda where raw y >= P95, else 1.
inline ad::Var extreme_weighted_mse(const ad::Var& pred_log, const RainField& target,
                                    const ThresholdMap& thr, double lambda) {
  const std::size_t n = target.values.size();
  detail::check_pixels("extreme_weighted_mse", pred_log, n);
  if (!target.spec.same_shape(thr.spec) || thr.p95.size() != n) {
    throw DataError("extreme_weighted_mse: threshold grid " + thr.spec.describe() + " does not match target " +
                    target.spec.describe());
  }
  if (!pred_log.value().all_finite()) throw NumericalError("extreme_weighted_mse: non-finite prediction");
  ad::Tape& tape = pred_log.tape();
  ad::Tensor weights(pred_log.shape());
  for (std::size_t i = 0; i < n; ++i) weights[i] = target.values[i] >= thr.p95[i] ? lambda : 1.0;
  const ad::Var target_log = tape.constant(ad::Tensor(pred_log.shape(), log1p_transform(target)));
  const ad::Var residual = ad::sub(target_log, pred_log);
  return ad::mean(ad::mul(tape.constant(std::move(weights)), ad::mul(residual, residual)));
}

/// Exceedance labels y >= P95 (the same boundary rule as the loss weights).
inline std::vector<double> exceedance_labels(const RainField& target, const ThresholdMap& thr) {
  std::vector<double> labels(target.values.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = target.values[i] >= thr.p95[i] ? 1.0 : 0.0;
  return labels;
}

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
inline ad::Var exceedance_bce(const ad::Var& prob, const std::vector<double>& labels) {
  detail::check_pixels("exceedance_bce", prob, labels.size());
  ad::Tape& tape = prob.tape();
  const ad::Var p = ad::clamp(prob, kProbClamp, 1.0 - kProbClamp);
  const ad::Var y = tape.constant(ad::Tensor(prob.shape(), labels));
  const ad::Var one_minus_y = tape.constant(ad::Tensor(prob.shape(), [&] {
    std::vector<double> v(labels.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 - labels[i];
    return v;
  }()));
  const ad::Var log_p = ad::log(p);
  const ad::Var log_q = ad::log(ad::add_scalar(ad::scale(p, -1.0), 1.0));
  return ad::scale(ad::mean(ad::add(ad::mul(y, log_p), ad::mul(one_minus_y, log_q))), -1.0);
}

struct LossTerms {
  ad::Var total;
  ad::Var mse;
  ad::Var bce;
};

/// Weighted log-space MSE + bce_weight * BCE of the exceedance head.
inline LossTerms total_loss(const ForecastNodes& forecast, const RainField& target, const ThresholdMap& thr,
                            const LossConfig& cfg) {
  const ad::Var mse = extreme_weighted_mse(forecast.log_intensity, target, thr, cfg.lambda_extreme);
  const ad::Var bce = exceedance_bce(forecast.exceed_prob, exceedance_labels(target, thr));
  return {ad::add(mse, ad::scale(bce, cfg.bce_weight)), mse, bce};
}

// ---------------------------------------------------------------------------
// Samples

/// One forecast case: normalized history, the target day and the last observed rainfall.
struct Sample {
  ModelInput input;
  RainField target;
  RainField last_obs;
};

/// Target day d uses predictors d-tau-T+1 .. d-tau and last observation d-tau.
inline std::vector<Sample> make_samples(const SampleSet& set, const ChannelStats& stats, std::size_t history_T,
                                        std::size_t lead_tau) {
  const auto normalized = normalize_predictors(set.predictors, stats);
  const std::size_t first = history_T + lead_tau - 1;
  std::vector<Sample> samples;
  for (std::size_t d = first; d < set.days(); ++d) {
    Sample s;
    for (std::size_t k = d - first; k <= d - lead_tau; ++k) s.input.history.push_back(normalized[k]);
    s.target = set.targets[d];
    s.last_obs = set.targets[d - lead_tau];
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw DataError("make_samples: dataset too short for the requested history and lead");
  return samples;
}

/// Set the intensity head bias to the mean log1p target and the probability
/// head bias to the logit of the exceedance rate over `samples`, so training
/// starts from the climatological forecast instead of fitting the offset.
inline void initialize_output_biases(ForecastModel& model, std::span<const Sample> samples, const ThresholdMap& thr) {
  if (samples.empty()) throw DataError("initialize_output_biases: no samples");
  double log_sum = 0.0;
  double exceed = 0.0;
  std::size_t count = 0;
  for (const auto& s : samples) {
    for (double v : log1p_transform(s.target)) log_sum += v;
    for (double v : exceedance_labels(s.target, thr)) exceed += v;
    count += s.target.values.size();
  }
  const double n = static_cast<double>(count);
  const double rate = std::clamp(exceed / n, 1e-4, 1.0 - 1e-4);
  model.params()["head_intensity.b"][0] = log_sum / n;
  model.params()["head_prob.b"][0] = std::log(rate / (1.0 - rate));
}

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit Adam(const ParameterSet& params) {
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.value.shape(), 0.0);
      v_.emplace_back(e.value.shape(), 0.0);
    }
  }

  void step(ParameterSet& params, const std::vector<ad::Tensor>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& value = params.entries()[k].value;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grads[k][i];
        m_[k][i] = kBeta1 * m_[k][i] + (1.0 - kBeta1) * g;
        v_[k][i] = kBeta2 * v_[k][i] + (1.0 - kBeta2) * g * g;
        value[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + kEps);
      }
    }
  }

 private:
  std::vector<ad::Tensor> m_;
  std::vector<ad::Tensor> v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct EpochLoss {
  std::size_t epoch = 0;
  double total = 0.0;
  double mse = 0.0;
  double bce = 0.0;
  friend bool operator==(const EpochLoss&, const EpochLoss&) = default;
};

struct TrainReport {
  std::vector<EpochLoss> epochs;
  std::string checkpoint;  // path of the saved checkpoint, if any
  double seconds = 0.0;

  /// CSV with columns epoch,total,mse,bce (17 significant digits).
  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,total,mse,bce\n";
    for (const auto& e : epochs) out << e.epoch << ',' << e.total << ',' << e.mse << ',' << e.bce << '\n';
    return out.str();
  }
};

class DivergenceError : public NumericalError {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch)
      : NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                       std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

using EpochCallback = std::function<void(const EpochLoss&)>;

/// Mean loss terms over samples for the current parameters (no update).
inline EpochLoss evaluate_loss(const ForecastModel& model, std::span<const Sample> samples, const ThresholdMap& thr,
                               const LossConfig& cfg) {
  EpochLoss acc;
  for (const auto& s : samples) {
    ad::Tape tape;
    const Bindings b = bind(tape, model.params(), false);
    const auto terms = total_loss(model.build(tape, b, s.input), s.target, thr, cfg);
    acc.total += terms.total.value().item();
    acc.mse += terms.mse.value().item();
    acc.bce += terms.bce.value().item();
  }
  const auto n = static_cast<double>(samples.size());
  acc.total /= n;
  acc.mse /= n;
  acc.bce /= n;
  return acc;
}

/// Gradient of the mean total loss over `batch`, plus the summed loss terms.
inline std::vector<ad::Tensor> batch_gradient(const ForecastModel& model, std::span<const Sample* const> batch,
                                              const ThresholdMap& thr, const LossConfig& cfg, EpochLoss& sums) {
  std::vector<ad::Tensor> grad;
  for (const auto& e : model.params().entries()) grad.emplace_back(e.value.shape(), 0.0);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const Sample* s : batch) {
    ad::Tape tape;
    const Bindings b = bind(tape, model.params());
    const auto terms = total_loss(model.build(tape, b, s->input), s->target, thr, cfg);
    tape.backward(terms.total);
    const auto g = collect_grads(b);
    for (std::size_t k = 0; k < grad.size(); ++k) {
      for (std::size_t i = 0; i < grad[k].size(); ++i) grad[k][i] += inv * g[k][i];
    }
    sums.total += terms.total.value().item();
    sums.mse += terms.mse.value().item();
    sums.bce += terms.bce.value().item();
  }
  return grad;
}

/// Adam over minibatches in one fixed seeded permutation of the samples.
/// Reported epoch losses are sample means taken before each batch update.
inline TrainReport fit(ForecastModel& model, std::span<const Sample> samples, const ThresholdMap& thr,
                       const LossConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (samples.empty()) throw DataError("fit: no training samples");
  const auto start = std::chrono::steady_clock::now();
  std::vector<const Sample*> order;
  for (const auto& s : samples) order.push_back(&s);
  SplitMix64 rng(cfg.seed ^ 0x5DEECE66DULL);
  rng.shuffle(std::span<const Sample*>(order));

  Adam adam(model.params());
  TrainReport report;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLoss sums{epoch, 0.0, 0.0, 0.0};
    std::size_t batch_index = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++batch_index) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const std::span<const Sample* const> batch(order.data() + b, e - b);
      const double before = sums.total;
      std::vector<ad::Tensor> grad;
      try {
        grad = batch_gradient(model, batch, thr, cfg, sums);
      } catch (const DivergenceError&) {
        throw;
      } catch (const NumericalError&) {
        throw DivergenceError(epoch, batch_index);
      }
      bool finite = std::isfinite(sums.total - before);
      for (const auto& g : grad) finite = finite && g.all_finite();
      if (!finite) throw DivergenceError(epoch, batch_index);
      adam.step(model.params(), grad, cfg.learning_rate);
    }
    const auto n = static_cast<double>(samples.size());
    EpochLoss mean{epoch, sums.total / n, sums.mse / n, sums.bce / n};
    report.epochs.push_back(mean);
    if (on_epoch) on_epoch(mean);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace pglode
