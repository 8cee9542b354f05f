#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <numeric>

#include "test_util.hpp"

using namespace pglode;
using pglode::ad::Tape;
using pglode::ad::Tensor;
using pglode::ad::Var;

namespace {

struct LossCase {
  GridSpec spec{6, 5};
  std::vector<double> pred;
  RainField target;
  ThresholdMap thr;
};

LossCase random_case(std::uint64_t seed) {
  SplitMix64 rng(seed);
  LossCase c;
  c.target = testutil::random_rain(c.spec, rng);
  c.thr = testutil::random_thresholds(c.spec, rng, 40.0);
  for (std::size_t i = 0; i < c.spec.pixels(); ++i) c.pred.push_back(4.0 * rng.uniform());
  return c;
}

Var as_var(Tape& tape, const GridSpec& spec, const std::vector<double>& v) {
  return tape.constant(Tensor({1, spec.height(), spec.width()}, v));
}

double plain_log_mse(const std::vector<double>& pred, const RainField& target) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = std::log1p(target.values[i]) - pred[i];
    s += r * r;
  }
  return s / double(pred.size());
}

struct TinyRun {
  SampleSet data;
  ThresholdMap thr;
  std::vector<Sample> samples;
};

TinyRun tiny_run(std::size_t side = 16, std::size_t days = 40) {
  TinyRun r;
  r.data = generate(testutil::small_synth(side, days));
  r.thr = compute_threshold_map(r.data.targets);
  r.samples = make_samples(r.data, compute_channel_stats(r.data.predictors), 3, 1);
  return r;
}

LossConfig quick_loss(std::size_t epochs, double lr = 3e-3) {
  LossConfig c;
  c.epochs = epochs;
  c.learning_rate = lr;
  c.batch_size = 4;
  return c;
}

}  // namespace

// Weighted regression loss

TEST(WeightedMse, LambdaOneEqualsPlainMse) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto c = random_case(seed);
    Tape tape;
    const double got = extreme_weighted_mse(as_var(tape, c.spec, c.pred), c.target, c.thr, 1.0).value().item();
    EXPECT_NEAR(got, plain_log_mse(c.pred, c.target), 1e-12);
  }
}

TEST(WeightedMse, NoExceedanceEqualsPlainMse) {
  auto c = random_case(21);
  for (auto& t : c.thr.p95) t = 1e6;
  Tape tape;
  EXPECT_NEAR(extreme_weighted_mse(as_var(tape, c.spec, c.pred), c.target, c.thr, 5.0).value().item(),
              plain_log_mse(c.pred, c.target), 1e-12);
}

TEST(WeightedMse, SingleExtremePixelGivesLambdaRSquaredOverN) {
  const GridSpec spec(4, 5);
  RainField target{spec, std::vector<double>(20, 2.0), 0};
  ThresholdMap thr{spec, std::vector<double>(20, 10.0), 50};
  target.values[7] = 10.0;  // exactly at P95: weight lambda
  std::vector<double> pred = log1p_transform(target);
  const double r = 0.75;
  pred[7] -= r;
  Tape tape;
  const double got = extreme_weighted_mse(as_var(tape, spec, pred), target, thr, 5.0).value().item();
  EXPECT_NEAR(got, 5.0 * r * r / 20.0, 1e-15);
}

TEST(WeightedMse, ExactPredictionIsZero) {
  const auto c = random_case(22);
  Tape tape;
  EXPECT_EQ(extreme_weighted_mse(as_var(tape, c.spec, log1p_transform(c.target)), c.target, c.thr, 5.0).value().item(),
            0.0);
}

TEST(WeightedMse, Errors) {
  const auto c = random_case(23);
  Tape tape;
  EXPECT_THROW((void)extreme_weighted_mse(tape.constant(Tensor({1, 2, 2})), c.target, c.thr, 5.0), DataError);
  auto bad = c.pred;
  bad[3] = std::nan("");
  EXPECT_THROW((void)extreme_weighted_mse(as_var(tape, c.spec, bad), c.target, c.thr, 5.0), NumericalError);
}

TEST(WeightedMse, PixelPermutationInvariance) {
  const auto c = random_case(24);
  std::vector<std::size_t> perm(c.spec.pixels());
  std::iota(perm.begin(), perm.end(), 0);
  SplitMix64 rng(25);
  rng.shuffle(std::span<std::size_t>(perm));
  auto pred = c.pred;
  auto target = c.target;
  auto thr = c.thr;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    pred[i] = c.pred[perm[i]];
    target.values[i] = c.target.values[perm[i]];
    thr.p95[i] = c.thr.p95[perm[i]];
  }
  Tape tape;
  LossConfig cfg;
  const ForecastNodes a{as_var(tape, c.spec, c.pred), ad::sigmoid(as_var(tape, c.spec, c.pred))};
  const ForecastNodes b{as_var(tape, c.spec, pred), ad::sigmoid(as_var(tape, c.spec, pred))};
  EXPECT_NEAR(total_loss(a, c.target, c.thr, cfg).total.value().item(),
              total_loss(b, target, thr, cfg).total.value().item(), 1e-12);
}

// Exceedance BCE

TEST(Bce, PerfectProbabilitiesAreNearZero) {
  const auto c = random_case(26);
  const auto labels = exceedance_labels(c.target, c.thr);
  Tape tape;
  const double got = exceedance_bce(as_var(tape, c.spec, labels), labels).value().item();
  EXPECT_LE(got, 1e-6 * std::abs(std::log(1e-7)));
}

TEST(Bce, HalfProbabilityGivesLn2) {
  const auto c = random_case(27);
  Tape tape;
  const double got =
      exceedance_bce(as_var(tape, c.spec, std::vector<double>(c.spec.pixels(), 0.5)), exceedance_labels(c.target, c.thr))
          .value()
          .item();
  EXPECT_NEAR(got, std::log(2.0), 1e-12);
}

TEST(Bce, MatchesHandSummedLoop) {
  for (std::uint64_t seed = 30; seed < 40; ++seed) {
    SplitMix64 rng(seed);
    const auto c = random_case(seed);
    std::vector<double> prob(c.spec.pixels());
    for (auto& p : prob) p = rng.uniform();
    prob[0] = 0.0;  // exercises the clamp
    const auto labels = exceedance_labels(c.target, c.thr);
    double s = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i) {
      const double p = std::clamp(prob[i], 1e-7, 1.0 - 1e-7);
      s += labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    Tape tape;
    EXPECT_NEAR(exceedance_bce(as_var(tape, c.spec, prob), labels).value().item(), -s / double(prob.size()), 1e-12);
  }
}

TEST(Bce, LabelsUseInclusiveBoundary) {
  const GridSpec spec(1, 3);
  const RainField target{spec, {9.0, 10.0, 11.0}, 0};
  const ThresholdMap thr{spec, {10.0, 10.0, 10.0}, 50};
  EXPECT_EQ(exceedance_labels(target, thr), (std::vector<double>{0.0, 1.0, 1.0}));
}

TEST(Bce, ShapeMismatch) {
  Tape tape;
  EXPECT_THROW((void)exceedance_bce(tape.constant(Tensor({1, 2, 2}, 0.5)), std::vector<double>(3, 1.0)), DataError);
}

// Total loss

TEST(TotalLoss, ZeroBceWeightReducesToWeightedMse) {
  const auto c = random_case(41);
  LossConfig cfg;
  cfg.bce_weight = 0.0;
  Tape tape;
  const Var pred = as_var(tape, c.spec, c.pred);
  const auto terms = total_loss({pred, ad::sigmoid(pred)}, c.target, c.thr, cfg);
  EXPECT_EQ(terms.total.value().item(),
            extreme_weighted_mse(pred, c.target, c.thr, cfg.lambda_extreme).value().item());
}

TEST(TotalLoss, BothComponentsZero) {
  const auto c = random_case(42);
  const auto labels = exceedance_labels(c.target, c.thr);
  LossConfig cfg;
  cfg.bce_weight = 0.0;
  Tape tape;
  const auto terms =
      total_loss({as_var(tape, c.spec, log1p_transform(c.target)), as_var(tape, c.spec, labels)}, c.target, c.thr, cfg);
  EXPECT_EQ(terms.total.value().item(), 0.0);
}

TEST(TotalLoss, GradientPassesFiniteDifferences) {
  const auto c = random_case(43);
  SplitMix64 rng(44);
  const ad::GraphBuilder f = [&c](Tape&, std::span<const Var> v) {
    return total_loss({v[0], ad::sigmoid(v[1])}, c.target, c.thr, LossConfig{}).total;
  };
  const std::vector<Tensor> point = {Tensor({1, 6, 5}, c.pred), testutil::random_tensor({1, 6, 5}, rng)};
  EXPECT_LE(ad::grad_check(f, point), 1e-4);
}

// Optimizer

TEST(Adam, MatchesClosedFormFirstTwoSteps) {
  ParameterSet p;
  p.add("x", Tensor({2}, {1.0, -2.0}));
  Adam adam(p);
  const double lr = 0.01;
  adam.step(p, {Tensor({2}, {0.5, -4.0})}, lr);
  // first step: bias-corrected moments equal g and g^2
  EXPECT_NEAR(p["x"][0], 1.0 - lr * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p["x"][1], -2.0 + lr * 4.0 / (4.0 + 1e-8), 1e-15);
  adam.step(p, {Tensor({2}, {1.5, 0.0})}, lr);
  const double m = 0.9 * 0.05 + 0.1 * 1.5;
  const double v = 0.999 * 0.00025 + 0.001 * 2.25;
  const double mhat = m / (1 - 0.81);
  const double vhat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p["x"][0], 1.0 - lr * 0.5 / (0.5 + 1e-8) - lr * mhat / (std::sqrt(vhat) + 1e-8), 1e-14);
}

// Output bias initialization

TEST(OutputBiases, MatchTrainingClimatology) {
  const auto r = tiny_run();
  const auto model = make_model(ModelKind::kConvLstm, ModelConfig{});
  initialize_output_biases(*model, r.samples, r.thr);
  double log_sum = 0.0, exceed = 0.0, n = 0.0;
  for (const auto& s : r.samples) {
    for (std::size_t i = 0; i < s.target.values.size(); ++i) {
      log_sum += std::log1p(s.target.values[i]);
      exceed += s.target.values[i] >= r.thr.p95[i] ? 1.0 : 0.0;
      n += 1.0;
    }
  }
  EXPECT_NEAR(model->params()["head_intensity.b"][0], log_sum / n, 1e-12);
  EXPECT_NEAR(model->params()["head_prob.b"][0], std::log(exceed / (n - exceed)), 1e-12);
}

// Training loop

TEST(Fit, ZeroLearningRateLeavesParametersUnchanged) {
  const auto r = tiny_run();
  const auto model = make_model(ModelKind::kPgLode, ModelConfig{});
  const auto before = model->params();
  const auto report = fit(*model, r.samples, r.thr, quick_loss(3, 0.0));
  EXPECT_EQ(model->params(), before);
  ASSERT_EQ(report.epochs.size(), 3u);
  EXPECT_EQ(report.epochs[0].total, report.epochs[1].total);
  EXPECT_EQ(report.epochs[1].total, report.epochs[2].total);
}

TEST(Fit, SameSeedGivesIdenticalReports) {
  const auto r = tiny_run();
  auto run = [&] {
    const auto model = make_model(ModelKind::kPgLode, ModelConfig{});
    const auto report = fit(*model, r.samples, r.thr, quick_loss(2));
    return std::make_pair(report.epochs, model->params());
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first.size(), 2u);
}

TEST(Fit, EpochLossIsMeanOfPreUpdateSampleLosses) {
  const auto r = tiny_run();
  const auto model = make_model(ModelKind::kConvLstm, ModelConfig{});
  LossConfig cfg = quick_loss(1);
  cfg.batch_size = r.samples.size();  // one batch: the epoch loss is the loss before the single update
  const auto expected = evaluate_loss(*model, r.samples, r.thr, cfg);
  const auto report = fit(*model, r.samples, r.thr, cfg);
  EXPECT_NEAR(report.epochs[0].total, expected.total, 1e-12);
  EXPECT_NEAR(report.epochs[0].mse, expected.mse, 1e-12);
  EXPECT_NEAR(report.epochs[0].bce, expected.bce, 1e-12);
}

TEST(Fit, TinyLearningRateStepDoesNotIncreaseLoss) {
  const auto r = tiny_run();
  for (auto kind : {ModelKind::kPgLode, ModelKind::kConvLstm}) {
    const auto model = make_model(kind, ModelConfig{});
    const std::span<const Sample> batch(r.samples.data(), 4);
    LossConfig cfg = quick_loss(1, 1e-6);
    const double before = evaluate_loss(*model, batch, r.thr, cfg).total;
    std::vector<const Sample*> ptrs;
    for (const auto& s : batch) ptrs.push_back(&s);
    EpochLoss sums;
    const auto grad = batch_gradient(*model, ptrs, r.thr, cfg, sums);
    Adam adam(model->params());
    adam.step(model->params(), grad, 1e-6);
    EXPECT_LE(evaluate_loss(*model, batch, r.thr, cfg).total, before) << model->name();
  }
}

TEST(Fit, LossDecreasesOverTraining) {
  const auto r = tiny_run();
  const auto model = make_model(ModelKind::kPgLode, ModelConfig{});
  initialize_output_biases(*model, r.samples, r.thr);
  const auto report = fit(*model, r.samples, r.thr, quick_loss(6));
  EXPECT_LT(report.epochs.back().total, report.epochs.front().total);
}

TEST(Fit, OneEpochOnEightDayGridUnderOneMinute) {
  auto cfg = testutil::small_synth(32, 40);
  const auto full = generate(cfg);
  SampleSet eight;
  eight.predictors.assign(full.predictors.begin(), full.predictors.begin() + 8);
  eight.targets.assign(full.targets.begin(), full.targets.begin() + 8);
  eight.extreme_truth.assign(full.extreme_truth.begin(), full.extreme_truth.begin() + 8);
  const auto thr = compute_threshold_map(full.targets);
  const auto samples = make_samples(eight, compute_channel_stats(eight.predictors), 3, 1);
  const auto model = make_model(ModelKind::kPgLode, ModelConfig{});
  const auto start = std::chrono::steady_clock::now();
  const auto report = fit(*model, samples, thr, quick_loss(1));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(seconds, 60.0);
  EXPECT_EQ(report.epochs.size(), 1u);
}

TEST(Fit, DivergenceNamesEpochAndBatch) {
  const auto r = tiny_run();
  const auto model = make_model(ModelKind::kConvLstm, ModelConfig{});
  model->params()["head_intensity.w"][0] = std::nan("");
  try {
    (void)fit(*model, r.samples, r.thr, quick_loss(1));
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 1u);
    EXPECT_EQ(e.batch(), 0u);
  }
}

TEST(Fit, RejectsInvalidConfig) {
  const auto r = tiny_run();
  const auto model = make_model(ModelKind::kConvLstm, ModelConfig{});
  LossConfig cfg = quick_loss(1);
  cfg.lambda_extreme = 0.5;
  EXPECT_THROW((void)fit(*model, r.samples, r.thr, cfg), ConfigError);
  cfg = quick_loss(1);
  cfg.bce_weight = -1.0;
  EXPECT_THROW((void)fit(*model, r.samples, r.thr, cfg), ConfigError);
}

TEST(TrainReport, CsvColumns) {
  TrainReport r;
  r.epochs = {{1, 0.5, 0.25, 0.25}, {2, 0.375, 0.125, 0.25}};
  EXPECT_EQ(r.to_csv(), "epoch,total,mse,bce\n1,0.5,0.25,0.25\n2,0.375,0.125,0.25\n");
}

TEST(Samples, AlignHistoryTargetAndLastObservation) {
  const auto data = generate(testutil::small_synth(8, 40));
  const auto samples = make_samples(data, compute_channel_stats(data.predictors), 3, 2);
  ASSERT_EQ(samples.size(), 40u - 4u);
  EXPECT_EQ(samples[0].target.day_index, 4);
  EXPECT_EQ(samples[0].last_obs.day_index, 2);
  EXPECT_EQ(samples[0].input.history.front().day_index, 0);
  EXPECT_EQ(samples[0].input.history.back().day_index, 2);
}
