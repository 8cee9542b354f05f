#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "test_util.hpp"

using namespace pglode;

namespace {

// Straightforward rank-h interpolation written from the definition.
double percentile_oracle(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double h = 1.0 + (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = static_cast<std::size_t>(std::ceil(h));
  return v[lo - 1] + (h - std::floor(h)) * (v[hi - 1] - v[lo - 1]);
}

std::vector<RainField> constant_days(const GridSpec& spec, std::size_t n, double value) {
  std::vector<RainField> days;
  for (std::size_t d = 0; d < n; ++d) days.push_back({spec, std::vector<double>(spec.pixels(), value), int(d)});
  return days;
}

}  // namespace

TEST(GridSpec, RejectsEmptyDimensions) {
  EXPECT_THROW(GridSpec(0, 4), ConfigError);
  EXPECT_THROW(GridSpec(4, 0), ConfigError);
  GridSpec g(3, 5, 10.0, 70.0, 0.5);
  EXPECT_EQ(g.pixels(), 15u);
  EXPECT_TRUE(g.same_shape(GridSpec(3, 5)));
  EXPECT_FALSE(g == GridSpec(3, 5));
}

TEST(RainField, ValidateRejectsNegativeAndNonFinite) {
  GridSpec g(2, 2);
  RainField ok{g, {0, 1, 2, 3}, 0};
  EXPECT_NO_THROW(ok.validate());
  RainField neg{g, {0, -1, 2, 3}, 0};
  EXPECT_THROW(neg.validate(), DataError);
  RainField nan{g, {0, std::nan(""), 2, 3}, 0};
  EXPECT_THROW(nan.validate(), DataError);
  RainField short_field{g, {0, 1, 2}, 0};
  EXPECT_THROW(short_field.validate(), DataError);
}

TEST(PredictorStack, ValidateRequiresNonNegativeCape) {
  SplitMix64 rng(1);
  auto s = testutil::random_stack(GridSpec(3, 3), rng);
  for (auto& v : s.channel(Predictor::kCape)) v = std::abs(v);
  EXPECT_NO_THROW(s.validate());
  s.channel(Predictor::kCape)[4] = -1.0;
  EXPECT_THROW(s.validate(), DataError);
  EXPECT_NO_THROW(s.validate(false));
}

TEST(Log1p, Examples) {
  const std::vector<double> in = {0.0, std::numbers::e - 1.0, 100.0};
  const auto out = log1p_transform(in);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_NEAR(out[1], 1.0, 1e-15);
  EXPECT_NEAR(out[2], std::log(101.0), 1e-15);
  EXPECT_NEAR(out[2], 4.6151205168412594, 1e-12);
}

TEST(Log1p, RejectsNegativeAndNonFinite) {
  EXPECT_THROW(log1p_transform(std::vector<double>{-0.5}), DataError);
  EXPECT_THROW(log1p_transform(std::vector<double>{INFINITY}), DataError);
  EXPECT_THROW(inv_log1p(std::vector<double>{std::nan("")}), DataError);
}

TEST(Log1p, InverseExamples) {
  const auto out = inv_log1p(std::vector<double>{0.0, 1.0});
  EXPECT_EQ(out[0], 0.0);
  EXPECT_NEAR(out[1], std::numbers::e - 1.0, 1e-15);
}

TEST(Log1p, StrictlyMonotoneOnRandomPairs) {
  SplitMix64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    double a = rng.uniform(0.0, 1e4), b = rng.uniform(0.0, 1e4);
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    const auto t = log1p_transform(std::vector<double>{a, b});
    EXPECT_LT(t[0], t[1]);
  }
}

TEST(Log1p, RoundTripWithinRelativeTolerance) {
  SplitMix64 rng(12);
  std::vector<double> x(5000);
  for (auto& v : x) v = rng.uniform(0.0, 1e4);
  x[0] = 0.0;
  x[1] = 1e-12;
  const auto back = inv_log1p(log1p_transform(x));
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LE(std::abs(back[i] - x[i]), 1e-9 * std::max(x[i], 1e-300)) << x[i];
  }
}

TEST(Percentile, ConstantFieldGivesConstant) {
  GridSpec g(4, 3);
  const auto thr = compute_threshold_map(constant_days(g, 25, 7.0));
  EXPECT_EQ(thr.source_day_count, 25u);
  for (double v : thr.p95) EXPECT_EQ(v, 7.0);
}

TEST(Percentile, OneToHundredGives9505) {
  GridSpec g(1, 2);
  std::vector<RainField> days;
  for (int d = 1; d <= 100; ++d) days.push_back({g, {double(d), double(101 - d)}, d});
  const auto thr = compute_threshold_map(days);
  EXPECT_NEAR(thr.p95[0], 95.05, 1e-12);
  EXPECT_NEAR(thr.p95[1], 95.05, 1e-12);
}

TEST(Percentile, MatchesSortOracleOnRandomInput) {
  SplitMix64 rng(3);
  GridSpec g(8, 8);
  std::vector<RainField> days;
  for (int d = 0; d < 50; ++d) days.push_back(testutil::random_rain(g, rng, 10.0, d));
  const auto thr = compute_threshold_map(days);
  for (std::size_t i = 0; i < g.pixels(); ++i) {
    std::vector<double> series;
    for (const auto& d : days) series.push_back(d.values[i]);
    EXPECT_EQ(thr.p95[i], percentile_oracle(series, 0.95));
  }
}

TEST(Percentile, InvariantUnderDayShuffle) {
  SplitMix64 rng(4);
  GridSpec g(5, 5);
  std::vector<RainField> days;
  for (int d = 0; d < 30; ++d) days.push_back(testutil::random_rain(g, rng, 10.0, d));
  const auto a = compute_threshold_map(days);
  rng.shuffle(std::span<RainField>(days));
  const auto b = compute_threshold_map(days);
  EXPECT_EQ(a.p95, b.p95);
}

TEST(Percentile, ExceedanceFractionBounded) {
  SplitMix64 rng(5);
  GridSpec g(6, 6);
  std::vector<RainField> days;
  for (int d = 0; d < 40; ++d) days.push_back(testutil::random_rain(g, rng, 10.0, d));
  const auto thr = compute_threshold_map(days);
  for (std::size_t i = 0; i < g.pixels(); ++i) {
    std::size_t above = 0;
    for (const auto& d : days) above += d.values[i] > thr.p95[i];
    EXPECT_LE(double(above) / 40.0, 0.05 + 1.0 / 40.0);
    EXPECT_GE(thr.p95[i], 0.0);
  }
}

TEST(Percentile, Errors) {
  GridSpec g(2, 2);
  EXPECT_THROW(compute_threshold_map(constant_days(g, 19, 1.0)), DataError);
  auto days = constant_days(g, 20, 1.0);
  days[3] = RainField{GridSpec(2, 3), std::vector<double>(6, 1.0), 3};
  EXPECT_THROW(compute_threshold_map(days), DataError);
}

TEST(Tiles, SixtyFourGridGivesFourTiles) {
  const auto p = tile_partition(GridSpec(64, 64), 32);
  ASSERT_EQ(p.tiles.size(), 4u);
  EXPECT_EQ(p.tiles[0], (TileIndex{0, 0, 32, 32}));
  EXPECT_EQ(p.tiles[1], (TileIndex{0, 32, 32, 32}));
  EXPECT_EQ(p.tiles[2], (TileIndex{32, 0, 32, 32}));
  EXPECT_EQ(p.tiles[3], (TileIndex{32, 32, 32, 32}));
  EXPECT_EQ(p.dropped_pixels, 0u);
}

TEST(Tiles, IdentityPartition) {
  const auto p = tile_partition(GridSpec(32, 32), 32);
  ASSERT_EQ(p.tiles.size(), 1u);
  EXPECT_EQ(p.tiles[0], (TileIndex{0, 0, 32, 32}));
}

TEST(Tiles, RemainderDroppedWithWarning) {
  std::vector<std::string> warnings;
  log::set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  const auto p = tile_partition(GridSpec(70, 65), 32);
  log::set_warning_sink({});
  EXPECT_EQ(p.tiles.size(), 4u);
  EXPECT_EQ(p.dropped_pixels, 70u * 65u - 4u * 1024u);
  EXPECT_EQ(p.dropped_pixels, 454u);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Tiles, DisjointAndCoverRetainedRegion) {
  for (auto [h, w, t] : {std::tuple{64, 64, 32}, {70, 65, 32}, {17, 23, 4}, {9, 9, 3}}) {
    log::set_warning_sink([](const std::string&) {});
    const auto p = tile_partition(GridSpec(h, w), t);
    log::set_warning_sink({});
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& tile : p.tiles) {
      EXPECT_EQ(tile.rows, std::size_t(t));
      EXPECT_EQ(tile.cols, std::size_t(t));
      for (std::size_t r = tile.row0; r < tile.row0 + tile.rows; ++r)
        for (std::size_t c = tile.col0; c < tile.col0 + tile.cols; ++c) EXPECT_TRUE(seen.insert({r, c}).second);
    }
    EXPECT_EQ(seen.size(), std::size_t(t * t) * p.tiles.size());
    EXPECT_EQ(seen.size() + p.dropped_pixels, std::size_t(h * w));
  }
}

TEST(Tiles, Errors) {
  EXPECT_THROW(tile_partition(GridSpec(8, 8), 0), ConfigError);
  EXPECT_THROW(tile_partition(GridSpec(8, 40), 32), DataError);
}

TEST(TileMax, Examples) {
  GridSpec g(4, 4);
  const TileIndex all{0, 0, 4, 4};
  EXPECT_EQ(tile_max(std::vector<double>(16, 3.0), g, all), 3.0);
  std::vector<double> spike(16, 0.0);
  spike[9] = 9.9;
  EXPECT_EQ(tile_max(spike, g, all), 9.9);
  EXPECT_THROW(tile_max(spike, g, TileIndex{2, 2, 4, 4}), DataError);
}

TEST(TileMax, MatchesExhaustiveScan) {
  SplitMix64 rng(6);
  GridSpec g(8, 8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(64);
    for (auto& x : v) x = rng.normal();
    const TileIndex tile{rng.below(5), rng.below(5), 4, 4};
    double best = -INFINITY;
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) best = std::max(best, v[(tile.row0 + r) * 8 + tile.col0 + c]);
    EXPECT_EQ(tile_max(v, g, tile), best);
  }
}

TEST(Normalize, Examples) {
  GridSpec g(1, 2);
  PredictorStack s;
  s.spec = g;
  for (auto& ch : s.channels) ch = {0.0, 10.0};
  s.channel(Predictor::kTcwv) = {5.0, 5.0};
  s.channel(Predictor::kCape) = {-1.0, 1.0};
  ChannelStats stats;
  for (std::size_t c = 0; c < kPredictorCount; ++c) stats.mean[c] = 5.0, stats.stddev[c] = 5.0;
  stats.mean[1] = 0.0;
  stats.stddev[1] = 1.0;
  const auto out = normalize_predictors(std::span<const PredictorStack>(&s, 1), stats);
  EXPECT_EQ(out[0].channel(Predictor::kTcwv), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(out[0].channel(Predictor::kCape), (std::vector<double>{-1.0, 1.0}));
  EXPECT_EQ(out[0].channel(Predictor::kOmega500), (std::vector<double>{-1.0, 1.0}));
}

TEST(Normalize, ZeroStddevRejected) {
  GridSpec g(1, 2);
  PredictorStack s;
  s.spec = g;
  for (auto& ch : s.channels) ch = {1.0, 2.0};
  ChannelStats stats;
  for (std::size_t c = 0; c < kPredictorCount; ++c) stats.stddev[c] = 1.0;
  stats.stddev[4] = 0.0;
  EXPECT_THROW(normalize_predictors(std::span<const PredictorStack>(&s, 1), stats), ConfigError);
}

TEST(Normalize, TrainingStatsGiveZeroMeanUnitVariance) {
  SplitMix64 rng(8);
  GridSpec g(5, 5);
  std::vector<PredictorStack> stacks;
  for (int d = 0; d < 10; ++d) {
    auto s = testutil::random_stack(g, rng, d);
    for (auto& ch : s.channels)
      for (auto& v : ch) v = 3.0 + 7.0 * v;
    stacks.push_back(s);
  }
  const auto stats = compute_channel_stats(stacks);
  const auto out = normalize_predictors(stacks, stats);
  for (std::size_t c = 0; c < kPredictorCount; ++c) {
    double sum = 0, sq = 0, n = 0;
    for (const auto& s : out)
      for (double v : s.channels[c]) sum += v, sq += v * v, ++n;
    EXPECT_NEAR(sum / n, 0.0, 1e-12);
    EXPECT_NEAR(sq / n, 1.0, 1e-12);
  }
}
