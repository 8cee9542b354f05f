#pragma once

// Grid data types shared by every stage of the pipeline: rainfall fields,
// predictor stacks, per-pixel climatological thresholds and tiling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pglode/error.hpp"
#include "pglode/log.hpp"

namespace pglode {

/// Pixel dimensions plus geographic metadata. The geographic fields are
/// carried through files but never used in computation.
class GridSpec {
 public:
  GridSpec() = default;
  GridSpec(std::size_t height, std::size_t width, double lat0 = 0.0, double lon0 = 0.0,
           double cell_deg = 0.25)
      : height_(height), width_(width), lat0_(lat0), lon0_(lon0), cell_deg_(cell_deg) {
    if (height < 1 || width < 1) {
      throw ConfigError("GridSpec: height and width must be >= 1 (got " + std::to_string(height) +
                        "x" + std::to_string(width) + ")");
    }
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t pixels() const { return height_ * width_; }
  double lat0() const { return lat0_; }
  double lon0() const { return lon0_; }
  double cell_deg() const { return cell_deg_; }

  /// Pixel dimensions only; metadata does not participate in compatibility.
  bool same_shape(const GridSpec& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }
  friend bool operator==(const GridSpec&, const GridSpec&) = default;

  std::string describe() const { return std::to_string(height_) + "x" + std::to_string(width_); }

 private:
  std::size_t height_ = 1;
  std::size_t width_ = 1;
  double lat0_ = 0.0;
  double lon0_ = 0.0;
  double cell_deg_ = 0.25;
};

/// Fixed order of the six predictor channels.
enum class Predictor : std::size_t { kTcwv = 0, kCape, kOmega500, kU850, kV850, kSp };
inline constexpr std::size_t kPredictorCount = 6;
inline constexpr std::array<std::string_view, kPredictorCount> kPredictorNames = {
    "TCWV", "CAPE", "omega500", "u850", "v850", "SP"};

/// Single-day rainfall in mm/day, row-major.
struct RainField {
  GridSpec spec;
  std::vector<double> values;
  int day_index = 0;

  double at(std::size_t row, std::size_t col) const { return values[row * spec.width() + col]; }

  void validate() const {
    if (values.size() != spec.pixels()) {
      throw DataError("RainField: expected " + std::to_string(spec.pixels()) + " values, got " +
                      std::to_string(values.size()));
    }
    for (double v : values) {
      if (!std::isfinite(v) || v < 0.0) {
        throw DataError("RainField: values must be finite and non-negative");
      }
    }
  }
  friend bool operator==(const RainField&, const RainField&) = default;
};

/// Six named predictor channels for one day.
struct PredictorStack {
  GridSpec spec;
  std::array<std::vector<double>, kPredictorCount> channels;
  int day_index = 0;

  std::vector<double>& channel(Predictor p) { return channels[static_cast<std::size_t>(p)]; }
  const std::vector<double>& channel(Predictor p) const {
    return channels[static_cast<std::size_t>(p)];
  }

  /// `require_cape_nonnegative` is false for normalized stacks.
  void validate(bool require_cape_nonnegative = true) const {
    for (std::size_t c = 0; c < kPredictorCount; ++c) {
      if (channels[c].size() != spec.pixels()) {
        throw DataError("PredictorStack: channel " + std::string(kPredictorNames[c]) +
                        " has wrong length");
      }
      for (double v : channels[c]) {
        if (!std::isfinite(v)) throw DataError("PredictorStack: non-finite value");
      }
    }
    if (require_cape_nonnegative) {
      for (double v : channel(Predictor::kCape)) {
        if (v < 0.0) throw DataError("PredictorStack: CAPE must be >= 0");
      }
    }
  }
  friend bool operator==(const PredictorStack&, const PredictorStack&) = default;
};

inline constexpr std::size_t kMinThresholdDays = 20;

/// Per-pixel 95th percentile of training-day rainfall (mm/day).
struct ThresholdMap {
  GridSpec spec;
  std::vector<double> p95;
  std::size_t source_day_count = 0;

  double at(std::size_t row, std::size_t col) const { return p95[row * spec.width() + col]; }
};

/// A rectangular block of pixels.
struct TileIndex {
  std::size_t row0 = 0;
  std::size_t col0 = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  friend bool operator==(const TileIndex&, const TileIndex&) = default;
};

struct TilePartition {
  std::vector<TileIndex> tiles;
  std::size_t dropped_pixels = 0;
};

// ---------------------------------------------------------------------------
// Target transform

inline std::vector<double> log1p_transform(std::span<const double> values) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (!std::isfinite(v) || v < 0.0) {
      throw DataError("log1p_transform: value at index " + std::to_string(i) +
                      " is negative or non-finite");
    }
    out[i] = std::log1p(v);
  }
  return out;
}

inline std::vector<double> log1p_transform(const RainField& field) {
  return log1p_transform(std::span<const double>(field.values));
}

inline std::vector<double> inv_log1p(std::span<const double> transformed) {
  std::vector<double> out(transformed.size());
  for (std::size_t i = 0; i < transformed.size(); ++i) {
    if (!std::isfinite(transformed[i])) {
      throw DataError("inv_log1p: non-finite value at index " + std::to_string(i));
    }
    out[i] = std::expm1(transformed[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Climatology

/// Linear interpolation between order statistics: rank h = 1 + (n-1) q.
/// `sorted` must be ascending and non-empty.
inline double interpolated_percentile(std::span<const double> sorted, double q) {
  const std::size_t n = sorted.size();
  const double h = 1.0 + static_cast<double>(n - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = static_cast<std::size_t>(std::ceil(h));
  const double frac = h - std::floor(h);
  const double vlo = sorted[std::min(lo, n) - 1];
  const double vhi = sorted[std::min(hi, n) - 1];
  return vlo + frac * (vhi - vlo);
}

inline ThresholdMap compute_threshold_map(std::span<const RainField> training_rain) {
  if (training_rain.size() < kMinThresholdDays) {
    throw DataError("compute_threshold_map: need at least " + std::to_string(kMinThresholdDays) +
                    " days, got " + std::to_string(training_rain.size()));
  }
  const GridSpec spec = training_rain.front().spec;
  for (const auto& day : training_rain) {
    if (!day.spec.same_shape(spec) || day.values.size() != spec.pixels()) {
      throw DataError("compute_threshold_map: grid mismatch (" + day.spec.describe() + " vs " +
                      spec.describe() + ")");
    }
  }
  ThresholdMap map{spec, std::vector<double>(spec.pixels()), training_rain.size()};
  std::vector<double> series(training_rain.size());
  for (std::size_t p = 0; p < spec.pixels(); ++p) {
    for (std::size_t d = 0; d < training_rain.size(); ++d) series[d] = training_rain[d].values[p];
    std::sort(series.begin(), series.end());
    map.p95[p] = interpolated_percentile(series, 0.95);
  }
  return map;
}

// ---------------------------------------------------------------------------
// Tiling

/// Row-major full tiles; trailing rows/cols that do not fill a tile are dropped.
inline TilePartition tile_partition(const GridSpec& spec, std::size_t tile_size) {
  if (tile_size < 1) throw ConfigError("tile_partition: tile_size must be >= 1");
  if (spec.height() < tile_size || spec.width() < tile_size) {
    throw DataError("tile_partition: grid " + spec.describe() + " is smaller than one " +
                    std::to_string(tile_size) + "x" + std::to_string(tile_size) + " tile");
  }
  TilePartition part;
  const std::size_t tile_rows = spec.height() / tile_size;
  const std::size_t tile_cols = spec.width() / tile_size;
  for (std::size_t r = 0; r < tile_rows; ++r) {
    for (std::size_t c = 0; c < tile_cols; ++c) {
      part.tiles.push_back({r * tile_size, c * tile_size, tile_size, tile_size});
    }
  }
  part.dropped_pixels = spec.pixels() - part.tiles.size() * tile_size * tile_size;
  if (part.dropped_pixels > 0) {
    log::warn("tile_partition: grid " + spec.describe() + " not divisible by tile size " +
              std::to_string(tile_size) + "; dropping " + std::to_string(part.dropped_pixels) +
              " pixels");
  }
  return part;
}

inline void check_tile_bounds(const GridSpec& spec, const TileIndex& tile) {
  if (tile.rows == 0 || tile.cols == 0 || tile.row0 + tile.rows > spec.height() ||
      tile.col0 + tile.cols > spec.width()) {
    throw DataError("tile at (" + std::to_string(tile.row0) + "," + std::to_string(tile.col0) +
                    ") size " + std::to_string(tile.rows) + "x" + std::to_string(tile.cols) +
                    " is outside grid " + spec.describe());
  }
}

inline double tile_max(std::span<const double> values, const GridSpec& spec, const TileIndex& tile) {
  check_tile_bounds(spec, tile);
  if (values.size() != spec.pixels()) throw DataError("tile_max: array size does not match grid");
  double best = values[tile.row0 * spec.width() + tile.col0];
  for (std::size_t r = tile.row0; r < tile.row0 + tile.rows; ++r) {
    for (std::size_t c = tile.col0; c < tile.col0 + tile.cols; ++c) {
      best = std::max(best, values[r * spec.width() + c]);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Predictor normalization

struct ChannelStats {
  std::array<double, kPredictorCount> mean{};
  std::array<double, kPredictorCount> stddev{};
};

/// Population mean/stddev per channel over every pixel of every stack.
inline ChannelStats compute_channel_stats(std::span<const PredictorStack> stacks) {
  if (stacks.empty()) throw DataError("compute_channel_stats: no stacks");
  ChannelStats stats;
  for (std::size_t c = 0; c < kPredictorCount; ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : stacks) {
      for (double v : s.channels[c]) sum += v;
      n += s.channels[c].size();
    }
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& s : stacks) {
      for (double v : s.channels[c]) ss += (v - mean) * (v - mean);
    }
    stats.mean[c] = mean;
    stats.stddev[c] = std::sqrt(ss / static_cast<double>(n));
  }
  return stats;
}

inline std::vector<PredictorStack> normalize_predictors(std::span<const PredictorStack> stacks,
                                                        const ChannelStats& stats) {
  for (std::size_t c = 0; c < kPredictorCount; ++c) {
    if (!(stats.stddev[c] > 0.0) || !std::isfinite(stats.stddev[c])) {
      throw ConfigError("normalize_predictors: channel " + std::string(kPredictorNames[c]) +
                        " has zero standard deviation");
    }
  }
  std::vector<PredictorStack> out(stacks.begin(), stacks.end());
  for (auto& s : out) {
    for (std::size_t c = 0; c < kPredictorCount; ++c) {
      for (double& v : s.channels[c]) v = (v - stats.mean[c]) / stats.stddev[c];
    }
  }
  return out;
}

}  // namespace pglode
