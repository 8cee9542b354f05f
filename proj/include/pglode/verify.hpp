#pragma once

// Two-tier categorical verification: pixel-level contingency against the
// intensity head, and tile-level event detection against the probability head.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pglode/error.hpp"
#include "pglode/grid.hpp"
#include "pglode/models.hpp"

namespace pglode {

struct ContingencyCounts {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t false_alarms = 0;
  std::uint64_t correct_negatives = 0;

  std::uint64_t total() const { return hits + misses + false_alarms + correct_negatives; }

  ContingencyCounts& operator+=(const ContingencyCounts& o) {
    hits += o.hits;
    misses += o.misses;
    false_alarms += o.false_alarms;
    correct_negatives += o.correct_negatives;
    return *this;
  }
  friend ContingencyCounts operator+(ContingencyCounts a, const ContingencyCounts& b) { return a += b; }
  friend bool operator==(const ContingencyCounts&, const ContingencyCounts&) = default;

  void tally(bool predicted, bool observed) {
    if (predicted && observed) ++hits;
    else if (observed) ++misses;
    else if (predicted) ++false_alarms;
    else ++correct_negatives;
  }
};

/// A skill score; std::nullopt when its denominator is zero.
using Score = std::optional<double>;

struct SkillScores {
  Score pod;
  Score far;
  Score csi;
};

namespace detail {
inline Score ratio(double num, double den) {
  if (den == 0.0) return std::nullopt;
  return num / den;
}
}  // namespace detail

/// H / (H + M)
inline Score pod(double h, double m) { return detail::ratio(h, h + m); }
/// F / (H + F)
inline Score far(double h, double f) { return detail::ratio(f, h + f); }
/// H / (H + M + F)
inline Score csi(double h, double m, double f) { return detail::ratio(h, h + m + f); }

inline Score pod(const ContingencyCounts& c) { return pod(static_cast<double>(c.hits), static_cast<double>(c.misses)); }
inline Score far(const ContingencyCounts& c) {
  return far(static_cast<double>(c.hits), static_cast<double>(c.false_alarms));
}
inline Score csi(const ContingencyCounts& c) {
  return csi(static_cast<double>(c.hits), static_cast<double>(c.misses), static_cast<double>(c.false_alarms));
}
inline SkillScores skill(const ContingencyCounts& c) { return {pod(c), far(c), csi(c)}; }

/// CSI implied by published (POD, FAR): H = POD, M = 1 - POD, F = POD * FAR / (1 - FAR).
inline Score csi_from_pod_far(double pod_value, double far_value) {
  if (far_value >= 1.0) return std::nullopt;
  return csi(pod_value, 1.0 - pod_value, pod_value * far_value / (1.0 - far_value));
}

namespace detail {

inline void check_verification_grids(const char* what, const Forecast& f, const RainField& obs,
                                     const ThresholdMap& thr) {
  const std::size_t n = obs.values.size();
  if (!obs.spec.same_shape(thr.spec) || !obs.spec.same_shape(f.spec) || f.log_intensity.size() != n ||
      f.exceed_prob.size() != n || thr.p95.size() != n) {
    throw DataError(std::string(what) + ": grid mismatch between forecast (" + f.spec.describe() +
                    "), observation (" + obs.spec.describe() + ") and thresholds (" + thr.spec.describe() + ")");
  }
}

}  // namespace detail

/// Predicted: expm1(log_intensity) >= P95. Observed: obs > P95 (strict).
inline ContingencyCounts pixel_contingency(const Forecast& forecast, const RainField& obs, const ThresholdMap& thr) {
  detail::check_verification_grids("pixel_contingency", forecast, obs, thr);
  const auto intensity = inv_log1p(forecast.log_intensity);
  ContingencyCounts c;
  for (std::size_t i = 0; i < obs.values.size(); ++i) {
    c.tally(intensity[i] >= thr.p95[i], obs.values[i] > thr.p95[i]);
  }
  return c;
}

/// Tile probability = max pixel exceed_prob; predicted when > 0.5.
/// Observed event when any pixel in the tile has obs > P95.
inline ContingencyCounts tile_contingency(const Forecast& forecast, const RainField& obs, const ThresholdMap& thr,
                                          std::span<const TileIndex> tiles) {
  detail::check_verification_grids("tile_contingency", forecast, obs, thr);
  const std::size_t w = obs.spec.width();
  ContingencyCounts c;
  for (const auto& tile : tiles) {
    check_tile_bounds(obs.spec, tile);
    double prob = 0.0;
    bool event = false;
    for (std::size_t r = tile.row0; r < tile.row0 + tile.rows; ++r) {
      for (std::size_t col = tile.col0; col < tile.col0 + tile.cols; ++col) {
        const std::size_t i = r * w + col;
        prob = std::max(prob, forecast.exceed_prob[i]);
        event = event || obs.values[i] > thr.p95[i];
      }
    }
    c.tally(prob > 0.5, event);
  }
  return c;
}

/// Max exceedance probability over one tile.
inline double tile_probability(const Forecast& forecast, const TileIndex& tile) {
  return tile_max(forecast.exceed_prob, forecast.spec, tile);
}

// ---------------------------------------------------------------------------
// Reports

enum class Tier { kPixel, kTile };

inline const char* tier_name(Tier t) { return t == Tier::kPixel ? "pixel" : "tile"; }

struct ReportRow {
  std::string model;
  Tier tier = Tier::kPixel;
  ContingencyCounts counts;
  SkillScores scores;
};

/// Pooled pixel and tile counts over all days (not day-averaged).
inline std::vector<ReportRow> evaluate_model(const std::string& model, std::span<const Forecast> forecasts,
                                             std::span<const RainField> obs, const ThresholdMap& thr,
                                             std::span<const TileIndex> tiles) {
  if (forecasts.empty()) throw DataError("evaluate_model: empty evaluation split");
  if (forecasts.size() != obs.size()) {
    throw DataError("evaluate_model: " + std::to_string(forecasts.size()) + " forecasts for " +
                    std::to_string(obs.size()) + " observations");
  }
  ContingencyCounts pixel, tile;
  for (std::size_t d = 0; d < forecasts.size(); ++d) {
    pixel += pixel_contingency(forecasts[d], obs[d], thr);
    tile += tile_contingency(forecasts[d], obs[d], thr, tiles);
  }
  return {{model, Tier::kPixel, pixel, skill(pixel)}, {model, Tier::kTile, tile, skill(tile)}};
}

inline constexpr const char* kReportHeader = "model,tier,pod,far,csi,hits,misses,false_alarms,correct_negatives";
inline constexpr const char* kUndefinedScore = "—";

inline std::string format_score(const Score& s) {
  if (!s) return kUndefinedScore;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", *s);
  return buf;
}

inline std::string report_csv(std::span<const ReportRow> rows) {
  std::ostringstream out;
  out << kReportHeader << '\n';
  for (const auto& r : rows) {
    out << r.model << ',' << tier_name(r.tier) << ',' << format_score(r.scores.pod) << ','
        << format_score(r.scores.far) << ',' << format_score(r.scores.csi) << ',' << r.counts.hits << ','
        << r.counts.misses << ',' << r.counts.false_alarms << ',' << r.counts.correct_negatives << '\n';
  }
  return out.str();
}

/// Parsed report line; scores keep the printed (3-decimal) values.
struct ParsedReportRow {
  std::string model;
  std::string tier;
  Score pod, far, csi;
  ContingencyCounts counts;
};

inline std::vector<ParsedReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw DataError("report: missing or unexpected header");
  auto score = [](const std::string& s) -> Score {
    if (s == kUndefinedScore) return std::nullopt;
    return std::stod(s);
  };
  std::vector<ParsedReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw DataError("report: expected 9 fields in '" + line + "'");
    rows.push_back({f[0], f[1], score(f[2]), score(f[3]), score(f[4]),
                    {std::stoull(f[5]), std::stoull(f[6]), std::stoull(f[7]), std::stoull(f[8])}});
  }
  return rows;
}

}  // namespace pglode
