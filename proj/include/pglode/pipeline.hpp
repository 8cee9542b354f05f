#pragma once

// Experiment plumbing shared by the command-line tool and the test suites:
// dataset split, thresholds from the training days, training, evaluation
// against persistence, and the single-tile case study.

#include <algorithm>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "pglode/checkpoint.hpp"
#include "pglode/config.hpp"
#include "pglode/grid.hpp"
#include "pglode/models.hpp"
#include "pglode/svg.hpp"
#include "pglode/synthgen.hpp"
#include "pglode/training.hpp"
#include "pglode/verify.hpp"

namespace pglode {

struct Experiment {
  SampleSet train;
  SampleSet eval;
  ThresholdMap thresholds;  // from training days only
  std::vector<TileIndex> tiles;
};

inline Experiment prepare_experiment(const SampleSet& data, const RunConfig& cfg) {
  auto [train, eval] = split(data, cfg.train_frac);
  Experiment ex;
  ex.thresholds = compute_threshold_map(train.targets);
  ex.tiles = tile_partition(data.spec(), cfg.tile_size).tiles;
  ex.train = std::move(train);
  ex.eval = std::move(eval);
  return ex;
}

inline std::size_t planted_extreme_count(const SampleSet& set) {
  std::size_t n = 0;
  for (const auto& day : set.extreme_truth)
    for (auto v : day) n += v;
  return n;
}

struct TrainOutcome {
  std::unique_ptr<ForecastModel> model;
  TrainReport report;
  Checkpoint checkpoint;
};

inline TrainOutcome train_model(const Experiment& ex, ModelKind kind, const RunConfig& cfg,
                                const EpochCallback& on_epoch = {}) {
  const auto mcfg = cfg.model_config();
  const auto stats = compute_channel_stats(ex.train.predictors);
  const auto samples = make_samples(ex.train, stats, mcfg.history_T, mcfg.lead_tau);
  TrainOutcome out;
  out.model = make_model(kind, mcfg);
  initialize_output_biases(*out.model, samples, ex.thresholds);
  out.report = fit(*out.model, samples, ex.thresholds, cfg.loss_config(), on_epoch);
  out.checkpoint = make_checkpoint(*out.model, ex.train.spec(), stats);
  return out;
}

/// Forecasts for eval target days [first, eval.days()), one per day.
inline std::vector<Forecast> forecast_eval_days(const Checkpoint& ck, const Experiment& ex, std::size_t first) {
  const auto& spec = ex.eval.spec();
  if (ck.grid_height != spec.height() || ck.grid_width != spec.width()) {
    throw DataError("checkpoint grid " + std::to_string(ck.grid_height) + "x" + std::to_string(ck.grid_width) +
                    " does not match dataset grid " + spec.describe());
  }
  const auto model = restore_model(ck);
  const auto& mc = ck.config;
  const auto samples = make_samples(ex.eval, ck.stats, mc.history_T, mc.lead_tau);
  const std::size_t own_first = mc.history_T + mc.lead_tau - 1;
  std::vector<Forecast> out;
  for (std::size_t d = first; d < ex.eval.days(); ++d) out.push_back(model->forecast(samples[d - own_first].input));
  return out;
}

inline std::size_t first_eval_day(const RunConfig& cfg, std::span<const Checkpoint> checkpoints) {
  std::size_t first = cfg.model.lead_tau;
  for (const auto& ck : checkpoints) first = std::max(first, ck.config.history_T + ck.config.lead_tau - 1);
  return first;
}

struct EvaluationResult {
  std::vector<ReportRow> rows;  // persistence first, then checkpoints in the given order
  std::size_t eval_days = 0;
};

inline EvaluationResult evaluate_experiment(const Experiment& ex, const RunConfig& cfg,
                                            std::span<const Checkpoint> checkpoints) {
  const std::size_t tau = cfg.model.lead_tau;
  const std::size_t first = first_eval_day(cfg, checkpoints);
  if (first >= ex.eval.days()) throw DataError("evaluation split too short for the model history and lead");
  const std::vector<RainField> obs(ex.eval.targets.begin() + static_cast<std::ptrdiff_t>(first), ex.eval.targets.end());

  EvaluationResult result;
  result.eval_days = obs.size();
  std::vector<Forecast> persistence;
  for (std::size_t d = first; d < ex.eval.days(); ++d) {
    persistence.push_back(persistence_forecast(ex.eval.targets[d - tau], ex.thresholds));
  }
  auto append = [&](const std::vector<ReportRow>& rows) { result.rows.insert(result.rows.end(), rows.begin(), rows.end()); };
  append(evaluate_model("persistence", persistence, obs, ex.thresholds, ex.tiles));
  for (const auto& ck : checkpoints) {
    append(evaluate_model(ck.model, forecast_eval_days(ck, ex, first), obs, ex.thresholds, ex.tiles));
  }
  return result;
}

/// Grouped bars of TILE-POD / TILE-FAR / TILE-CSI per model; undefined scores are omitted.
inline std::string report_svg(std::span<const ReportRow> rows) {
  std::vector<std::string> series;
  std::vector<svg::BarGroup> groups = {{"TILE-POD", {}}, {"TILE-FAR", {}}, {"TILE-CSI", {}}};
  for (const auto& r : rows) {
    if (r.tier != Tier::kTile) continue;
    series.push_back(r.model);
    groups[0].values.push_back(r.scores.pod.value_or(-1.0));
    groups[1].values.push_back(r.scores.far.value_or(-1.0));
    groups[2].values.push_back(r.scores.csi.value_or(-1.0));
  }
  return svg::bar_chart("Tile-level verification", series, groups);
}

struct CaseStudyRequest {
  std::size_t tile_row = 0;     // tile position in the tile grid
  std::size_t tile_col = 0;
  long center_day = -1;         // eval-split day index; negative = day of the largest observed tile max
  std::size_t window = 12;
};

struct CaseStudyRow {
  int day = 0;                  // absolute dataset day index
  double observed = 0.0;
  double persistence = 0.0;
  std::vector<double> model_max;
  std::vector<double> model_prob;
};

struct CaseStudy {
  std::vector<std::string> models;
  std::vector<CaseStudyRow> rows;

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(9);
    out << "day,observed,persistence";
    for (const auto& m : models) out << ',' << m << "_max," << m << "_prob";
    out << '\n';
    for (const auto& r : rows) {
      out << r.day << ',' << r.observed << ',' << r.persistence;
      for (std::size_t k = 0; k < models.size(); ++k) out << ',' << r.model_max[k] << ',' << r.model_prob[k];
      out << '\n';
    }
    return out.str();
  }

  std::string to_svg(const std::string& title) const {
    std::vector<int> xs;
    std::vector<svg::Line> lines = {{"observed", {}}, {"persistence", {}}};
    for (const auto& m : models) lines.push_back({m, {}});
    for (const auto& r : rows) {
      xs.push_back(r.day);
      lines[0].values.push_back(r.observed);
      lines[1].values.push_back(r.persistence);
      for (std::size_t k = 0; k < models.size(); ++k) lines[2 + k].values.push_back(r.model_max[k]);
    }
    return svg::line_plot(title, xs, lines, "tile max rainfall (mm/day)");
  }
};

inline CaseStudy case_study(const Experiment& ex, const RunConfig& cfg, std::span<const Checkpoint> checkpoints,
                            const CaseStudyRequest& req) {
  const auto& spec = ex.eval.spec();
  const std::size_t tiles_per_row = spec.width() / cfg.tile_size;
  const std::size_t tiles_per_col = spec.height() / cfg.tile_size;
  if (req.tile_row >= tiles_per_col || req.tile_col >= tiles_per_row) {
    throw ConfigError("tile (" + std::to_string(req.tile_row) + ", " + std::to_string(req.tile_col) +
                      ") outside the " + std::to_string(tiles_per_col) + "x" + std::to_string(tiles_per_row) +
                      " tile grid");
  }
  if (req.window < 1) throw ConfigError("case-study window must be >= 1");
  const TileIndex tile = ex.tiles[req.tile_row * tiles_per_row + req.tile_col];
  const std::size_t tau = cfg.model.lead_tau;
  const std::size_t first = first_eval_day(cfg, checkpoints);
  const std::size_t n = ex.eval.days();

  std::size_t center = 0;
  if (req.center_day < 0) {
    double best = -1.0;
    for (std::size_t d = first; d < n; ++d) {
      const double m = tile_max(ex.eval.targets[d].values, spec, tile);
      if (m > best) best = m, center = d;
    }
  } else {
    center = static_cast<std::size_t>(req.center_day);
  }
  const std::size_t half = (req.window - 1) / 2;
  const auto outside = [&] {
    return ConfigError("case-study window of " + std::to_string(req.window) + " days around eval day " +
                       std::to_string(center) + " falls outside eval days [" + std::to_string(first) + ", " +
                       std::to_string(n) + ")");
  };
  if (first + req.window > n) throw outside();
  std::size_t lo = 0;
  if (req.center_day < 0) {
    // the automatic center only picks the event; the window shifts to stay inside the eval days
    lo = std::clamp(center < first + half ? first : center - half, first, n - req.window);
  } else {
    if (center < half || center - half < first || center - half + req.window > n) throw outside();
    lo = center - half;
  }

  CaseStudy cs;
  std::vector<std::vector<Forecast>> forecasts;
  for (const auto& ck : checkpoints) {
    cs.models.push_back(ck.model);
    forecasts.push_back(forecast_eval_days(ck, ex, first));
  }
  for (std::size_t d = lo; d < lo + req.window; ++d) {
    CaseStudyRow row;
    row.day = ex.eval.targets[d].day_index;
    row.observed = tile_max(ex.eval.targets[d].values, spec, tile);
    row.persistence = tile_max(ex.eval.targets[d - tau].values, spec, tile);
    for (const auto& f : forecasts) {
      const auto& fc = f[d - first];
      row.model_max.push_back(tile_max(inv_log1p(fc.log_intensity), spec, tile));
      row.model_prob.push_back(tile_probability(fc, tile));
    }
    cs.rows.push_back(std::move(row));
  }
  return cs;
}

}  // namespace pglode
