#pragma once

// Synthetic monsoon-like dataset: persistent background rainfall plus
// rainfall bursts that follow joint CAPE / omega500 trigger exceedances by
// exactly one day. Generation procedure (all draws from one SplitMix64):
//
//   for each day, in order: rain innovation field (Exp(1)), one scalar
//   Exp(1) for the domain-wide component, then standard normal fields for
//   CAPE, omega500, TCWV, u850, v850, SP anomalies; every field is smoothed
//   with an edge-normalized 3x3 box filter.
//
//   background rain  r_t = ar1_rain * r_{t-1} + noise_scale * 10 * box(Exp)
//                    r_0 = 10 / (1 - ar1_rain) * box(Exp)
//   domain-wide      g_t = ar1_rain * g_{t-1} + noise_scale * large_scale * Exp
//                    g_0 = large_scale / (1 - ar1_rain) * Exp
//   slow anomalies   a_t = ar1_cape * a_{t-1} + sqrt(1 - ar1_cape^2) * box^k(N) / sd_k
//                    (k = anomaly_smoothing passes, sd_k rescales to unit std)
//   CAPE    = max(0, 1000 + 600 a)       J/kg
//   omega   = 0.15 a                     Pa/s (negative = ascent)
//   TCWV    = 30 + 0.5 (r_t + g_t) + 2 * 3 box(N) mm
//   u, v    = 5 + 3 a, 2 + 3 a           m/s
//   SP      = 1000 + 4 a                 hPa
//
// Predictors are rounded to float32 before triggers are evaluated, so the
// trigger mask can be recomputed exactly from a stored dataset. A pixel q
// triggers on day t when CAPE > cape_trigger and omega < omega_trigger;
// on day t+1 every pixel p within burst_radius of q receives
//   burst_intensity * (1 + 0.5 * (CAPE_q - cape_trigger) / 600)
//                   * (1 + burst_profile * (1 - |p - q|^2 / burst_radius^2))
// (max over triggering neighbours). Observed rain is r_t + g_t + burst;
// bursts do not feed back into the AR(1) state.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pglode/binary_io.hpp"
#include "pglode/error.hpp"
#include "pglode/grid.hpp"
#include "pglode/random.hpp"

namespace pglode {

inline constexpr std::size_t kMinSynthDays = 40;
inline constexpr std::size_t kMinSplitDays = 10;

struct SynthConfig {
  GridSpec spec{64, 64, 8.0, 68.0, 0.25};
  std::size_t n_days = 400;
  std::uint64_t seed = 42;
  double ar1_rain = 0.7;
  double ar1_cape = 0.5;
  double cape_trigger = 2000.0;
  double omega_trigger = -0.15;
  double burst_intensity = 60.0;
  double burst_radius = 3.0;
  double noise_scale = 1.0;
  double large_scale = 15.0;    // domain-wide rain innovation (mm/day)
  double burst_profile = 1.0;   // extra burst amplitude at the trigger pixel, tapering to 0 at the rim
  std::size_t anomaly_smoothing = 16;  // 3x3 box passes applied to the slow anomaly innovations

  void validate() const {
    if (!(ar1_rain >= 0.0 && ar1_rain < 1.0)) throw ConfigError("ar1_rain must lie in [0, 1)");
    if (!(ar1_cape >= 0.0 && ar1_cape < 1.0)) throw ConfigError("ar1_cape must lie in [0, 1)");
    if (anomaly_smoothing < 1) throw ConfigError("anomaly_smoothing must be >= 1");
    if (n_days < kMinSynthDays) {
      throw ConfigError("n_days must be >= " + std::to_string(kMinSynthDays) + " (got " +
                        std::to_string(n_days) + ")");
    }
    if (!(burst_intensity >= 0.0) || !(burst_radius >= 0.0) || !(noise_scale >= 0.0) || !(large_scale >= 0.0) ||
        !(burst_profile >= 0.0)) {
      throw ConfigError("burst_intensity, burst_radius, noise_scale, large_scale and burst_profile must be >= 0");
    }
  }
};

/// Aligned predictor/target days plus the planted-burst oracle mask.
struct SampleSet {
  std::vector<PredictorStack> predictors;
  std::vector<RainField> targets;
  std::vector<std::vector<std::uint8_t>> extreme_truth;  // per day, per pixel, 0/1

  std::size_t days() const { return targets.size(); }
  const GridSpec& spec() const { return targets.front().spec; }
  friend bool operator==(const SampleSet&, const SampleSet&) = default;
};

namespace detail {

/// Edge-normalized 3x3 mean.
inline std::vector<double> box3(const std::vector<double>& in, std::size_t h, std::size_t w) {
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double sum = 0.0;
      int n = 0;
      for (std::size_t rr = (r == 0 ? 0 : r - 1); rr <= std::min(h - 1, r + 1); ++rr) {
        for (std::size_t cc = (c == 0 ? 0 : c - 1); cc <= std::min(w - 1, c + 1); ++cc) {
          sum += in[rr * w + cc];
          ++n;
        }
      }
      out[r * w + c] = sum / n;
    }
  }
  return out;
}

/// Standard deviation of `passes` interior 3x3 box passes applied to unit white noise.
inline double box_passes_stddev(std::size_t passes) {
  std::vector<double> k{1.0};
  for (std::size_t p = 0; p < passes; ++p) {
    std::vector<double> next(k.size() + 2, 0.0);
    for (std::size_t i = 0; i < k.size(); ++i)
      for (std::size_t j = 0; j < 3; ++j) next[i + j] += k[i] / 3.0;
    k = std::move(next);
  }
  double ss = 0.0;
  for (double v : k) ss += v * v;
  return ss;  // the 2-D kernel is separable, so its L2 norm is the square of the 1-D norm
}

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

/// Joint trigger mask for one day's (float-rounded) predictors.
inline std::vector<std::uint8_t> trigger_mask(const PredictorStack& day, const SynthConfig& cfg) {
  const auto& cape = day.channel(Predictor::kCape);
  const auto& omega = day.channel(Predictor::kOmega500);
  std::vector<std::uint8_t> mask(cape.size());
  for (std::size_t i = 0; i < cape.size(); ++i) {
    mask[i] = (cape[i] > cfg.cape_trigger && omega[i] < cfg.omega_trigger) ? 1 : 0;
  }
  return mask;
}

/// Burst amplitude per pixel implied by one day's trigger mask (0 = no burst).
inline std::vector<double> burst_field(const PredictorStack& day, const SynthConfig& cfg) {
  const std::size_t h = day.spec.height();
  const std::size_t w = day.spec.width();
  const auto mask = trigger_mask(day, cfg);
  const auto& cape = day.channel(Predictor::kCape);
  std::vector<double> burst(h * w, 0.0);
  const auto reach = static_cast<long>(std::floor(cfg.burst_radius));
  const double r2 = cfg.burst_radius * cfg.burst_radius;
  for (std::size_t q = 0; q < mask.size(); ++q) {
    if (!mask[q]) continue;
    const double amount =
        cfg.burst_intensity * (1.0 + 0.5 * (cape[q] - cfg.cape_trigger) / 600.0);
    const auto qr = static_cast<long>(q / w);
    const auto qc = static_cast<long>(q % w);
    for (long dr = -reach; dr <= reach; ++dr) {
      for (long dc = -reach; dc <= reach; ++dc) {
        const long r = qr + dr;
        const long c = qc + dc;
        if (r < 0 || c < 0 || r >= static_cast<long>(h) || c >= static_cast<long>(w)) continue;
        const auto d2 = static_cast<double>(dr * dr + dc * dc);
        if (d2 > r2) continue;
        const double taper = r2 > 0.0 ? 1.0 - d2 / r2 : 1.0;
        double& slot = burst[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
        slot = std::max(slot, amount * (1.0 + cfg.burst_profile * taper));
      }
    }
  }
  return burst;
}

inline SampleSet generate(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.spec.height();
  const std::size_t w = cfg.spec.width();
  const std::size_t n = h * w;
  SplitMix64 rng(cfg.seed);

  auto draw = [&](bool exponential) {
    std::vector<double> f(n);
    for (auto& v : f) v = exponential ? rng.exponential() : rng.normal();
    return detail::box3(f, h, w);
  };
  // Slow anomalies: unit-variance normals smoothed to a longer correlation length.
  const double slow_gain = 1.0 / detail::box_passes_stddev(cfg.anomaly_smoothing);
  auto draw_slow = [&] {
    auto f = draw(false);
    for (std::size_t p = 1; p < cfg.anomaly_smoothing; ++p) f = detail::box3(f, h, w);
    for (auto& v : f) v *= slow_gain;
    return f;
  };

  constexpr double kInnovation = 10.0;
  constexpr std::size_t kSlow = 5;  // CAPE, omega, u, v, SP anomalies
  const double slow_keep = cfg.ar1_cape;
  const double slow_mix = std::sqrt(1.0 - cfg.ar1_cape * cfg.ar1_cape);

  std::vector<double> background(n, 0.0);
  double domain = 0.0;
  std::array<std::vector<double>, kSlow> anomaly;
  std::vector<double> pending_burst(n, 0.0);

  SampleSet set;
  set.predictors.reserve(cfg.n_days);
  set.targets.reserve(cfg.n_days);
  set.extreme_truth.reserve(cfg.n_days);

  for (std::size_t t = 0; t < cfg.n_days; ++t) {
    const auto rain_innov = draw(true);
    const double domain_innov = rng.exponential();
    std::array<std::vector<double>, kSlow> slow_noise;
    slow_noise[0] = draw_slow();  // CAPE
    slow_noise[1] = draw_slow();  // omega
    const auto tcwv_noise = draw(false);
    slow_noise[2] = draw_slow();  // u
    slow_noise[3] = draw_slow();  // v
    slow_noise[4] = draw_slow();  // SP

    for (std::size_t i = 0; i < n; ++i) {
      background[i] = t == 0 ? kInnovation / (1.0 - cfg.ar1_rain) * rain_innov[i]
                             : cfg.ar1_rain * background[i] +
                                   cfg.noise_scale * kInnovation * rain_innov[i];
    }
    domain = t == 0 ? cfg.large_scale / (1.0 - cfg.ar1_rain) * domain_innov
                    : cfg.ar1_rain * domain + cfg.noise_scale * cfg.large_scale * domain_innov;
    for (std::size_t k = 0; k < kSlow; ++k) {
      if (t == 0) {
        anomaly[k].assign(n, 0.0);
        anomaly[k] = slow_noise[k];
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          anomaly[k][i] = slow_keep * anomaly[k][i] + slow_mix * slow_noise[k][i];
        }
      }
    }

    PredictorStack day{cfg.spec, {}, static_cast<int>(t)};
    for (auto& ch : day.channels) ch.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      using detail::to_f32;
      day.channel(Predictor::kTcwv)[i] =
          to_f32(30.0 + 0.5 * (background[i] + domain) + 2.0 * 3.0 * tcwv_noise[i]);
      day.channel(Predictor::kCape)[i] = to_f32(std::max(0.0, 1000.0 + 600.0 * anomaly[0][i]));
      day.channel(Predictor::kOmega500)[i] = to_f32(0.15 * anomaly[1][i]);
      day.channel(Predictor::kU850)[i] = to_f32(5.0 + 3.0 * anomaly[2][i]);
      day.channel(Predictor::kV850)[i] = to_f32(2.0 + 3.0 * anomaly[3][i]);
      day.channel(Predictor::kSp)[i] = to_f32(1000.0 + 4.0 * anomaly[4][i]);
    }

    RainField rain{cfg.spec, std::vector<double>(n), static_cast<int>(t)};
    std::vector<std::uint8_t> truth(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      rain.values[i] = detail::to_f32(background[i] + domain + pending_burst[i]);
      truth[i] = pending_burst[i] > 0.0 ? 1 : 0;
    }
    pending_burst = burst_field(day, cfg);

    set.predictors.push_back(std::move(day));
    set.targets.push_back(std::move(rain));
    set.extreme_truth.push_back(std::move(truth));
  }
  return set;
}

/// Chronological split: days [0, floor(n*frac)) train, the rest eval.
inline std::pair<SampleSet, SampleSet> split(const SampleSet& set, double train_frac) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("train_frac must lie in (0, 1)");
  const std::size_t n = set.days();
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_frac));
  if (n_train < kMinSplitDays || n - n_train < kMinSplitDays) {
    throw ConfigError("split leaves fewer than " + std::to_string(kMinSplitDays) +
                      " days on one side (" + std::to_string(n_train) + "/" +
                      std::to_string(n - n_train) + ")");
  }
  auto slice = [&](std::size_t b, std::size_t e) {
    SampleSet s;
    s.predictors.assign(set.predictors.begin() + b, set.predictors.begin() + e);
    s.targets.assign(set.targets.begin() + b, set.targets.begin() + e);
    s.extreme_truth.assign(set.extreme_truth.begin() + b, set.extreme_truth.begin() + e);
    return s;
  };
  return {slice(0, n_train), slice(n_train, n)};
}

// ---------------------------------------------------------------------------
// PGL1 dataset file
//
//   "PGL1" | u16 version | u32 height | u32 width | f64 lat0 | f64 lon0 |
//   f64 cell_deg | u32 channel_count (=7) | u32 day_count | i32 first_day |
//   for each day, for each channel [TCWV, CAPE, omega500, u850, v850, SP,
//   rain]: height*width f32 row-major | extreme_truth bitfield, day-major
//   then row-major, LSB first, ceil(days*height*width/8) bytes.
//   All integers and floats little-endian.

inline constexpr std::string_view kDatasetMagic = "PGL1";
inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::uint32_t kDatasetChannels = kPredictorCount + 1;

class DatasetError : public DataError {
 public:
  enum class Kind { kBadMagic, kVersionMismatch, kTruncated, kDimensionMismatch, kTrailingData, kIo };

  DatasetError(Kind kind, const std::string& msg) : DataError(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline std::string encode_dataset(const SampleSet& set) {
  if (set.days() == 0) throw DatasetError(DatasetError::Kind::kDimensionMismatch, "empty dataset");
  const GridSpec spec = set.spec();
  const std::size_t n = spec.pixels();
  if (set.predictors.size() != set.days() || set.extreme_truth.size() != set.days()) {
    throw DatasetError(DatasetError::Kind::kDimensionMismatch, "misaligned sample set");
  }
  binary::ByteWriter out;
  out.bytes(kDatasetMagic);
  out.u16(kDatasetVersion);
  out.u32(static_cast<std::uint32_t>(spec.height()));
  out.u32(static_cast<std::uint32_t>(spec.width()));
  out.f64(spec.lat0());
  out.f64(spec.lon0());
  out.f64(spec.cell_deg());
  out.u32(kDatasetChannels);
  out.u32(static_cast<std::uint32_t>(set.days()));
  out.i32(set.targets.front().day_index);
  for (std::size_t d = 0; d < set.days(); ++d) {
    const auto& p = set.predictors[d];
    const auto& r = set.targets[d];
    if (!p.spec.same_shape(spec) || !r.spec.same_shape(spec) || r.values.size() != n ||
        set.extreme_truth[d].size() != n ||
        r.day_index != set.targets.front().day_index + static_cast<int>(d) ||
        p.day_index != r.day_index) {
      throw DatasetError(DatasetError::Kind::kDimensionMismatch,
                         "day " + std::to_string(d) + " is misaligned with the dataset grid/index");
    }
    for (const auto& ch : p.channels) {
      if (ch.size() != n) {
        throw DatasetError(DatasetError::Kind::kDimensionMismatch, "predictor channel size");
      }
      for (double v : ch) out.f32(static_cast<float>(v));
    }
    for (double v : r.values) out.f32(static_cast<float>(v));
  }
  const std::size_t bits = set.days() * n;
  std::string packed((bits + 7) / 8, '\0');
  for (std::size_t d = 0; d < set.days(); ++d) {
    for (std::size_t i = 0; i < n; ++i) {
      if (set.extreme_truth[d][i]) {
        const std::size_t k = d * n + i;
        packed[k / 8] = static_cast<char>(static_cast<unsigned char>(packed[k / 8]) | (1u << (k % 8)));
      }
    }
  }
  out.bytes(packed);
  return out.take();
}

inline SampleSet decode_dataset(std::string_view bytes) {
  using Kind = DatasetError::Kind;
  binary::ByteReader in(bytes);
  try {
    if (in.remaining() < kDatasetMagic.size() || in.bytes(kDatasetMagic.size()) != kDatasetMagic) {
      throw DatasetError(Kind::kBadMagic, "bad magic: not a PGL1 dataset");
    }
    const auto version = in.u16();
    if (version != kDatasetVersion) {
      throw DatasetError(Kind::kVersionMismatch, "version mismatch: file has " +
                                                     std::to_string(version) + ", expected " +
                                                     std::to_string(kDatasetVersion));
    }
    const auto height = in.u32();
    const auto width = in.u32();
    const double lat0 = in.f64();
    const double lon0 = in.f64();
    const double cell = in.f64();
    const auto channels = in.u32();
    const auto days = in.u32();
    const auto first_day = in.i32();
    if (height == 0 || width == 0 || days == 0 || channels != kDatasetChannels) {
      throw DatasetError(Kind::kDimensionMismatch,
                         "dimension mismatch: grid " + std::to_string(height) + "x" +
                             std::to_string(width) + ", " + std::to_string(channels) +
                             " channels, " + std::to_string(days) + " days");
    }
    const GridSpec spec(height, width, lat0, lon0, cell);
    const std::size_t n = spec.pixels();
    SampleSet set;
    set.predictors.reserve(days);
    set.targets.reserve(days);
    for (std::uint32_t d = 0; d < days; ++d) {
      const int index = first_day + static_cast<int>(d);
      PredictorStack p{spec, {}, index};
      for (auto& ch : p.channels) {
        ch.resize(n);
        for (auto& v : ch) v = in.f32();
      }
      RainField r{spec, std::vector<double>(n), index};
      for (auto& v : r.values) v = in.f32();
      set.predictors.push_back(std::move(p));
      set.targets.push_back(std::move(r));
    }
    const std::size_t bits = static_cast<std::size_t>(days) * n;
    const auto packed = in.bytes((bits + 7) / 8);
    set.extreme_truth.assign(days, std::vector<std::uint8_t>(n, 0));
    for (std::size_t k = 0; k < bits; ++k) {
      set.extreme_truth[k / n][k % n] =
          (static_cast<unsigned char>(packed[k / 8]) >> (k % 8)) & 1u;
    }
    if (in.remaining() != 0) {
      throw DatasetError(Kind::kTrailingData,
                         std::to_string(in.remaining()) + " trailing bytes after dataset payload");
    }
    return set;
  } catch (const binary::Truncated& e) {
    throw DatasetError(Kind::kTruncated, e.what());
  }
}

inline void write_dataset(const SampleSet& set, const std::string& path) {
  binary::write_file(path, encode_dataset(set),
                     DatasetError(DatasetError::Kind::kIo, "cannot write dataset '" + path + "'"));
}

inline SampleSet read_dataset(const std::string& path) {
  return decode_dataset(binary::read_file(
      path, DatasetError(DatasetError::Kind::kIo, "cannot read dataset '" + path + "'")));
}

}  // namespace pglode
