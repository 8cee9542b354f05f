#pragma once

// Flat key=value run configuration shared by all subcommands.
//
//   # comment
//   n_days = 400
//   learning_rate = 0.003
//
// Unknown keys and malformed values are ConfigErrors. `seed` is the global seed;
// it is copied into the generator, model initialisation and batching seeds.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "pglode/error.hpp"
#include "pglode/models.hpp"
#include "pglode/synthgen.hpp"
#include "pglode/training.hpp"

namespace pglode {

struct RunConfig {
  std::uint64_t seed = 42;

  // grid / generator
  std::size_t height = 64;
  std::size_t width = 64;
  double lat0 = 8.0;
  double lon0 = 68.0;
  double cell_deg = 0.25;
  SynthConfig synth;

  // experiment
  double train_frac = 0.8;
  std::size_t tile_size = 32;

  ModelConfig model;
  LossConfig loss;

  // paths
  std::string dataset = "dataset.pgl";
  std::string out = "out";

  SynthConfig synth_config() const {
    SynthConfig s = synth;
    s.spec = GridSpec(height, width, lat0, lon0, cell_deg);
    s.seed = seed;
    return s;
  }
  ModelConfig model_config() const {
    ModelConfig m = model;
    m.seed = seed;
    return m;
  }
  LossConfig loss_config() const {
    LossConfig l = loss;
    l.seed = seed;
    return l;
  }

  void validate() const {
    synth_config().validate();
    model_config().validate();
    loss_config().validate();
    if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("train_frac must lie in (0, 1)");
    if (tile_size < 1) throw ConfigError("tile_size must be >= 1");
  }
};

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

inline std::string format_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

struct ConfigField {
  const char* key;
  const char* doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
ConfigField field(const char* key, const char* doc, T RunConfig::*outer) {
  return {key, doc,
          [outer](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*outer);
            else if constexpr (std::is_same_v<T, std::string>) return c.*outer;
            else return std::to_string(c.*outer);
          },
          [outer, key](RunConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, std::string>) c.*outer = v;
            else c.*outer = parse_number<T>(key, v);
          }};
}

template <class S, class T>
ConfigField field(const char* key, const char* doc, S RunConfig::*outer, T S::*inner) {
  return {key, doc,
          [outer, inner](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*outer.*inner);
            else return std::to_string(c.*outer.*inner);
          },
          [outer, inner, key](RunConfig& c, const std::string& v) { c.*outer.*inner = parse_number<T>(key, v); }};
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      field("seed", "global seed for generation, initialisation and batching", &RunConfig::seed),
      field("height", "grid rows", &RunConfig::height),
      field("width", "grid columns", &RunConfig::width),
      field("lat0", "latitude of the first row (degrees)", &RunConfig::lat0),
      field("lon0", "longitude of the first column (degrees)", &RunConfig::lon0),
      field("cell_deg", "grid spacing (degrees)", &RunConfig::cell_deg),
      field("n_days", "number of synthetic days", &RunConfig::synth, &SynthConfig::n_days),
      field("ar1_rain", "AR(1) coefficient of background rain", &RunConfig::synth, &SynthConfig::ar1_rain),
      field("ar1_cape", "AR(1) coefficient of the CAPE/omega anomaly", &RunConfig::synth, &SynthConfig::ar1_cape),
      field("cape_trigger", "CAPE above which bursts may trigger (J/kg)", &RunConfig::synth,
            &SynthConfig::cape_trigger),
      field("omega_trigger", "omega500 below which bursts may trigger (Pa/s)", &RunConfig::synth,
            &SynthConfig::omega_trigger),
      field("burst_intensity", "base burst amplitude (mm/day)", &RunConfig::synth, &SynthConfig::burst_intensity),
      field("burst_radius", "burst disk radius (pixels)", &RunConfig::synth, &SynthConfig::burst_radius),
      field("noise_scale", "background rain innovation scale", &RunConfig::synth, &SynthConfig::noise_scale),
      field("large_scale", "domain-wide rain innovation scale (mm/day)", &RunConfig::synth,
            &SynthConfig::large_scale),
      field("burst_profile", "peak-to-rim burst amplitude boost", &RunConfig::synth, &SynthConfig::burst_profile),
      field("anomaly_smoothing", "3x3 box passes applied to the slow anomaly innovations", &RunConfig::synth,
            &SynthConfig::anomaly_smoothing),
      field("train_frac", "chronological training fraction", &RunConfig::train_frac),
      field("tile_size", "verification tile edge (pixels)", &RunConfig::tile_size),
      field("history_T", "input history length (days)", &RunConfig::model, &ModelConfig::history_T),
      field("lead_tau", "forecast lead (days)", &RunConfig::model, &ModelConfig::lead_tau),
      field("latent_channels", "latent channels L", &RunConfig::model, &ModelConfig::latent_channels),
      field("hidden_channels", "hidden width of the latent vector field", &RunConfig::model,
            &ModelConfig::hidden_channels),
      field("convlstm_hidden", "ConvLSTM hidden channels", &RunConfig::model, &ModelConfig::convlstm_hidden),
      field("rk4_steps", "RK4 steps over the unit horizon", &RunConfig::model, &ModelConfig::rk4_steps),
      field("beta_init", "initial physics-gate scale", &RunConfig::model, &ModelConfig::beta_init),
      field("lambda_extreme", "loss weight of pixels at or above P95", &RunConfig::loss, &LossConfig::lambda_extreme),
      field("bce_weight", "weight of the exceedance BCE term", &RunConfig::loss, &LossConfig::bce_weight),
      field("learning_rate", "Adam learning rate", &RunConfig::loss, &LossConfig::learning_rate),
      field("epochs", "training epochs", &RunConfig::loss, &LossConfig::epochs),
      field("batch_size", "minibatch size", &RunConfig::loss, &LossConfig::batch_size),
      field("dataset", "dataset path", &RunConfig::dataset),
      field("out", "output directory", &RunConfig::out),
  };
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) return f.get(cfg);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::config_fields()) keys.emplace_back(f.key);
  return keys;
}

inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, text.str());
  return cfg;
}

/// Every key with its current value and documentation, parseable by apply_config_text.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) {
    out += "# ";
    out += f.doc;
    out += '\n';
    out += f.key;
    out += " = ";
    out += f.get(cfg);
    out += '\n';
  }
  return out;
}

}  // namespace pglode
