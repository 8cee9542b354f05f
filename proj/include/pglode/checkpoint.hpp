#pragma once

// PGW1 parameter checkpoint.
//
//   "PGW1" | u16 version | str model | u32 grid height | u32 grid width |
//   u32 history_T | u32 lead_tau | u32 latent_channels | u32 hidden_channels |
//   u32 convlstm_hidden | u32 rk4_steps | f64 beta_init | u32 seed_lo | u32 seed_hi |
//   6 x f64 channel mean | 6 x f64 channel stddev |
//   u32 group_count | per group: str name | u32 rank | rank x u32 dims | f64 values
//
// `str` is a u16 byte length followed by UTF-8 bytes; everything little-endian.

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "pglode/binary_io.hpp"
#include "pglode/error.hpp"
#include "pglode/grid.hpp"
#include "pglode/models.hpp"

namespace pglode {

inline constexpr std::string_view kCheckpointMagic = "PGW1";
inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

/// Everything needed to reproduce a trained model's forecasts.
struct Checkpoint {
  std::string model;
  std::size_t grid_height = 0;
  std::size_t grid_width = 0;
  ModelConfig config;
  ChannelStats stats;
  ParameterSet params;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  binary::ByteWriter out;
  out.bytes(kCheckpointMagic);
  out.u16(kCheckpointVersion);
  out.str(ck.model);
  out.u32(static_cast<std::uint32_t>(ck.grid_height));
  out.u32(static_cast<std::uint32_t>(ck.grid_width));
  const auto& c = ck.config;
  for (std::size_t v : {c.history_T, c.lead_tau, c.latent_channels, c.hidden_channels, c.convlstm_hidden, c.rk4_steps}) {
    out.u32(static_cast<std::uint32_t>(v));
  }
  out.f64(c.beta_init);
  out.u32(static_cast<std::uint32_t>(c.seed & 0xFFFFFFFFu));
  out.u32(static_cast<std::uint32_t>(c.seed >> 32));
  for (double m : ck.stats.mean) out.f64(m);
  for (double s : ck.stats.stddev) out.f64(s);
  out.u32(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& e : ck.params.entries()) {
    out.str(e.name);
    out.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) out.u32(static_cast<std::uint32_t>(d));
    for (double v : e.value.data()) out.f64(v);
  }
  return out.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  binary::ByteReader in(bytes);
  try {
    if (in.remaining() < kCheckpointMagic.size() || in.bytes(kCheckpointMagic.size()) != kCheckpointMagic) {
      throw CheckpointError("bad magic: not a PGW1 checkpoint");
    }
    const auto version = in.u16();
    if (version != kCheckpointVersion) {
      throw CheckpointError("version mismatch: checkpoint has " + std::to_string(version) + ", expected " +
                            std::to_string(kCheckpointVersion));
    }
    Checkpoint ck;
    ck.model = in.str();
    ck.grid_height = in.u32();
    ck.grid_width = in.u32();
    auto& c = ck.config;
    c.history_T = in.u32();
    c.lead_tau = in.u32();
    c.latent_channels = in.u32();
    c.hidden_channels = in.u32();
    c.convlstm_hidden = in.u32();
    c.rk4_steps = in.u32();
    c.beta_init = in.f64();
    const std::uint64_t lo = in.u32();
    const std::uint64_t hi = in.u32();
    c.seed = lo | (hi << 32);
    for (double& m : ck.stats.mean) m = in.f64();
    for (double& s : ck.stats.stddev) s = in.f64();
    const auto groups = in.u32();
    for (std::uint32_t g = 0; g < groups; ++g) {
      std::string name = in.str();
      const auto rank = in.u32();
      if (rank > 8) throw CheckpointError("parameter group '" + name + "' has implausible rank");
      ad::Shape shape(rank);
      for (auto& d : shape) d = in.u32();
      const std::size_t n = ad::numel(shape);
      if (n * 8 > in.remaining()) throw binary::Truncated("truncated payload in parameter group '" + name + "'");
      std::vector<double> values(n);
      for (auto& v : values) v = in.f64();
      ck.params.add(std::move(name), ad::Tensor(std::move(shape), std::move(values)));
    }
    if (in.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint payload");
    return ck;
  } catch (const binary::Truncated& e) {
    throw CheckpointError(std::string("checkpoint ") + e.what());
  }
}

inline void write_checkpoint(const Checkpoint& ck, const std::string& path) {
  binary::write_file(path, encode_checkpoint(ck), CheckpointError("cannot write checkpoint '" + path + "'"));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  return decode_checkpoint(binary::read_file(path, CheckpointError("cannot read checkpoint '" + path + "'")));
}

inline Checkpoint make_checkpoint(const ForecastModel& model, const GridSpec& grid, const ChannelStats& stats) {
  return {model.name(), grid.height(), grid.width(), model.config(), stats, model.params()};
}

/// Rebuild the model and install the stored parameters (names and shapes must match).
inline std::unique_ptr<ForecastModel> restore_model(const Checkpoint& ck) {
  auto model = make_model(parse_model_kind(ck.model), ck.config);
  auto& params = model->params();
  if (params.size() != ck.params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ck.params.size()) + " parameter groups, model '" +
                          ck.model + "' expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& want = params.entries()[i];
    const auto& have = ck.params.entries()[i];
    if (want.name != have.name || want.value.shape() != have.value.shape()) {
      throw CheckpointError("parameter group mismatch: expected " + want.name + ad::to_string(want.value.shape()) +
                            ", found " + have.name + ad::to_string(have.value.shape()));
    }
  }
  params = ck.params;
  return model;
}

}  // namespace pglode
