#pragma once

// Checkpoint container, little-endian:
//
//   magic "CMDC" | version u16 | model config hash u64 | training step u64
//   | optimizer step u64 | parameter count u32
//   then per parameter:
//     name length u32 | name bytes | rank u32 | extents u64[rank]
//     | values f64[n] | moments flag u8 | (first moment f64[n], second f64[n])

#include <cstdint>
#include <filesystem>
#include <string>

#include "cmdret/dataio/feature_file.hpp"
#include "cmdret/errors.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/optim.hpp"
#include "cmdret/params.hpp"

namespace cmdret {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamStore params;
  OptimState optim;
  std::uint64_t step = 0;
  std::uint64_t config_hash = 0;
};

inline std::vector<std::uint8_t> encode_checkpoint(const ParamStore& params, const OptimState& optim,
                                                   std::uint64_t step, std::uint64_t config_hash) {
  dataio::detail::ByteWriter w;
  w.raw(std::span<const char>("CMDC", 4));
  w.u16(kCheckpointVersion);
  w.u64(config_hash);
  w.u64(step);
  w.u64(optim.step);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.raw(std::span<const char>(p.name.data(), p.name.size()));
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t e : p.value.shape()) w.u64(e);
    for (double v : p.value.data()) w.f64(v);
    auto it = optim.moments.find(p.name);
    w.u8(it != optim.moments.end() ? 1 : 0);
    if (it != optim.moments.end()) {
      for (double v : it->second.m.data()) w.f64(v);
      for (double v : it->second.v.data()) w.f64(v);
    }
  }
  return std::move(w.bytes());
}

/// Writes through a temporary file and renames it into place.
inline void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                            const OptimState& optim, std::uint64_t step, const ModelConfig& cfg) {
  const auto bytes = encode_checkpoint(params, optim, step, cfg.hash());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  dataio::detail::write_bytes(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

/// Decodes a checkpoint and checks every tensor against the shapes `cfg`
/// implies. Group and decay flags come from `cfg`, not the file.
inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const ModelConfig& cfg) {
  dataio::detail::ByteReader r(bytes);
  if (r.str(4, "magic") != "CMDC") throw FormatError("bad checkpoint magic", 0);
  const std::uint16_t version = r.u16("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint ck;
  ck.config_hash = r.u64("config hash");
  ck.step = r.u64("step");
  ck.optim.step = r.u64("optimizer step");
  const std::uint32_t count = r.u32("parameter count");

  const auto specs = parameter_specs(cfg);
  if (count != specs.size()) {
    throw DataError("checkpoint holds " + std::to_string(count) + " parameters, config implies " +
                    std::to_string(specs.size()));
  }
  for (const auto& spec : specs) {
    const std::uint32_t len = r.u32("name length");
    const std::string name = r.str(len, "name");
    if (name != spec.name) {
      throw DataError("checkpoint parameter '" + name + "' where config expects '" + spec.name + "'");
    }
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank), r.offset() - 4);
    Shape shape(rank);
    for (auto& e : shape) e = r.u64("extent");
    if (shape != spec.shape) {
      throw DataError("parameter " + name + ": checkpoint shape " + shape_str(shape) + " vs config shape " +
                      shape_str(spec.shape));
    }
    Tensor value(shape);
    for (double& v : value.values()) v = r.f64("values");
    if (r.u8("moments flag")) {
      Moments mo{Tensor(shape), Tensor(shape)};
      for (double& v : mo.m.values()) v = r.f64("first moment");
      for (double& v : mo.v.values()) v = r.f64("second moment");
      ck.optim.moments.emplace(name, std::move(mo));
    }
    ck.params.add(name, std::move(value), spec.group, spec.decay);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in checkpoint", r.offset());
  if (ck.config_hash != cfg.hash()) {
    throw DataError("checkpoint was written for a different model configuration (hash " +
                    std::to_string(ck.config_hash) + " vs " + std::to_string(cfg.hash()) + ")");
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg) {
  const auto bytes = dataio::detail::read_bytes(path);
  try {
    return decode_checkpoint(bytes, cfg);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace cmdret
