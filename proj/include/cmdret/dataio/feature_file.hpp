#pragma once

// Binary container for precomputed feature sequences.
//
// Layout, all integers and floats little-endian:
//
//   offset  size  field
//   0       4     magic "CMDF"
//   4       2     format version (u16, currently 1)
//   6       1     modality (u8: 0 speech, 1 image)
//   7       2     layer count (u16, >= 1)
//   9       4     feature dimension (u32, >= 1)
//   13      4     sequence length (u32, >= 1)
//   17      1     flags (u8; bit 0: a cls vector per layer follows the payload)
//   18      ...   payload: f32[layers][length][dim]
//           ...   cls block (if flagged): f32[layers][dim]
//
// Values are widened to double on read; writing truncates to float.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "cmdret/encoders.hpp"
#include "cmdret/errors.hpp"
#include "cmdret/numerics/tensor.hpp"

namespace cmdret::dataio {

inline constexpr std::array<char, 4> kFeatureMagic{'C', 'M', 'D', 'F'};
inline constexpr std::uint16_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderSize = 18;
inline constexpr std::uint8_t kFlagHasCls = 0x01;

struct FeatureFile {
  Modality modality = Modality::speech;
  std::vector<Tensor> layers;  // each length×dim
  std::vector<Tensor> cls;     // empty, or one dim-vector per layer

  std::size_t length() const { return layers.at(0).dim(0); }
  std::size_t dim() const { return layers.at(0).dim(1); }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::span<const char> s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked little-endian reader; failures report the byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void require(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(n) +
                            " bytes, file ends",
                        bytes_.size());
    }
  }

  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(get(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  std::string str(std::size_t n, const char* what) {
    require(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::uint64_t get(int n, const char* what) {
    require(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_feature_file(const FeatureFile& f) {
  if (f.layers.empty()) throw DataError("feature file needs at least one layer");
  const Shape& shape = f.layers[0].shape();
  if (shape.size() != 2) throw DimensionError("feature layers must be length×dim, got " + shape_str(shape));
  if (f.layers.size() > UINT16_MAX || shape[0] > UINT32_MAX || shape[1] > UINT32_MAX) {
    throw DataError("feature extents exceed the header field widths");
  }
  if (!f.cls.empty() && f.cls.size() != f.layers.size()) {
    throw DataError("cls block must have one vector per layer");
  }
  detail::ByteWriter w;
  w.raw(kFeatureMagic);
  w.u16(kFeatureVersion);
  w.u8(static_cast<std::uint8_t>(f.modality));
  w.u16(static_cast<std::uint16_t>(f.layers.size()));
  w.u32(static_cast<std::uint32_t>(shape[1]));
  w.u32(static_cast<std::uint32_t>(shape[0]));
  w.u8(f.cls.empty() ? 0 : kFlagHasCls);
  auto put = [&](const Tensor& t) {
    for (double v : t.data()) {
      if (!std::isfinite(v)) throw DataError("non-finite feature value");
      w.f32(static_cast<float>(v));
    }
  };
  for (const Tensor& l : f.layers) {
    require_same_shape(f.layers[0], l, "feature layers");
    put(l);
  }
  for (const Tensor& c : f.cls) {
    if (c.shape() != Shape{shape[1]}) {
      throw DimensionError("cls vector " + shape_str(c.shape()) + " vs dim " + std::to_string(shape[1]));
    }
    put(c);
  }
  return std::move(w.bytes());
}

/// Parses a feature file. The header is fully validated before any payload
/// byte is touched.
inline FeatureFile decode_feature_file(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.require(kFeatureHeaderSize, "header");
  if (r.str(4, "magic") != std::string(kFeatureMagic.begin(), kFeatureMagic.end())) {
    throw FormatError("bad magic (expected CMDF)", 0);
  }
  const std::uint16_t version = r.u16("version");
  if (version != kFeatureVersion) {
    throw FormatError("unsupported version " + std::to_string(version), 4);
  }
  const std::uint8_t modality = r.u8("modality");
  if (modality > 1) throw FormatError("unknown modality tag " + std::to_string(modality), 6);
  const std::uint16_t layers = r.u16("layer count");
  if (layers == 0) throw FormatError("layer count is zero", 7);
  const std::uint32_t dim = r.u32("dim");
  if (dim == 0) throw FormatError("dim is zero", 9);
  const std::uint32_t length = r.u32("length");
  if (length == 0) throw FormatError("sequence length is zero", 13);
  const std::uint8_t flags = r.u8("flags");
  if (flags & ~kFlagHasCls) throw FormatError("unknown flag bits", 17);

  const std::uint64_t payload = std::uint64_t{layers} * length * dim * 4;
  const std::uint64_t cls_bytes = (flags & kFlagHasCls) ? std::uint64_t{layers} * dim * 4 : 0;
  const std::uint64_t expected = kFeatureHeaderSize + payload + cls_bytes;
  if (bytes.size() < expected) {
    throw FormatError("truncated payload: expected " + std::to_string(expected) + " bytes, have " +
                          std::to_string(bytes.size()),
                      bytes.size());
  }
  if (bytes.size() > expected) {
    throw FormatError("trailing bytes after payload", expected);
  }

  FeatureFile f;
  f.modality = static_cast<Modality>(modality);
  for (std::uint16_t l = 0; l < layers; ++l) {
    Tensor t(Shape{length, dim});
    for (double& v : t.values()) v = static_cast<double>(r.f32("payload"));
    f.layers.push_back(std::move(t));
  }
  if (flags & kFlagHasCls) {
    for (std::uint16_t l = 0; l < layers; ++l) {
      Tensor c(Shape{dim});
      for (double& v : c.values()) v = static_cast<double>(r.f32("cls block"));
      f.cls.push_back(std::move(c));
    }
  }
  return f;
}

inline void write_feature_file(const std::filesystem::path& path, const FeatureFile& f) {
  const auto bytes = encode_feature_file(f);
  detail::write_bytes(path, bytes);
}

inline FeatureFile read_feature_file(const std::filesystem::path& path) {
  const auto bytes = detail::read_bytes(path);
  try {
    return decode_feature_file(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace cmdret::dataio
