#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "frk/core/error.hpp"
#include "frk/core/io.hpp"
#include "frk/freqparam/freq_param.hpp"

namespace frk {

/// IEEE-754 binary16 with round-to-nearest-even, straight from the double
/// bits so no double rounding through float occurs.
inline std::uint16_t to_half_bits(double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  const auto sign = static_cast<std::uint16_t>((bits >> 48) & 0x8000u);
  const int exponent = static_cast<int>((bits >> 52) & 0x7FF);
  std::uint64_t mantissa = bits & ((std::uint64_t{1} << 52) - 1);

  if (exponent == 0x7FF) return sign | 0x7C00u | (mantissa ? 0x0200u : 0u);
  const int e = exponent - 1023 + 15;
  if (e >= 31) return sign | 0x7C00u;
  if (e <= 0) {
    if (e < -10) return sign;
    mantissa |= std::uint64_t{1} << 52;
    const int shift = 42 + (1 - e);
    std::uint64_t h = mantissa >> shift;
    const std::uint64_t rest = mantissa & ((std::uint64_t{1} << shift) - 1);
    const std::uint64_t half = std::uint64_t{1} << (shift - 1);
    if (rest > half || (rest == half && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }
  std::uint32_t h = (static_cast<std::uint32_t>(e) << 10) | static_cast<std::uint32_t>(mantissa >> 42);
  const std::uint64_t rest = mantissa & ((std::uint64_t{1} << 42) - 1);
  const std::uint64_t half = std::uint64_t{1} << 41;
  if (rest > half || (rest == half && (h & 1u))) ++h;  // a carry may roll into infinity
  return static_cast<std::uint16_t>(sign | h);
}

inline double from_half_bits(std::uint16_t h) {
  const double sign = (h & 0x8000u) ? -1.0 : 1.0;
  const int exponent = (h >> 10) & 0x1F;
  const int mantissa = h & 0x3FF;
  if (exponent == 0) return sign * std::ldexp(static_cast<double>(mantissa), -24);
  if (exponent == 31) {
    return mantissa ? std::numeric_limits<double>::quiet_NaN()
                    : sign * std::numeric_limits<double>::infinity();
  }
  return sign * std::ldexp(static_cast<double>(mantissa | 0x400), exponent - 25);
}

inline constexpr char kFreqParamMagic[4] = {'F', 'R', 'P', '1'};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint16_t u16(const char* field) {
    need(2, field);
    const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }

  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated payload reading ") + field);
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// "FRP1", little-endian u32 rank, u32 dims..., u32 rows, u32 cols, u32 keep,
/// then `keep` binary16 coefficients in zigzag order.
inline std::vector<unsigned char> serialize_freqparam(const FreqParam& p) {
  std::vector<unsigned char> out(std::begin(kFreqParamMagic), std::end(kFreqParamMagic));
  const auto& shape = p.spatial_shape();
  detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
  detail::put_u32(out, static_cast<std::uint32_t>(p.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(p.cols()));
  detail::put_u32(out, static_cast<std::uint32_t>(p.keep()));
  out.reserve(out.size() + 2 * p.keep());
  const auto& zz = p.zigzag();
  for (std::size_t k = 0; k < p.keep(); ++k) detail::put_u16(out, to_half_bits(p.coeffs()[zz.at(k)]));
  return out;
}

inline FreqParam deserialize_freqparam(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4 || !std::equal(std::begin(kFreqParamMagic), std::end(kFreqParamMagic),
                                      bytes.begin())) {
    throw FormatError("missing FRP1 magic");
  }
  detail::ByteReader in(bytes.subspan(4));
  const std::uint32_t rank = in.u32("rank");
  if (rank == 0 || rank > 8) throw FormatError("implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = in.u32("dimension");
    if (d == 0) throw FormatError("zero dimension in header");
  }
  const std::size_t rows = in.u32("rows");
  const std::size_t cols = in.u32("cols");
  const std::size_t keep = in.u32("keep");
  if (std::pair{rows, cols} != fold_shape(shape)) {
    throw FormatError("rows/cols do not fold shape " + shape_string(shape));
  }
  if (keep < 1 || keep > rows * cols) {
    throw FormatError("keep " + std::to_string(keep) + " outside [1, " + std::to_string(rows * cols) + "]");
  }
  if (in.remaining() != 2 * keep) {
    if (in.remaining() < 2 * keep) throw FormatError("truncated coefficient payload");
    throw FormatError("trailing bytes after coefficient payload");
  }
  Tensor coeffs(Shape{rows, cols}, 0.0);
  const ZigzagOrder zz(rows, cols);
  for (std::size_t k = 0; k < keep; ++k) coeffs[zz.at(k)] = from_half_bits(in.u16("coefficient"));
  return FreqParam(std::move(shape), std::move(coeffs), keep);
}

/// Parameter names map to file names by replacing anything outside
/// [A-Za-z0-9._-] with '_'.
inline std::string checkpoint_file_name(const std::string& name) {
  std::string out;
  for (char c : name) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
    out.push_back(ok ? c : '_');
  }
  return out + ".frp";
}

/// Directory checkpoint: one FRP1 file per parameter plus manifest.json
/// ({"format", "params": [{name, file, shape, keep}], ...extra}).
inline void write_checkpoint(const std::filesystem::path& dir,
                             const std::vector<NamedFreqParam>& params, json extra = json::object()) {
  ensure_directory(dir);
  json entries = json::array();
  for (const auto& [name, p] : params) {
    const std::string file = checkpoint_file_name(name);
    write_binary_file(dir / file, serialize_freqparam(*p));
    entries.push_back({{"name", name}, {"file", file}, {"shape", p->spatial_shape()}, {"keep", p->keep()}});
  }
  extra["format"] = "FRP1-dir";
  extra["params"] = std::move(entries);
  write_text_file(dir / "manifest.json", dump_json(extra));
}

struct LoadedCheckpoint {
  std::map<std::string, FreqParam> params;
  json manifest;
};

inline LoadedCheckpoint read_checkpoint(const std::filesystem::path& dir) {
  LoadedCheckpoint out;
  const auto manifest_path = dir / "manifest.json";
  out.manifest = parse_strict_json(read_text_file(manifest_path), manifest_path.string());
  if (!out.manifest.contains("params") || !out.manifest["params"].is_array()) {
    throw FormatError(manifest_path.string() + ": missing params array");
  }
  for (const auto& entry : out.manifest["params"]) {
    try {
      const auto name = entry.at("name").get<std::string>();
      const auto file = entry.at("file").get<std::string>();
      const auto bytes = read_binary_file(dir / file);
      FreqParam p = deserialize_freqparam(bytes);
      if (p.spatial_shape() != entry.at("shape").get<Shape>() ||
          p.keep() != entry.at("keep").get<std::size_t>()) {
        throw FormatError(file + " disagrees with its manifest entry");
      }
      out.params.emplace(name, std::move(p));
    } catch (const json::exception& e) {
      throw FormatError(manifest_path.string() + ": bad param entry: " + e.what());
    }
  }
  return out;
}

}  // namespace frk
