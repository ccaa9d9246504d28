#pragma once

// File formats:
//   annotation JSON  {"image_height": H, "image_width": W, "points": [[x, y], ...]}
//   .bcm             "BCM1", u32 grid_h, u32 grid_w, u32 channels, then
//                    channels * grid_h * grid_w little-endian float32, channel-outermost
//   bin config JSON  {"bins": [[lo, hi], ..., [K, null]], "centers": [...]}
// Tensor blocks inside checkpoints use the same header with magic "BCM8" and
// float64 payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

#include <json.hpp>

#include "zipcount/blockgrid.hpp"
#include "zipcount/tensor.hpp"

namespace zipcount {

namespace fs = std::filesystem;
using json = nlohmann::json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t k = 0; k < sizeof(U); ++k) out.push_back(static_cast<char>((value >> (8 * k)) & 0xFFu));
}

template <typename U>
U get_le(std::string_view in, std::size_t offset) {
  U value = 0;
  for (std::size_t k = 0; k < sizeof(U); ++k) {
    value |= static_cast<U>(static_cast<unsigned char>(in[offset + k])) << (8 * k);
  }
  return value;
}

template <typename T>
struct TensorCodec;
template <>
struct TensorCodec<float> {
  using Bits = std::uint32_t;
  static constexpr std::string_view magic = "BCM1";
};
template <>
struct TensorCodec<double> {
  using Bits = std::uint64_t;
  static constexpr std::string_view magic = "BCM8";
};

}  // namespace detail

inline constexpr std::size_t kBcmHeaderBytes = 16;

/// Serialize a tensor to the .bcm byte layout (float: "BCM1", double: "BCM8").
template <typename T>
std::string encode_tensor(const Tensor3<T>& t) {
  using Codec = detail::TensorCodec<T>;
  for (auto d : {t.channels(), t.height(), t.width()}) {
    if (d > 0xFFFFFFFFu) throw FormatError("tensor dimension exceeds u32");
  }
  std::string out(Codec::magic);
  out.reserve(kBcmHeaderBytes + t.size() * sizeof(T));
  detail::put_le(out, static_cast<std::uint32_t>(t.height()));
  detail::put_le(out, static_cast<std::uint32_t>(t.width()));
  detail::put_le(out, static_cast<std::uint32_t>(t.channels()));
  for (T v : t.values()) detail::put_le(out, std::bit_cast<typename Codec::Bits>(v));
  return out;
}

/// Decode one tensor starting at offset; advances offset past it.
template <typename T>
Tensor3<T> decode_tensor(std::string_view bytes, std::size_t& offset) {
  using Codec = detail::TensorCodec<T>;
  if (bytes.size() < offset + kBcmHeaderBytes) throw FormatError("truncated tensor header");
  if (bytes.substr(offset, 4) != Codec::magic) {
    throw FormatError("bad magic, expected " + std::string(Codec::magic));
  }
  const auto h = detail::get_le<std::uint32_t>(bytes, offset + 4);
  const auto w = detail::get_le<std::uint32_t>(bytes, offset + 8);
  const auto c = detail::get_le<std::uint32_t>(bytes, offset + 12);
  offset += kBcmHeaderBytes;
  const std::uint64_t n = std::uint64_t(h) * w * c;
  if ((bytes.size() - offset) / sizeof(T) < n) throw FormatError("truncated tensor payload");
  Tensor3<T> t(c, h, w);
  auto vals = t.values();
  for (std::uint64_t k = 0; k < n; ++k) {
    vals[k] = std::bit_cast<T>(detail::get_le<typename Codec::Bits>(bytes, offset));
    offset += sizeof(T);
  }
  return t;
}

template <typename T>
Tensor3<T> decode_tensor(std::string_view bytes) {
  std::size_t offset = 0;
  auto t = decode_tensor<T>(bytes, offset);
  if (offset != bytes.size()) throw FormatError("trailing bytes after tensor");
  return t;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

/// Write via a sibling temporary and rename, so readers never see a partial file.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_bcm(const fs::path& path, const Tensor3<float>& t) {
  write_file_atomic(path, encode_tensor(t));
}

inline Tensor3<float> read_bcm(const fs::path& path) { return decode_tensor<float>(read_file(path)); }

/// Count map as a one-channel float tensor (exact for counts below 2^24).
inline Tensor3<float> to_float_map(const CountMap& m) {
  Tensor3<float> t(1, m.counts.height(), m.counts.width());
  for (std::size_t b = 0; b < m.blocks(); ++b) t.at(0, b) = static_cast<float>(m.at(b));
  return t;
}

template <typename Real>
Tensor3<float> to_float_map(const Tensor3<Real>& m) {
  Tensor3<float> t(m.channels(), m.height(), m.width());
  for (std::size_t k = 0; k < m.size(); ++k) t.values()[k] = static_cast<float>(m.values()[k]);
  return t;
}

// ---------------------------------------------------------------------------
// Annotation JSON

inline AnnotationSet annotation_from_json(const json& j) {
  AnnotationSet ann;
  try {
    const auto h = j.at("image_height").get<std::int64_t>();
    const auto w = j.at("image_width").get<std::int64_t>();
    if (h <= 0 || w <= 0) throw FormatError("image size must be positive");
    ann.image_h = static_cast<std::size_t>(h);
    ann.image_w = static_cast<std::size_t>(w);
    for (const auto& p : j.at("points")) {
      if (!p.is_array() || p.size() != 2) throw FormatError("each point must be [x, y]");
      ann.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed annotation: ") + e.what());
  }
  return ann;
}

inline json annotation_to_json(const AnnotationSet& ann) {
  json pts = json::array();
  for (const auto& p : ann.points) pts.push_back({p.x, p.y});
  return {{"image_height", ann.image_h}, {"image_width", ann.image_w}, {"points", pts}};
}

inline AnnotationSet read_annotation(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return annotation_from_json(j);
}

inline void write_annotation(const fs::path& path, const AnnotationSet& ann) {
  write_file_atomic(path, annotation_to_json(ann).dump());
}

// ---------------------------------------------------------------------------
// Bin scheme JSON

inline json bins_to_json(const BinScheme& s) {
  json bins = json::array();
  for (const auto& b : s.bins()) {
    bins.push_back(b.hi ? json{b.lo, *b.hi} : json{b.lo, nullptr});
  }
  return {{"bins", bins}, {"centers", std::vector<double>(s.centers().begin(), s.centers().end())}};
}

/// Parse a bin config. "centers" may be omitted, in which case singleton bins
/// use their value, closed bins their midpoint and the open bin lo + 1.
inline BinScheme bins_from_json(const json& j) {
  try {
    std::vector<Bin> bins;
    for (const auto& b : j.at("bins")) {
      if (!b.is_array() || b.size() != 2) throw FormatError("each bin must be [lo, hi|null]");
      Bin bin{b[0].get<std::int64_t>(), std::nullopt};
      if (!b[1].is_null()) bin.hi = b[1].get<std::int64_t>();
      bins.push_back(bin);
    }
    std::vector<double> centers;
    if (j.contains("centers")) {
      centers = j.at("centers").get<std::vector<double>>();
    } else {
      for (const auto& b : bins) centers.push_back(b.hi ? 0.5 * double(b.lo + *b.hi) : double(b.lo + 1));
    }
    return BinScheme(std::move(bins), std::move(centers));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed bin config: ") + e.what());
  }
}

}  // namespace zipcount
