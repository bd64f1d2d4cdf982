#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "whorl/error.hpp"
#include "whorl/io/bytes.hpp"
#include "whorl/types.hpp"

namespace whorl::io {

/// Fields of the LAS public header block that point decoding needs.
struct LasHeader {
  std::uint8_t version_major = 1;
  std::uint8_t version_minor = 2;
  std::uint16_t header_size = 227;
  std::uint32_t point_data_offset = 227;
  std::uint8_t point_format = 0;
  std::uint16_t point_record_length = 20;
  std::uint64_t point_count = 0;
  double scale[3] = {0.001, 0.001, 0.001};
  double offset[3] = {0.0, 0.0, 0.0};
};

/// Byte offsets of the public header block (identical for 1.2 to 1.4).
namespace las_layout {
inline constexpr std::size_t version_major = 24;
inline constexpr std::size_t version_minor = 25;
inline constexpr std::size_t header_size = 94;
inline constexpr std::size_t point_data_offset = 96;
inline constexpr std::size_t point_format = 104;
inline constexpr std::size_t point_record_length = 105;
inline constexpr std::size_t legacy_point_count = 107;
inline constexpr std::size_t scale = 131;
inline constexpr std::size_t offset = 155;
inline constexpr std::size_t extended_point_count = 247;  // 1.4 only
}  // namespace las_layout

/// Minimum record length per point data format 0..3.
inline constexpr std::uint16_t las_min_record_length[4] = {20, 28, 26, 34};

inline LasHeader parse_las_header(std::span<const std::byte> bytes, const std::string& source) {
  if (bytes.size() < 227) throw ParseError(source + ": file shorter than a LAS header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), "LASF", 4) != 0) throw ParseError(source + ": missing 'LASF' signature at byte 0");

  LasHeader h;
  h.version_major = load_le<std::uint8_t>(bytes, las_layout::version_major);
  h.version_minor = load_le<std::uint8_t>(bytes, las_layout::version_minor);
  if (h.version_major != 1 || h.version_minor < 2 || h.version_minor > 4) {
    throw ParseError(source + ": unsupported LAS version " + std::to_string(h.version_major) + "." +
                     std::to_string(h.version_minor) + " at byte 24");
  }
  h.header_size = load_le<std::uint16_t>(bytes, las_layout::header_size);
  h.point_data_offset = load_le<std::uint32_t>(bytes, las_layout::point_data_offset);
  const auto raw_format = load_le<std::uint8_t>(bytes, las_layout::point_format);
  if (raw_format & 0xC0) throw ParseError(source + ": compressed (LAZ) point data is not supported (byte 104)");
  h.point_format = raw_format;
  if (h.point_format > 3) {
    throw ParseError(source + ": unsupported point data format " + std::to_string(h.point_format) + " at byte 104");
  }
  h.point_record_length = load_le<std::uint16_t>(bytes, las_layout::point_record_length);
  if (h.point_record_length < las_min_record_length[h.point_format]) {
    throw ParseError(source + ": point record length " + std::to_string(h.point_record_length) +
                     " too short for format " + std::to_string(h.point_format) + " at byte 105");
  }
  h.point_count = load_le<std::uint32_t>(bytes, las_layout::legacy_point_count);
  if (h.version_minor == 4 && h.header_size >= 375) {
    const auto extended = load_le<std::uint64_t>(bytes, las_layout::extended_point_count);
    if (extended != 0) h.point_count = extended;
  }
  for (int k = 0; k < 3; ++k) {
    h.scale[k] = load_le<double>(bytes, las_layout::scale + 8 * k);
    h.offset[k] = load_le<double>(bytes, las_layout::offset + 8 * k);
    if (!std::isfinite(h.scale[k]) || h.scale[k] == 0.0 || !std::isfinite(h.offset[k]))
      throw ParseError(source + ": invalid scale/offset at byte " + std::to_string(las_layout::scale + 8 * k));
  }
  return h;
}

/// Reads X,Y,Z of every point record, applying the per-file scale and offset.
inline std::vector<Point3> read_las(const std::filesystem::path& path) {
  const std::string source = path.string();
  const auto bytes = read_file_bytes(path);
  const auto h = parse_las_header(bytes, source);

  const std::size_t needed =
      static_cast<std::size_t>(h.point_data_offset) + static_cast<std::size_t>(h.point_count) * h.point_record_length;
  if (needed > bytes.size()) {
    throw ParseError(source + ": point data truncated, expected " + std::to_string(needed) + " bytes, file has " +
                     std::to_string(bytes.size()));
  }

  std::vector<Point3> points;
  points.reserve(h.point_count);
  for (std::uint64_t i = 0; i < h.point_count; ++i) {
    const std::size_t at = h.point_data_offset + static_cast<std::size_t>(i) * h.point_record_length;
    const auto X = load_le<std::int32_t>(bytes, at);
    const auto Y = load_le<std::int32_t>(bytes, at + 4);
    const auto Z = load_le<std::int32_t>(bytes, at + 8);
    points.push_back({X * h.scale[0] + h.offset[0], Y * h.scale[1] + h.offset[1], Z * h.scale[2] + h.offset[2]});
  }
  return points;
}

/// Writes a minimal uncompressed LAS 1.2 file with point format 0. Coordinates
/// are quantized with `scale`.
inline void write_las(const std::filesystem::path& path, const std::vector<Point3>& points, double scale = 1e-4,
                      Point3 offset = {}) {
  std::vector<std::byte> out;
  out.reserve(227 + points.size() * 20);
  const char sig[4] = {'L', 'A', 'S', 'F'};
  for (char c : sig) out.push_back(static_cast<std::byte>(c));
  out.resize(227, std::byte{0});
  auto put = [&](std::size_t at, auto value) {
    std::vector<std::byte> tmp;
    store_le(tmp, value);
    std::copy(tmp.begin(), tmp.end(), out.begin() + static_cast<std::ptrdiff_t>(at));
  };
  put(las_layout::version_major, std::uint8_t{1});
  put(las_layout::version_minor, std::uint8_t{2});
  put(las_layout::header_size, std::uint16_t{227});
  put(las_layout::point_data_offset, std::uint32_t{227});
  put(las_layout::point_format, std::uint8_t{0});
  put(las_layout::point_record_length, std::uint16_t{20});
  put(las_layout::legacy_point_count, static_cast<std::uint32_t>(points.size()));
  const double offs[3] = {offset.x, offset.y, offset.z};
  for (int k = 0; k < 3; ++k) {
    put(las_layout::scale + 8 * k, scale);
    put(las_layout::offset + 8 * k, offs[k]);
  }
  for (const auto& p : points) {
    const double v[3] = {p.x, p.y, p.z};
    for (int k = 0; k < 3; ++k) store_le(out, static_cast<std::int32_t>(std::llround((v[k] - offs[k]) / scale)));
    out.resize(out.size() + 8, std::byte{0});  // intensity, flags, classification, angle, user data, source id
  }
  write_file_bytes(path, out);
}

}  // namespace whorl::io
