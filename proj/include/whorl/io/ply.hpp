#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "whorl/error.hpp"
#include "whorl/io/bytes.hpp"
#include "whorl/types.hpp"

namespace whorl::io {

namespace ply {

enum class Scalar { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

inline std::optional<Scalar> parse_scalar(std::string_view name) {
  if (name == "char" || name == "int8") return Scalar::Int8;
  if (name == "uchar" || name == "uint8") return Scalar::UInt8;
  if (name == "short" || name == "int16") return Scalar::Int16;
  if (name == "ushort" || name == "uint16") return Scalar::UInt16;
  if (name == "int" || name == "int32") return Scalar::Int32;
  if (name == "uint" || name == "uint32") return Scalar::UInt32;
  if (name == "float" || name == "float32") return Scalar::Float32;
  if (name == "double" || name == "float64") return Scalar::Float64;
  return std::nullopt;
}

inline std::size_t scalar_size(Scalar s) {
  switch (s) {
    case Scalar::Int8:
    case Scalar::UInt8: return 1;
    case Scalar::Int16:
    case Scalar::UInt16: return 2;
    case Scalar::Int32:
    case Scalar::UInt32:
    case Scalar::Float32: return 4;
    case Scalar::Float64: return 8;
  }
  return 0;
}

inline double load_scalar(std::span<const std::byte> bytes, std::size_t offset, Scalar s) {
  switch (s) {
    case Scalar::Int8: return load_le<std::int8_t>(bytes, offset);
    case Scalar::UInt8: return load_le<std::uint8_t>(bytes, offset);
    case Scalar::Int16: return load_le<std::int16_t>(bytes, offset);
    case Scalar::UInt16: return load_le<std::uint16_t>(bytes, offset);
    case Scalar::Int32: return load_le<std::int32_t>(bytes, offset);
    case Scalar::UInt32: return load_le<std::uint32_t>(bytes, offset);
    case Scalar::Float32: return load_le<float>(bytes, offset);
    case Scalar::Float64: return load_le<double>(bytes, offset);
  }
  return 0.0;
}

struct Property {
  std::string name;
  Scalar type = Scalar::Float32;
  bool is_list = false;
  Scalar count_type = Scalar::UInt8;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> properties;
};

enum class Encoding { Ascii, BinaryLittleEndian };

struct Header {
  Encoding encoding = Encoding::Ascii;
  std::vector<Element> elements;
  std::size_t body_offset = 0;
};

inline Header parse_header(std::span<const std::byte> bytes, const std::string& source) {
  std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  if (!text.starts_with("ply")) throw ParseError(source + ": missing 'ply' magic at byte 0");

  Header header;
  bool have_format = false;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (true) {
    const auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) throw ParseError(source + ": header has no 'end_header'");
    std::string line(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();

    std::istringstream words(line);
    std::string keyword;
    words >> keyword;
    const auto where = source + ": header line " + std::to_string(line_no);
    if (keyword == "end_header") break;
    if (keyword == "ply" || keyword == "comment" || keyword == "obj_info" || keyword.empty()) continue;
    if (keyword == "format") {
      std::string enc;
      words >> enc;
      if (enc == "ascii") header.encoding = Encoding::Ascii;
      else if (enc == "binary_little_endian") header.encoding = Encoding::BinaryLittleEndian;
      else throw ParseError(where + ": unsupported format '" + enc + "'");
      have_format = true;
    } else if (keyword == "element") {
      Element el;
      long long count = -1;
      words >> el.name >> count;
      if (el.name.empty() || count < 0) throw ParseError(where + ": malformed element declaration");
      el.count = static_cast<std::size_t>(count);
      header.elements.push_back(std::move(el));
    } else if (keyword == "property") {
      if (header.elements.empty()) throw ParseError(where + ": property before any element");
      Property prop;
      std::string type;
      words >> type;
      if (type == "list") {
        std::string count_type, item_type;
        words >> count_type >> item_type >> prop.name;
        auto ct = parse_scalar(count_type);
        auto it = parse_scalar(item_type);
        if (!ct || !it) throw ParseError(where + ": unknown list property type");
        prop.is_list = true;
        prop.count_type = *ct;
        prop.type = *it;
      } else {
        words >> prop.name;
        auto st = parse_scalar(type);
        if (!st) throw ParseError(where + ": unknown property type '" + type + "'");
        prop.type = *st;
      }
      if (prop.name.empty()) throw ParseError(where + ": property without a name");
      header.elements.back().properties.push_back(std::move(prop));
    } else {
      throw ParseError(where + ": unexpected keyword '" + keyword + "'");
    }
  }
  if (!have_format) throw ParseError(source + ": header has no format line");
  header.body_offset = pos;
  return header;
}

}  // namespace ply

/// Reads vertex x,y,z from an ascii or binary little-endian PLY file. Other
/// elements and properties are skipped.
inline std::vector<Point3> read_ply(const std::filesystem::path& path) {
  const std::string source = path.string();
  const auto bytes = read_file_bytes(path);
  const auto header = ply::parse_header(bytes, source);

  std::vector<Point3> points;
  std::size_t offset = header.body_offset;

  // Ascii body state: one record per line.
  std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  std::size_t ascii_line = 0;

  auto next_ascii_line = [&]() -> std::string_view {
    if (offset >= text.size()) throw ParseError(source + ": unexpected end of file in body");
    auto eol = text.find('\n', offset);
    if (eol == std::string_view::npos) eol = text.size();
    auto line = text.substr(offset, eol - offset);
    offset = eol + 1;
    ++ascii_line;
    return line;
  };

  bool found_vertex = false;
  for (const auto& el : header.elements) {
    const bool is_vertex = el.name == "vertex";
    int ix = -1, iy = -1, iz = -1;
    if (is_vertex) {
      found_vertex = true;
      for (std::size_t p = 0; p < el.properties.size(); ++p) {
        const auto& prop = el.properties[p];
        if (prop.is_list) continue;
        if (prop.name == "x") ix = static_cast<int>(p);
        if (prop.name == "y") iy = static_cast<int>(p);
        if (prop.name == "z") iz = static_cast<int>(p);
      }
      if (ix < 0 || iy < 0 || iz < 0) throw ParseError(source + ": vertex element lacks x/y/z properties");
      points.reserve(el.count);
    }

    std::vector<double> values(el.properties.size());
    for (std::size_t r = 0; r < el.count; ++r) {
      if (header.encoding == ply::Encoding::BinaryLittleEndian) {
        const std::size_t record_start = offset;
        for (std::size_t p = 0; p < el.properties.size(); ++p) {
          const auto& prop = el.properties[p];
          if (prop.is_list) {
            const auto n = static_cast<std::size_t>(ply::load_scalar(bytes, offset, prop.count_type));
            offset += ply::scalar_size(prop.count_type) + n * ply::scalar_size(prop.type);
          } else {
            values[p] = ply::load_scalar(bytes, offset, prop.type);
            offset += ply::scalar_size(prop.type);
          }
        }
        if (offset > bytes.size())
          throw ParseError(source + ": truncated " + el.name + " record at byte " + std::to_string(record_start));
        if (is_vertex) {
          Point3 pt{values[ix], values[iy], values[iz]};
          if (!is_finite(pt))
            throw ParseError(source + ": non-finite vertex at byte " + std::to_string(record_start));
          points.push_back(pt);
        }
      } else {
        const auto line = next_ascii_line();
        const auto where = source + ": body line " + std::to_string(ascii_line);
        const char* cur = line.data();
        const char* end = line.data() + line.size();
        auto next_number = [&]() -> double {
          while (cur < end && (*cur == ' ' || *cur == '\t' || *cur == '\r')) ++cur;
          if (cur < end && *cur == '+') ++cur;
          double v = 0.0;
          auto [ptr, ec] = std::from_chars(cur, end, v);
          if (ec != std::errc{}) throw ParseError(where + ": malformed number");
          cur = ptr;
          return v;
        };
        for (std::size_t p = 0; p < el.properties.size(); ++p) {
          const auto& prop = el.properties[p];
          if (prop.is_list) {
            const auto n = static_cast<std::size_t>(next_number());
            for (std::size_t k = 0; k < n; ++k) next_number();
          } else {
            values[p] = next_number();
          }
        }
        if (is_vertex) {
          Point3 pt{values[ix], values[iy], values[iz]};
          if (!is_finite(pt)) throw ParseError(where + ": non-finite vertex");
          points.push_back(pt);
        }
      }
    }
    if (is_vertex) break;
  }
  if (!found_vertex) throw ParseError(source + ": no vertex element");
  return points;
}

}  // namespace whorl::io
