#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "whorl/error.hpp"
#include "whorl/io/bytes.hpp"
#include "whorl/types.hpp"

namespace whorl::io {

namespace detail {

inline bool is_blank(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f'; }

}  // namespace detail

/// Parses whitespace separated "x y z [extra...]" records. Blank lines and
/// lines starting with '#' are skipped.
inline std::vector<Point3> parse_ascii_xyz(std::string_view text, std::string_view source = "<memory>") {
  std::vector<Point3> points;
  points.reserve(text.size() / 24);

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;

    std::size_t i = 0;
    while (i < line.size() && detail::is_blank(line[i])) ++i;
    if (i == line.size() || line[i] == '#') continue;

    double xyz[3];
    for (int k = 0; k < 3; ++k) {
      while (i < line.size() && detail::is_blank(line[i])) ++i;
      const char* first = line.data() + i;
      const char* last = line.data() + line.size();
      if (first == last) {
        throw ParseError(std::string(source) + ":" + std::to_string(line_no) + ": expected 3 fields, found " +
                         std::to_string(k));
      }
      // from_chars rejects a leading '+', which some exporters emit.
      if (*first == '+') ++first;
      auto [ptr, ec] = std::from_chars(first, last, xyz[k]);
      if (ec != std::errc{} || (ptr != last && !detail::is_blank(*ptr))) {
        throw ParseError(std::string(source) + ":" + std::to_string(line_no) + ": malformed number in field " +
                         std::to_string(k + 1));
      }
      if (!std::isfinite(xyz[k])) {
        throw ParseError(std::string(source) + ":" + std::to_string(line_no) + ": non-finite coordinate");
      }
      i = static_cast<std::size_t>(ptr - line.data());
    }
    points.push_back({xyz[0], xyz[1], xyz[2]});
  }
  return points;
}

inline std::vector<Point3> read_ascii_xyz(const std::filesystem::path& path) {
  return parse_ascii_xyz(read_file_text(path), path.string());
}

/// Shortest round-trip decimal form, so write-then-read is exact.
inline void append_number(std::string& out, double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

inline std::string format_ascii_xyz(const std::vector<Point3>& points) {
  std::string out;
  out.reserve(points.size() * 32);
  for (const auto& p : points) {
    append_number(out, p.x);
    out.push_back(' ');
    append_number(out, p.y);
    out.push_back(' ');
    append_number(out, p.z);
    out.push_back('\n');
  }
  return out;
}

inline void write_ascii_xyz(const std::filesystem::path& path, const std::vector<Point3>& points) {
  write_file_text(path, format_ascii_xyz(points));
}

}  // namespace whorl::io
