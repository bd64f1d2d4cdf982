#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "whorl/error.hpp"
#include "whorl/io/ascii_xyz.hpp"
#include "whorl/io/las.hpp"
#include "whorl/io/ply.hpp"
#include "whorl/types.hpp"

namespace whorl {

enum class PointFormat { AsciiXyz, Ply, Las };

/// One tree's points. `z_base` is the robust base height (1st percentile of
/// z); `z_offset` accumulates the shifts applied by normalize_height.
struct TreeCloud {
  std::string tree_id;
  std::vector<Point3> points;
  double z_base = 0.0;
  double z_offset = 0.0;

  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }
};

/// Vertical stem axis through (x0, y0).
struct StemAxis {
  double x0 = 0.0;
  double y0 = 0.0;
};

inline constexpr double kBasePercentile = 1.0;
inline constexpr double kStemFootHeight = 1.0;
inline constexpr double kStemFallbackFraction = 0.05;

/// Nearest-rank percentile: the smallest value with at least `pct` percent
/// of the data at or below it. Always returns a member of `values`.
inline double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw Error("percentile of an empty set");
  const double n = static_cast<double>(values.size());
  const auto rank = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::clamp(pct, 0.0, 100.0) / 100.0 * n)));
  const auto k = std::min(rank, values.size()) - 1;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

inline double robust_base(const std::vector<Point3>& points) {
  std::vector<double> z;
  z.reserve(points.size());
  for (const auto& p : points) z.push_back(p.z);
  return percentile(std::move(z), kBasePercentile);
}

inline std::optional<PointFormat> format_from_extension(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".xyz" || ext == ".txt" || ext == ".asc" || ext == ".pts") return PointFormat::AsciiXyz;
  if (ext == ".ply") return PointFormat::Ply;
  if (ext == ".las") return PointFormat::Las;
  return std::nullopt;
}

inline TreeCloud make_tree_cloud(std::string tree_id, std::vector<Point3> points) {
  if (points.empty()) throw Error("tree '" + tree_id + "': zero points");
  TreeCloud cloud;
  cloud.tree_id = std::move(tree_id);
  cloud.points = std::move(points);
  cloud.z_base = robust_base(cloud.points);
  return cloud;
}

/// Reads one tree. The id defaults to the file stem.
inline TreeCloud read_point_cloud(const std::filesystem::path& path, PointFormat format,
                                  std::optional<std::string> tree_id = std::nullopt) {
  if (!std::filesystem::exists(path)) throw IoError("cannot open '" + path.string() + "': no such file");
  std::vector<Point3> points;
  switch (format) {
    case PointFormat::AsciiXyz: points = io::read_ascii_xyz(path); break;
    case PointFormat::Ply: points = io::read_ply(path); break;
    case PointFormat::Las: points = io::read_las(path); break;
  }
  if (points.empty()) throw ParseError("'" + path.string() + "': zero points");
  return make_tree_cloud(tree_id.value_or(path.stem().string()), std::move(points));
}

inline TreeCloud read_point_cloud(const std::filesystem::path& path) {
  const auto format = format_from_extension(path);
  if (!format) throw Error("'" + path.string() + "': unknown point cloud extension");
  return read_point_cloud(path, *format);
}

/// Shifts z so the robust base sits at 0.
inline TreeCloud normalize_height(TreeCloud cloud) {
  if (cloud.empty()) throw Error("tree '" + cloud.tree_id + "': zero points");
  const double shift = cloud.z_base;
  if (shift != 0.0) {
    for (auto& p : cloud.points) p.z -= shift;
  }
  cloud.z_offset += shift;
  cloud.z_base = 0.0;
  return cloud;
}

/// Centroid of the points within 1 m above the base; falls back to the lowest
/// 5% of points when nothing lies that low.
inline StemAxis estimate_stem_axis(const TreeCloud& cloud) {
  if (cloud.empty()) throw Error("tree '" + cloud.tree_id + "': zero points");
  const double limit = cloud.z_base + kStemFootHeight;
  double sx = 0.0, sy = 0.0;
  std::size_t n = 0;
  for (const auto& p : cloud.points) {
    if (p.z < limit) {
      sx += p.x;
      sy += p.y;
      ++n;
    }
  }
  if (n == 0) {
    std::vector<Point3> sorted = cloud.points;
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(kStemFallbackFraction * static_cast<double>(sorted.size()))));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep - 1), sorted.end(),
                     [](const Point3& a, const Point3& b) { return a.z < b.z; });
    for (std::size_t i = 0; i < keep; ++i) {
      sx += sorted[i].x;
      sy += sorted[i].y;
    }
    n = keep;
  }
  return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

/// Axis-aligned extent of a cloud.
struct Bounds {
  Point3 min;
  Point3 max;
};

inline Bounds bounds(const TreeCloud& cloud) {
  if (cloud.empty()) throw Error("bounds of an empty cloud");
  Bounds b{cloud.points.front(), cloud.points.front()};
  for (const auto& p : cloud.points) {
    b.min = {std::min(b.min.x, p.x), std::min(b.min.y, p.y), std::min(b.min.z, p.z)};
    b.max = {std::max(b.max.x, p.x), std::max(b.max.y, p.y), std::max(b.max.z, p.z)};
  }
  return b;
}

}  // namespace whorl
