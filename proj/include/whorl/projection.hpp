#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "whorl/error.hpp"
#include "whorl/pointcloud_io.hpp"

namespace whorl {

/// View and window layout of the section images.
struct SlicingConfig {
  std::vector<double> view_angles_deg{0.0, 45.0, 90.0, 135.0};
  /// Infinity keeps every point ("full" slab).
  double slab_thickness_m = 1.0;
  double section_height_m = 10.0;
  double section_overlap_m = 1.0;
  double window_width_m = 10.0;
  int marker_radius_px = 0;

  void validate() const {
    if (view_angles_deg.empty()) throw ConfigError("at least one view angle is required");
    for (double a : view_angles_deg)
      if (!(a >= 0.0 && a < 360.0)) throw ConfigError("view angle " + std::to_string(a) + " outside [0,360)");
    if (!(slab_thickness_m > 0.0)) throw ConfigError("slab_thickness_m must be > 0");
    if (!(section_height_m > 0.0) || !std::isfinite(section_height_m))
      throw ConfigError("section_height_m must be a positive finite length");
    if (!(section_overlap_m > 0.0 && section_overlap_m < section_height_m))
      throw ConfigError("section_overlap_m must lie in (0, section_height_m)");
    if (!(window_width_m > 0.0) || !std::isfinite(window_width_m)) throw ConfigError("window_width_m must be > 0");
    if (marker_radius_px < 0) throw ConfigError("marker_radius_px must be >= 0");
  }
};

inline constexpr int kDefaultImagePx = 1000;

/// World extent of one section image. Row 0 is the top edge (z_max); column 0
/// is the left edge (x_min).
struct ImageMeta {
  std::string tree_id;
  double view_angle_deg = 0.0;
  int section_index = 0;
  double x_min = 0.0;
  double x_max = 0.0;
  double z_min = 0.0;
  double z_max = 0.0;
  int width_px = 0;
  int height_px = 0;

  double gsd_x() const { return (x_max - x_min) / width_px; }
  double gsd_z() const { return (z_max - z_min) / height_px; }

  void validate() const {
    if (!(x_max > x_min) || !(z_max > z_min)) throw SchemaError("image bbox is empty or inverted");
    if (width_px <= 0 || height_px <= 0) throw SchemaError("image dimensions must be positive");
    if (section_index < 0) throw SchemaError("section_index must be >= 0");
  }

  friend bool operator==(const ImageMeta&, const ImageMeta&) = default;
};

struct PixelIndex {
  int col = 0;
  int row = 0;
  friend bool operator==(const PixelIndex&, const PixelIndex&) = default;
};

/// World (x, z) to the containing pixel, clamped to the raster.
inline PixelIndex world_to_pixel(const ImageMeta& meta, double x, double z) {
  const int col = static_cast<int>(std::floor((x - meta.x_min) / meta.gsd_x()));
  const int row = static_cast<int>(std::floor((meta.z_max - z) / meta.gsd_z()));
  return {std::clamp(col, 0, meta.width_px - 1), std::clamp(row, 0, meta.height_px - 1)};
}

inline PlanePoint pixel_center_to_world(const ImageMeta& meta, PixelIndex px) {
  return {meta.x_min + (px.col + 0.5) * meta.gsd_x(), meta.z_max - (px.row + 0.5) * meta.gsd_z()};
}

/// World (x, z) to coordinates relative to the image width and height, the
/// convention pose detectors report keypoints in.
inline PlanePoint world_to_normalized(const ImageMeta& meta, PlanePoint world) {
  return {(world.x - meta.x_min) / (meta.x_max - meta.x_min), (meta.z_max - world.z) / (meta.z_max - meta.z_min)};
}

/// Inverse of world_to_normalized; `norm.z` is the image y coordinate.
inline PlanePoint normalized_to_world(const ImageMeta& meta, double x_norm, double y_norm) {
  return {meta.x_min + x_norm * (meta.x_max - meta.x_min), meta.z_max - y_norm * (meta.z_max - meta.z_min)};
}

/// Shortest decimal text for an angle, without a trailing ".0" for whole degrees.
inline std::string format_angle(double deg) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), deg);
  return {buf, ptr};
}

/// File stem shared by an image and its metadata sidecar.
inline std::string image_stem(const ImageMeta& meta) {
  return meta.tree_id + "_v" + format_angle(meta.view_angle_deg) + "_s" + std::to_string(meta.section_index);
}

inline std::string image_name(const ImageMeta& meta) { return image_stem(meta) + ".png"; }

inline void to_json(nlohmann::json& j, const ImageMeta& m) {
  j = nlohmann::json{{"tree_id", m.tree_id}, {"view_angle_deg", m.view_angle_deg}, {"section_index", m.section_index},
                     {"x_min", m.x_min},     {"x_max", m.x_max},                   {"z_min", m.z_min},
                     {"z_max", m.z_max},     {"width_px", m.width_px},             {"height_px", m.height_px}};
}

inline void from_json(const nlohmann::json& j, ImageMeta& m) {
  auto field = [&](const char* name) -> const nlohmann::json& {
    if (!j.is_object() || !j.contains(name)) throw SchemaError(std::string("image metadata: missing field '") + name + "'");
    return j.at(name);
  };
  auto number = [&](const char* name) {
    const auto& v = field(name);
    if (!v.is_number()) throw SchemaError(std::string("image metadata: field '") + name + "' must be a number");
    return v.get<double>();
  };
  auto integer = [&](const char* name) {
    const auto& v = field(name);
    if (!v.is_number_integer()) throw SchemaError(std::string("image metadata: field '") + name + "' must be an integer");
    return v.get<int>();
  };
  const auto& id = field("tree_id");
  if (!id.is_string()) throw SchemaError("image metadata: field 'tree_id' must be a string");
  m.tree_id = id.get<std::string>();
  m.view_angle_deg = number("view_angle_deg");
  m.section_index = integer("section_index");
  m.x_min = number("x_min");
  m.x_max = number("x_max");
  m.z_min = number("z_min");
  m.z_max = number("z_max");
  m.width_px = integer("width_px");
  m.height_px = integer("height_px");
  m.validate();
}

/// RGBA raster, row-major, 4 bytes per pixel.
struct SectionImage {
  ImageMeta meta;
  std::vector<std::uint8_t> rgba;

  static SectionImage blank(ImageMeta meta) {
    SectionImage img;
    img.rgba.assign(static_cast<std::size_t>(meta.width_px) * meta.height_px * 4, 0);
    img.meta = std::move(meta);
    return img;
  }

  std::size_t index(int col, int row) const {
    return (static_cast<std::size_t>(row) * meta.width_px + static_cast<std::size_t>(col)) * 4;
  }
  std::uint8_t alpha(int col, int row) const { return rgba[index(col, row) + 3]; }
  bool opaque(int col, int row) const { return alpha(col, row) == 255; }

  std::size_t count_opaque() const {
    std::size_t n = 0;
    for (std::size_t i = 3; i < rgba.size(); i += 4) n += rgba[i] == 255;
    return n;
  }
};

/// Rotates counter-clockwise by `angle_deg` about the vertical line through
/// `center`. z is untouched.
inline TreeCloud rotate_point_cloud(const TreeCloud& cloud, double angle_deg, const StemAxis& center) {
  TreeCloud out = cloud;
  if (angle_deg == 0.0) return out;
  const double rad = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  for (auto& p : out.points) {
    const double dx = p.x - center.x0;
    const double dy = p.y - center.y0;
    p.x = center.x0 + c * dx - s * dy;
    p.y = center.y0 + s * dx + c * dy;
  }
  return out;
}

/// Keeps points with |y - y0| <= thickness/2, preserving order.
inline TreeCloud slice_center_slab(const TreeCloud& cloud, const StemAxis& center, double thickness_m) {
  if (!(thickness_m > 0.0)) throw ConfigError("slab thickness must be > 0");
  TreeCloud out;
  out.tree_id = cloud.tree_id;
  out.z_base = cloud.z_base;
  out.z_offset = cloud.z_offset;
  if (std::isinf(thickness_m)) {
    out.points = cloud.points;
    return out;
  }
  const double half = thickness_m / 2.0;
  out.points.reserve(cloud.points.size() / 4);
  for (const auto& p : cloud.points)
    if (std::abs(p.y - center.y0) <= half) out.points.push_back(p);
  return out;
}

/// Closed windows [z_lo, z_lo + section_height] stepping by
/// section_height - overlap from z = 0 until the tree top is covered. The last
/// window keeps the full height even when it pokes above the top.
inline std::vector<std::pair<double, double>> split_vertical_sections(double tree_top_m, const SlicingConfig& cfg) {
  const double step = cfg.section_height_m - cfg.section_overlap_m;
  std::vector<std::pair<double, double>> sections;
  for (std::size_t k = 0;; ++k) {
    const double lo = static_cast<double>(k) * step;
    const double hi = lo + cfg.section_height_m;
    sections.emplace_back(lo, hi);
    if (hi >= tree_top_m) break;
  }
  return sections;
}

inline std::vector<std::pair<double, double>> split_vertical_sections(const TreeCloud& cloud, const SlicingConfig& cfg) {
  return split_vertical_sections(bounds(cloud).max.z, cfg);
}

/// Paints every in-window point as an opaque black pixel; everything else
/// stays fully transparent.
inline SectionImage rasterize_section(const TreeCloud& points, const ImageMeta& meta, int marker_radius_px = 0) {
  meta.validate();
  auto img = SectionImage::blank(meta);
  const double gx = meta.gsd_x();
  const double gz = meta.gsd_z();
  const int w = meta.width_px;
  const int h = meta.height_px;
  auto paint = [&](int col, int row) {
    auto* px = &img.rgba[img.index(col, row)];
    px[0] = 0;
    px[1] = 0;
    px[2] = 0;
    px[3] = 255;
  };
  for (const auto& p : points.points) {
    if (p.x < meta.x_min || p.x > meta.x_max || p.z < meta.z_min || p.z > meta.z_max) continue;
    const int col = std::min(static_cast<int>((p.x - meta.x_min) / gx), w - 1);
    const int row = std::min(static_cast<int>((meta.z_max - p.z) / gz), h - 1);
    if (marker_radius_px == 0) {
      paint(col, row);
      continue;
    }
    const int r = marker_radius_px;
    for (int dr = -r; dr <= r; ++dr)
      for (int dc = -r; dc <= r; ++dc)
        if (dr * dr + dc * dc <= r * r) {
          const int cc = col + dc, rr = row + dr;
          if (cc >= 0 && cc < w && rr >= 0 && rr < h) paint(cc, rr);
        }
  }
  return img;
}

/// Meta for one view/section: an x window of `window_width_m` centred on the
/// stem and a z window starting at `z_lo`, both at the same pixel pitch.
inline ImageMeta make_section_meta(const std::string& tree_id, double view_angle_deg, int section_index, double z_lo,
                                   const StemAxis& axis, const SlicingConfig& cfg, int px) {
  ImageMeta meta;
  meta.tree_id = tree_id;
  meta.view_angle_deg = view_angle_deg;
  meta.section_index = section_index;
  meta.x_min = axis.x0 - cfg.window_width_m / 2.0;
  meta.x_max = axis.x0 + cfg.window_width_m / 2.0;
  meta.width_px = px;
  const double gsd = cfg.window_width_m / px;
  meta.height_px = std::max(1, static_cast<int>(std::lround(cfg.section_height_m / gsd)));
  meta.z_min = z_lo;
  const double rows = cfg.section_height_m / gsd;
  meta.z_max = std::abs(rows - std::round(rows)) < 1e-9 ? z_lo + cfg.section_height_m : z_lo + meta.height_px * gsd;
  return meta;
}

/// Rotates into every view, cuts the centre slab and rasterizes each vertical
/// section. Images are ordered by view, then section.
inline std::vector<SectionImage> convert_sections_to_images(const TreeCloud& cloud, const StemAxis& axis,
                                                            const SlicingConfig& cfg, int px = kDefaultImagePx) {
  cfg.validate();
  if (px <= 0) throw ConfigError("image size must be positive");
  const auto sections = split_vertical_sections(cloud, cfg);
  std::vector<SectionImage> images;
  images.reserve(cfg.view_angles_deg.size() * sections.size());
  for (double angle : cfg.view_angles_deg) {
    const auto slab = slice_center_slab(rotate_point_cloud(cloud, angle, axis), axis, cfg.slab_thickness_m);
    for (std::size_t s = 0; s < sections.size(); ++s) {
      const auto meta = make_section_meta(cloud.tree_id, angle, static_cast<int>(s), sections[s].first, axis, cfg, px);
      images.push_back(rasterize_section(slab, meta, cfg.marker_radius_px));
    }
  }
  return images;
}

struct ProjectedTree {
  TreeCloud cloud;  // height-normalized
  StemAxis axis;
  std::vector<SectionImage> images;
};

/// read -> normalize -> stem axis -> section images.
inline ProjectedTree process_point_cloud(const std::filesystem::path& path, const SlicingConfig& cfg,
                                         int px = kDefaultImagePx) {
  ProjectedTree out;
  out.cloud = normalize_height(read_point_cloud(path));
  out.axis = estimate_stem_axis(out.cloud);
  out.images = convert_sections_to_images(out.cloud, out.axis, cfg, px);
  return out;
}

}  // namespace whorl
