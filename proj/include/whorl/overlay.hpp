#pragma once

#include <array>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "whorl/detector.hpp"
#include "whorl/image_io.hpp"
#include "whorl/postprocess.hpp"

namespace whorl {

namespace overlay_style {
inline const cv::Scalar kTip{0, 0, 220};       // red (BGR)
inline const cv::Scalar kCenterMarker{220, 60, 0};  // blue
inline const cv::Scalar kSegment{0, 170, 0};   // green
inline const cv::Scalar kLabel{20, 20, 160};
inline const cv::Scalar kWhorlTick{200, 0, 200};
inline const cv::Scalar kFooter{40, 40, 40};
inline constexpr int kMarkerRadius = 5;
inline constexpr int kFooterHeight = 18;
}  // namespace overlay_style

inline cv::Point keypoint_pixel(const ImageMeta& meta, double x_norm, double y_norm) {
  const int col = std::clamp(static_cast<int>(x_norm * meta.width_px), 0, meta.width_px - 1);
  const int row = std::clamp(static_cast<int>(y_norm * meta.height_px), 0, meta.height_px - 1);
  return {col, row};
}

namespace detail {
inline void stamp_footer(cv::Mat& img, const std::string& text) {
  using namespace overlay_style;
  const int h = std::min(kFooterHeight, img.rows);
  cv::rectangle(img, cv::Rect(0, img.rows - h, img.cols, h), kFooter, cv::FILLED);
  cv::putText(img, text, {4, img.rows - 5}, cv::FONT_HERSHEY_PLAIN, 0.9, cv::Scalar(255, 255, 255), 1, cv::LINE_8);
}

inline std::string geometry_label(const std::optional<double>& angle, const std::optional<double>& len) {
  char buf[64];
  std::string out;
  if (angle) {
    std::snprintf(buf, sizeof(buf), "%.0f deg", *angle);
    out += buf;
  }
  if (len) {
    std::snprintf(buf, sizeof(buf), "%s%.2f m", out.empty() ? "" : " ", *len);
    out += buf;
  }
  return out;
}

inline std::string footer_text(const ImageMeta& meta, std::size_t n, const char* what) {
  return image_stem(meta) + "  " + std::to_string(n) + " " + what;
}
}  // namespace detail

/// Draws each detection's tip-centre-tip polyline, its three keypoint
/// markers and a geometry label onto the image composited over white.
inline cv::Mat render_overlay(const SectionImage& image, std::span<const RawDetection> dets,
                              double kp_score_threshold = DecoderConfig{}.kp_score_threshold) {
  using namespace overlay_style;
  const auto& meta = image.meta;
  cv::Mat out = to_composited_bgr(image);
  for (const auto& raw : dets) {
    const auto d = canonicalize(raw);
    std::array<cv::Point, 3> px;
    for (std::size_t k = 0; k < 3; ++k) px[k] = keypoint_pixel(meta, d.keypoints[k].x, d.keypoints[k].y);
    cv::line(out, px[kLeftTip], px[kCenter], kSegment, 2, cv::LINE_8);
    cv::line(out, px[kCenter], px[kRightTip], kSegment, 2, cv::LINE_8);
    cv::circle(out, px[kLeftTip], kMarkerRadius, kTip, cv::FILLED, cv::LINE_8);
    cv::circle(out, px[kRightTip], kMarkerRadius, kTip, cv::FILLED, cv::LINE_8);
    cv::circle(out, px[kCenter], kMarkerRadius, kCenterMarker, cv::FILLED, cv::LINE_8);

    Whorl w;
    const auto cand = convert_to_real_world(d, meta);
    w.kp_world = cand.kp_world;
    w.kp_scores = cand.kp_scores;
    attach_geometry(w, kp_score_threshold);
    const auto label = detail::geometry_label(w.insertion_angle_deg, w.max_branch_len_m);
    if (!label.empty())
      cv::putText(out, label, px[kCenter] + cv::Point(8, -8), cv::FONT_HERSHEY_SIMPLEX, 0.5, kLabel, 1, cv::LINE_AA);
  }
  detail::stamp_footer(out, detail::footer_text(meta, dets.size(), "detections"));
  return out;
}

/// Marks filtered whorls of this image's tree: a horizontal tick at each
/// whorl height inside the window, labelled with angle and length.
inline cv::Mat render_overlay(const SectionImage& image, std::span<const Whorl> whorls) {
  using namespace overlay_style;
  const auto& meta = image.meta;
  cv::Mat out = to_composited_bgr(image);
  std::size_t drawn = 0;
  const int cx = meta.width_px / 2;
  for (const auto& w : whorls) {
    if (w.tree_id != meta.tree_id || w.z_m < meta.z_min || w.z_m > meta.z_max) continue;
    const auto p = world_to_pixel(meta, 0.5 * (meta.x_min + meta.x_max), w.z_m);
    cv::line(out, {cx - 40, p.row}, {cx + 40, p.row}, kWhorlTick, 2, cv::LINE_8);
    auto label = detail::geometry_label(w.insertion_angle_deg, w.max_branch_len_m);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "z=%.2f", w.z_m);
    label = label.empty() ? buf : std::string(buf) + " " + label;
    cv::putText(out, label, {cx + 46, p.row + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.45, kLabel, 1, cv::LINE_AA);
    ++drawn;
  }
  detail::stamp_footer(out, detail::footer_text(meta, drawn, "whorls"));
  return out;
}

}  // namespace whorl
