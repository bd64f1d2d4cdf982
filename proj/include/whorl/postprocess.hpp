#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <iterator>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "whorl/detector.hpp"
#include "whorl/error.hpp"
#include "whorl/projection.hpp"
#include "whorl/whorl_geometry.hpp"

namespace whorl {

/// A detection moved back into the section plane of its view.
struct WhorlCandidate {
  std::string tree_id;
  double view_angle_deg = 0.0;
  int section_index = 0;
  /// Height of the centre keypoint.
  double z_m = 0.0;
  double confidence = 0.0;
  std::array<PlanePoint, 3> kp_world{};
  std::array<double, 3> kp_scores{};
};

struct Whorl {
  std::string tree_id;
  double z_m = 0.0;
  double confidence = 0.0;
  std::optional<double> insertion_angle_deg;
  std::optional<double> max_branch_len_m;
  double source_view_deg = 0.0;
  int source_section = 0;
  std::array<PlanePoint, 3> kp_world{};
  std::array<double, 3> kp_scores{};
};

struct FilterConfig {
  double min_whorl_dist_m = 0.25;

  void validate() const {
    if (!(min_whorl_dist_m > 0.0)) throw ConfigError("min_whorl_dist_m must be > 0");
  }
};

inline WhorlCandidate convert_to_real_world(const RawDetection& det, const ImageMeta& meta) {
  WhorlCandidate c;
  c.tree_id = meta.tree_id;
  c.view_angle_deg = meta.view_angle_deg;
  c.section_index = meta.section_index;
  c.confidence = det.score;
  for (std::size_t k = 0; k < 3; ++k) {
    c.kp_world[k] = normalized_to_world(meta, det.keypoints[k].x, det.keypoints[k].y);
    c.kp_scores[k] = det.keypoints[k].score;
  }
  c.z_m = c.kp_world[kCenter].z;
  return c;
}

/// Pools candidates of one tree on a common z axis: z ascending, ties by
/// confidence descending. View rotation leaves z untouched, so heights from
/// different views compare directly.
inline std::vector<WhorlCandidate> merge_views(std::vector<WhorlCandidate> cands) {
  for (const auto& c : cands)
    if (c.tree_id != cands.front().tree_id)
      throw Error("merge_views: candidates from trees '" + cands.front().tree_id + "' and '" + c.tree_id + "'");
  std::stable_sort(cands.begin(), cands.end(), [](const WhorlCandidate& a, const WhorlCandidate& b) {
    if (a.z_m != b.z_m) return a.z_m < b.z_m;
    return a.confidence > b.confidence;
  });
  return cands;
}

/// Selection priority: confidence, then lower z, then lower view angle. The
/// trailing keys only make the order total.
inline bool filter_priority(const WhorlCandidate& a, const WhorlCandidate& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.z_m != b.z_m) return a.z_m < b.z_m;
  if (a.view_angle_deg != b.view_angle_deg) return a.view_angle_deg < b.view_angle_deg;
  const double ma = *std::min_element(a.kp_scores.begin(), a.kp_scores.end());
  const double mb = *std::min_element(b.kp_scores.begin(), b.kp_scores.end());
  if (ma != mb) return ma > mb;
  return a.section_index < b.section_index;
}

/// Greedy 1D suppression along z: take the most confident remaining
/// candidate, drop every other candidate closer than min_whorl_dist_m.
/// Output is sorted by z.
inline std::vector<Whorl> filter_whorls(const std::vector<WhorlCandidate>& cands, const FilterConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> order(cands.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return filter_priority(cands[a], cands[b]); });

  // A candidate survives iff no already-kept whorl lies within the radius;
  // visiting in priority order makes that equal to iterative suppression.
  std::set<double> kept_z;
  std::vector<Whorl> out;
  for (std::size_t idx : order) {
    const auto& c = cands[idx];
    auto it = kept_z.lower_bound(c.z_m);
    if (it != kept_z.end() && *it - c.z_m < cfg.min_whorl_dist_m) continue;
    if (it != kept_z.begin() && c.z_m - *std::prev(it) < cfg.min_whorl_dist_m) continue;
    kept_z.insert(c.z_m);
    Whorl w;
    w.tree_id = c.tree_id;
    w.z_m = c.z_m;
    w.confidence = c.confidence;
    w.source_view_deg = c.view_angle_deg;
    w.source_section = c.section_index;
    w.kp_world = c.kp_world;
    w.kp_scores = c.kp_scores;
    out.push_back(std::move(w));
  }
  std::stable_sort(out.begin(), out.end(), [](const Whorl& a, const Whorl& b) { return a.z_m < b.z_m; });
  return out;
}

/// Insertion angle and longest branch from the whorl's own keypoints, left
/// absent when any keypoint is below `kp_score_threshold`.
inline void attach_geometry(Whorl& w, double kp_score_threshold) {
  w.insertion_angle_deg.reset();
  w.max_branch_len_m.reset();
  for (double s : w.kp_scores)
    if (s < kp_score_threshold) return;
  const auto& kp = w.kp_world;
  auto angle = calculate_angle_at_p2(kp[kLeftTip], kp[kCenter], kp[kRightTip]);
  if (angle && *angle > 0.0) w.insertion_angle_deg = angle;
  w.max_branch_len_m = calculate_distance(kp[kCenter], kp[kLeftTip], kp[kRightTip]);
}

inline std::vector<double> internodal_distances(const std::vector<Whorl>& whorls) {
  std::vector<double> d;
  for (std::size_t i = 1; i < whorls.size(); ++i) d.push_back(whorls[i].z_m - whorls[i - 1].z_m);
  return d;
}

// ---------------------------------------------------------------------------
// Whole-tree chain

struct PipelineSettings {
  SlicingConfig slicing;
  int image_px = kDefaultImagePx;
  DecoderConfig decoder;
  FilterConfig filter;

  void validate() const {
    slicing.validate();
    decoder.validate();
    filter.validate();
    if (image_px <= 0) throw ConfigError("image size must be positive");
  }
};

struct StageTimings {
  double project_ms = 0.0;
  double detect_ms = 0.0;
  double postprocess_ms = 0.0;
};

struct TreeResult {
  std::string tree_id;
  std::size_t point_count = 0;
  double z_offset_m = 0.0;
  std::size_t image_count = 0;
  std::vector<WhorlCandidate> candidates;  // merged, z-sorted
  std::vector<Whorl> whorls;
  StageTimings timings;
  /// Kept only when requested.
  std::vector<SectionImage> images;
};

/// Runs detection and post-processing over already projected images.
inline TreeResult detect_and_postprocess(ProjectedTree projected, const DetectorPort& detector,
                                         const PipelineSettings& settings, bool keep_images = false) {
  using clock = std::chrono::steady_clock;
  TreeResult result;
  result.tree_id = projected.cloud.tree_id;
  result.point_count = projected.cloud.size();
  result.z_offset_m = projected.cloud.z_offset;
  result.image_count = projected.images.size();

  std::vector<WhorlCandidate> cands;
  double detect_ms = 0.0, post_ms = 0.0;
  for (const auto& image : projected.images) {
    const auto t0 = clock::now();
    const auto dets = detector.detect(image);
    const auto t1 = clock::now();
    for (const auto& d : dets) cands.push_back(convert_to_real_world(canonicalize(d), image.meta));
    post_ms += std::chrono::duration<double, std::milli>(clock::now() - t1).count();
    detect_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  const auto t2 = clock::now();
  result.candidates = merge_views(std::move(cands));
  result.whorls = filter_whorls(result.candidates, settings.filter);
  for (auto& w : result.whorls) attach_geometry(w, settings.decoder.kp_score_threshold);
  post_ms += std::chrono::duration<double, std::milli>(clock::now() - t2).count();
  result.timings.detect_ms = detect_ms;
  result.timings.postprocess_ms = post_ms;
  if (keep_images) result.images = std::move(projected.images);
  return result;
}

/// Point cloud file to filtered whorls with geometry.
inline TreeResult pose_detection_tree(const std::filesystem::path& cloud_path, const DetectorPort& detector,
                                      const PipelineSettings& settings, bool keep_images = false) {
  settings.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto projected = process_point_cloud(cloud_path, settings.slicing, settings.image_px);
  const double project_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  auto result = detect_and_postprocess(std::move(projected), detector, settings, keep_images);
  result.timings.project_ms = project_ms;
  return result;
}

// ---------------------------------------------------------------------------
// Output formats

inline constexpr const char* kWhorlCsvHeader =
    "tree_id,z_m,confidence,insertion_angle_deg,max_branch_length_m,source_view_deg";

inline std::string format_fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline std::string format_whorl_rows(const std::vector<Whorl>& whorls) {
  std::string out;
  for (const auto& w : whorls) {
    out += w.tree_id;
    out += ',' + format_fixed6(w.z_m);
    out += ',' + format_fixed6(w.confidence);
    out += ',' + (w.insertion_angle_deg ? format_fixed6(*w.insertion_angle_deg) : std::string());
    out += ',' + (w.max_branch_len_m ? format_fixed6(*w.max_branch_len_m) : std::string());
    out += ',' + format_fixed6(w.source_view_deg);
    out += '\n';
  }
  return out;
}

inline std::string format_whorls_csv(const std::vector<Whorl>& whorls) {
  return std::string(kWhorlCsvHeader) + "\n" + format_whorl_rows(whorls);
}

/// Parses the whorl CSV. Keypoints are not part of the format and stay zero.
inline std::vector<Whorl> parse_whorls_csv(std::string_view text, std::string_view source = "<memory>") {
  std::vector<Whorl> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kWhorlCsvHeader) throw ParseError(std::string(source) + ":1: unexpected header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == ',') {
        f.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    const auto where = std::string(source) + ":" + std::to_string(line_no);
    if (f.size() != 6) throw ParseError(where + ": expected 6 fields, found " + std::to_string(f.size()));
    auto num = [&](const std::string& s, const char* field) {
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || ptr != s.data() + s.size())
        throw ParseError(where + ": malformed " + std::string(field));
      return v;
    };
    Whorl w;
    w.tree_id = f[0];
    w.z_m = num(f[1], "z_m");
    w.confidence = num(f[2], "confidence");
    if (!f[3].empty()) w.insertion_angle_deg = num(f[3], "insertion_angle_deg");
    if (!f[4].empty()) w.max_branch_len_m = num(f[4], "max_branch_length_m");
    w.source_view_deg = num(f[5], "source_view_deg");
    out.push_back(std::move(w));
  }
  return out;
}

inline nlohmann::json candidates_to_json(const std::vector<WhorlCandidate>& cands) {
  auto arr = nlohmann::json::array();
  for (const auto& c : cands) {
    auto kps = nlohmann::json::array();
    for (const auto& p : c.kp_world) kps.push_back({p.x, p.z});
    arr.push_back({{"tree_id", c.tree_id},
                   {"view_angle_deg", c.view_angle_deg},
                   {"section_index", c.section_index},
                   {"z_m", c.z_m},
                   {"confidence", c.confidence},
                   {"kp_world", std::move(kps)},
                   {"kp_scores", c.kp_scores}});
  }
  return arr;
}

}  // namespace whorl
