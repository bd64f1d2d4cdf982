#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "whorl/error.hpp"
#include "whorl/io/bytes.hpp"
#include "whorl/projection.hpp"
#include "whorl/synthgen.hpp"

namespace whorl {

/// Keypoint in image-relative coordinates with its confidence.
struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;
  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

/// Centre-format box relative to image width/height.
struct BBoxNorm {
  double xc = 0.0;
  double yc = 0.0;
  double w = 0.0;
  double h = 0.0;
  friend bool operator==(const BBoxNorm&, const BBoxNorm&) = default;
};

inline constexpr std::size_t kLeftTip = 0;
inline constexpr std::size_t kCenter = 1;
inline constexpr std::size_t kRightTip = 2;

/// One whorl pose: two branch tips around the stem centre.
struct RawDetection {
  BBoxNorm bbox;
  double score = 0.0;
  std::array<Keypoint, 3> keypoints{};
  friend bool operator==(const RawDetection&, const RawDetection&) = default;
};

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

/// Clamps every coordinate and score to [0,1] and orders the tips so the left
/// one has the smaller x.
inline RawDetection canonicalize(RawDetection d) {
  d.bbox = {clamp01(d.bbox.xc), clamp01(d.bbox.yc), clamp01(d.bbox.w), clamp01(d.bbox.h)};
  d.score = clamp01(d.score);
  for (auto& k : d.keypoints) k = {clamp01(k.x), clamp01(k.y), clamp01(k.score)};
  if (d.keypoints[kLeftTip].x > d.keypoints[kRightTip].x) std::swap(d.keypoints[kLeftTip], d.keypoints[kRightTip]);
  return d;
}

struct DecoderConfig {
  double score_threshold = 0.25;
  double nms_iou_threshold = 0.7;
  /// Tips below this confidence suppress angle/length, not the whorl itself.
  double kp_score_threshold = 0.3;
  /// Set for exports that emit raw logits instead of sigmoid scores.
  bool scores_are_logits = false;

  void validate() const {
    for (double v : {score_threshold, nms_iou_threshold, kp_score_threshold})
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("decoder thresholds must lie in [0,1]");
  }
};

/// Anything that turns a section image into whorl poses. Implementations must
/// be deterministic and safe to call concurrently on one instance.
class DetectorPort {
 public:
  virtual ~DetectorPort() = default;
  virtual std::vector<RawDetection> detect(const SectionImage& image) const = 0;
  virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Box overlap and suppression

inline double iou(const BBoxNorm& a, const BBoxNorm& b) {
  const double ax0 = a.xc - a.w / 2, ax1 = a.xc + a.w / 2, ay0 = a.yc - a.h / 2, ay1 = a.yc + a.h / 2;
  const double bx0 = b.xc - b.w / 2, bx1 = b.xc + b.w / 2, by0 = b.yc - b.h / 2, by1 = b.yc + b.h / 2;
  const double ix = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double iy = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = ix * iy;
  // Areas from the same corner differences, so identical boxes give exactly 1.
  const double uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

/// Score descending; ties by smaller yc, then smaller xc.
inline bool detection_order(const RawDetection& a, const RawDetection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.bbox.yc != b.bbox.yc) return a.bbox.yc < b.bbox.yc;
  return a.bbox.xc < b.bbox.xc;
}

/// Greedy suppression: keep the best remaining box, drop everything that
/// overlaps it by more than `iou_threshold`.
inline std::vector<RawDetection> nms(std::vector<RawDetection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(), detection_order);
  std::vector<RawDetection> kept;
  std::vector<bool> removed(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j)
      if (!removed[j] && iou(dets[i].bbox, dets[j].bbox) > iou_threshold) removed[j] = true;
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Exported pose tensor: 14 rows (box xc,yc,w,h in pixels; score; three
// x,y,score keypoint triplets) by N candidate columns.

inline constexpr std::uint32_t kPoseRows = 14;

struct PoseTensor {
  std::uint32_t rows = kPoseRows;
  std::uint32_t cols = 0;
  /// Column-major: element (r, c) lives at c * rows + r.
  std::vector<float> data;

  float at(std::uint32_t r, std::uint32_t c) const { return data[static_cast<std::size_t>(c) * rows + r]; }
  float& at(std::uint32_t r, std::uint32_t c) { return data[static_cast<std::size_t>(c) * rows + r]; }
};

inline PoseTensor parse_pose_tensor(std::span<const std::byte> bytes, const std::string& source = "<memory>") {
  PoseTensor t;
  t.rows = io::load_le<std::uint32_t>(bytes, 0);
  t.cols = io::load_le<std::uint32_t>(bytes, 4);
  const std::size_t count = static_cast<std::size_t>(t.rows) * t.cols;
  if (bytes.size() != 8 + count * 4) {
    throw ParseError(source + ": tensor (" + std::to_string(t.rows) + "," + std::to_string(t.cols) + ") needs " +
                     std::to_string(8 + count * 4) + " bytes, file has " + std::to_string(bytes.size()));
  }
  t.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) t.data[i] = io::load_le<float>(bytes, 8 + 4 * i);
  return t;
}

inline PoseTensor read_pose_tensor(const std::filesystem::path& path) {
  return parse_pose_tensor(io::read_file_bytes(path), path.string());
}

inline std::vector<std::byte> serialize_pose_tensor(const PoseTensor& t) {
  std::vector<std::byte> out;
  out.reserve(8 + t.data.size() * 4);
  io::store_le(out, t.rows);
  io::store_le(out, t.cols);
  for (float v : t.data) io::store_le(out, v);
  return out;
}

inline void write_pose_tensor(const std::filesystem::path& path, const PoseTensor& t) {
  io::write_file_bytes(path, serialize_pose_tensor(t));
}

/// Thresholds candidate columns and maps pixel units to image-relative
/// coordinates. Output is sorted by score; no suppression is applied.
inline std::vector<RawDetection> decode_pose_tensor(const PoseTensor& raw, const ImageMeta& meta,
                                                    const DecoderConfig& cfg) {
  if (raw.rows != kPoseRows)
    throw Error("pose tensor: expected leading dimension 14, got " + std::to_string(raw.rows));
  if (raw.data.size() != static_cast<std::size_t>(raw.rows) * raw.cols) throw Error("pose tensor: payload size mismatch");
  const double w = meta.width_px, h = meta.height_px;
  auto activate = [&](double s) { return cfg.scores_are_logits ? 1.0 / (1.0 + std::exp(-s)) : s; };

  std::vector<RawDetection> out;
  for (std::uint32_t c = 0; c < raw.cols; ++c) {
    for (std::uint32_t r = 0; r < raw.rows; ++r)
      if (!std::isfinite(raw.at(r, c)))
        throw Error("pose tensor: non-finite value at row " + std::to_string(r) + ", column " + std::to_string(c));
    const double score = activate(raw.at(4, c));
    if (score < cfg.score_threshold) continue;
    RawDetection d;
    d.bbox = {raw.at(0, c) / w, raw.at(1, c) / h, raw.at(2, c) / w, raw.at(3, c) / h};
    d.score = score;
    for (std::uint32_t k = 0; k < 3; ++k)
      d.keypoints[k] = {raw.at(5 + 3 * k, c) / w, raw.at(6 + 3 * k, c) / h, activate(raw.at(7 + 3 * k, c))};
    out.push_back(canonicalize(d));
  }
  std::stable_sort(out.begin(), out.end(), detection_order);
  return out;
}

// ---------------------------------------------------------------------------
// Predictions file: { "<image>.png": [ {bbox, score, keypoints}, ... ], ... }

using PredictionMap = std::map<std::string, std::vector<RawDetection>>;

inline nlohmann::json detection_to_json(const RawDetection& d) {
  auto kps = nlohmann::json::array();
  for (const auto& k : d.keypoints) kps.push_back({k.x, k.y, k.score});
  return {{"bbox", {d.bbox.xc, d.bbox.yc, d.bbox.w, d.bbox.h}}, {"score", d.score}, {"keypoints", std::move(kps)}};
}

inline RawDetection detection_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + ": detection must be an object");
  auto numbers = [&](const nlohmann::json& arr, std::size_t n, const std::string& field) {
    if (!arr.is_array() || arr.size() != n)
      throw SchemaError(where + ": field '" + field + "' must be an array of " + std::to_string(n) + " numbers");
    std::vector<double> v;
    for (const auto& x : arr) {
      if (!x.is_number()) throw SchemaError(where + ": field '" + field + "' must contain numbers");
      v.push_back(x.get<double>());
    }
    return v;
  };
  for (const char* f : {"bbox", "score", "keypoints"})
    if (!j.contains(f)) throw SchemaError(where + ": missing field '" + f + "'");
  RawDetection d;
  const auto box = numbers(j["bbox"], 4, "bbox");
  d.bbox = {box[0], box[1], box[2], box[3]};
  if (!j["score"].is_number()) throw SchemaError(where + ": field 'score' must be a number");
  d.score = j["score"].get<double>();
  const auto& kps = j["keypoints"];
  if (!kps.is_array()) throw SchemaError(where + ": field 'keypoints' must be an array");
  if (kps.size() != 3)
    throw SchemaError(where + ": field 'keypoints' must hold exactly 3 keypoints, found " + std::to_string(kps.size()));
  for (std::size_t k = 0; k < 3; ++k) {
    const auto v = numbers(kps[k], 3, "keypoints[" + std::to_string(k) + "]");
    d.keypoints[k] = {v[0], v[1], v[2]};
  }
  return canonicalize(d);
}

inline PredictionMap predictions_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("predictions: top level must be an object keyed by image name");
  PredictionMap out;
  for (const auto& [image, list] : j.items()) {
    if (!list.is_array()) throw SchemaError("predictions['" + image + "']: must be an array");
    auto& dets = out[image];
    for (std::size_t i = 0; i < list.size(); ++i)
      dets.push_back(detection_from_json(list[i], "predictions['" + image + "'][" + std::to_string(i) + "]"));
  }
  return out;
}

inline nlohmann::json predictions_to_json(const PredictionMap& preds) {
  auto j = nlohmann::json::object();
  for (const auto& [image, dets] : preds) {
    auto arr = nlohmann::json::array();
    for (const auto& d : dets) arr.push_back(detection_to_json(d));
    j[image] = std::move(arr);
  }
  return j;
}

inline PredictionMap load_predictions_file(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  return predictions_from_json(j);
}

inline void save_predictions_file(const std::filesystem::path& path, const PredictionMap& preds) {
  io::write_file_text(path, predictions_to_json(preds).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Synthetic oracle

/// 64-bit FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline constexpr double kOracleBoxPad = 0.02;

/// Projects every truth whorl whose centre falls inside the image window.
/// Keypoints are perturbed by isotropic world-space noise of `noise_sigma_m`;
/// tips that land outside the image are clamped and given score 0.
inline std::vector<RawDetection> oracle_detect(const SynthGroundTruth& truth, const ImageMeta& meta,
                                               double noise_sigma_m, std::uint64_t seed) {
  if (!(noise_sigma_m >= 0.0)) throw ConfigError("oracle noise sigma must be >= 0");
  std::mt19937_64 rng(fnv1a(image_stem(meta), seed ^ 0x9E3779B97F4A7C15ULL));
  // Only sampled when sigma > 0; the distribution rejects a zero deviation.
  std::normal_distribution<double> noise(0.0, noise_sigma_m > 0.0 ? noise_sigma_m : 1.0);
  const double x0 = 0.5 * (meta.x_min + meta.x_max);
  constexpr double deg = std::numbers::pi / 180.0;

  std::vector<RawDetection> out;
  for (const auto& w : truth.whorls) {
    if (w.z_m < meta.z_min || w.z_m > meta.z_max) continue;
    // Branch plane direction after the view rotation, projected on image x.
    const double cx = std::cos((w.azimuth_deg + meta.view_angle_deg) * deg);
    const std::array<PlanePoint, 3> world{PlanePoint{x0 + cx * w.tip1.x, w.tip1.z}, PlanePoint{x0, w.z_m},
                                          PlanePoint{x0 + cx * w.tip2.x, w.tip2.z}};
    RawDetection d;
    d.score = 1.0;
    double lo_x = 1.0, hi_x = 0.0, lo_y = 1.0, hi_y = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      PlanePoint p = world[k];
      if (noise_sigma_m > 0.0) {
        p.x += noise(rng);
        p.z += noise(rng);
      }
      const auto n = world_to_normalized(meta, p);
      const bool inside = n.x >= 0.0 && n.x <= 1.0 && n.z >= 0.0 && n.z <= 1.0;
      d.keypoints[k] = {clamp01(n.x), clamp01(n.z), inside ? 1.0 : 0.0};
      lo_x = std::min(lo_x, d.keypoints[k].x);
      hi_x = std::max(hi_x, d.keypoints[k].x);
      lo_y = std::min(lo_y, d.keypoints[k].y);
      hi_y = std::max(hi_y, d.keypoints[k].y);
    }
    lo_x = clamp01(lo_x - kOracleBoxPad);
    hi_x = clamp01(hi_x + kOracleBoxPad);
    lo_y = clamp01(lo_y - kOracleBoxPad);
    hi_y = clamp01(hi_y + kOracleBoxPad);
    d.bbox = {(lo_x + hi_x) / 2, (lo_y + hi_y) / 2, hi_x - lo_x, hi_y - lo_y};
    out.push_back(canonicalize(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backends

/// Serves detections from a predictions file, keyed by image file name.
class FixtureDetector final : public DetectorPort {
 public:
  explicit FixtureDetector(PredictionMap predictions) : predictions_(std::move(predictions)) {}
  explicit FixtureDetector(const std::filesystem::path& path) : predictions_(load_predictions_file(path)) {}

  std::vector<RawDetection> detect(const SectionImage& image) const override {
    if (auto it = predictions_.find(image_name(image.meta)); it != predictions_.end()) return it->second;
    if (auto it = predictions_.find(image_stem(image.meta)); it != predictions_.end()) return it->second;
    return {};
  }
  std::string name() const override { return "fixture"; }

 private:
  PredictionMap predictions_;
};

/// Ground-truth projector for synthetic trees, keyed by tree id.
class OracleDetector final : public DetectorPort {
 public:
  OracleDetector(std::map<std::string, SynthGroundTruth> truths, double noise_sigma_m, std::uint64_t seed)
      : truths_(std::move(truths)), sigma_(noise_sigma_m), seed_(seed) {
    if (!(sigma_ >= 0.0)) throw ConfigError("oracle noise sigma must be >= 0");
  }

  /// Loads every <tree_id>_truth.json in `dir`.
  static OracleDetector from_directory(const std::filesystem::path& dir, double noise_sigma_m, std::uint64_t seed) {
    if (!std::filesystem::is_directory(dir)) throw IoError("truth directory '" + dir.string() + "' not found");
    std::map<std::string, SynthGroundTruth> truths;
    constexpr std::string_view suffix = "_truth.json";
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      const auto name = entry.path().filename().string();
      if (name.size() > suffix.size() && name.ends_with(suffix))
        truths.emplace(name.substr(0, name.size() - suffix.size()), read_truth(entry.path()));
    }
    return OracleDetector(std::move(truths), noise_sigma_m, seed);
  }

  std::vector<RawDetection> detect(const SectionImage& image) const override {
    const auto it = truths_.find(image.meta.tree_id);
    if (it == truths_.end()) return {};
    return oracle_detect(it->second, image.meta, sigma_, seed_);
  }
  std::string name() const override { return "oracle"; }

  const std::map<std::string, SynthGroundTruth>& truths() const { return truths_; }

 private:
  std::map<std::string, SynthGroundTruth> truths_;
  double sigma_;
  std::uint64_t seed_;
};

/// Decodes exported pose tensors stored as <image stem>.bin in a directory,
/// then applies NMS. Images without a tensor file yield no detections.
class TensorDetector final : public DetectorPort {
 public:
  TensorDetector(std::filesystem::path dir, DecoderConfig cfg) : dir_(std::move(dir)), cfg_(cfg) {
    cfg_.validate();
    if (!std::filesystem::is_directory(dir_)) throw IoError("tensor directory '" + dir_.string() + "' not found");
  }

  std::vector<RawDetection> detect(const SectionImage& image) const override {
    const auto path = dir_ / (image_stem(image.meta) + ".bin");
    if (!std::filesystem::exists(path)) return {};
    return nms(decode_pose_tensor(read_pose_tensor(path), image.meta, cfg_), cfg_.nms_iou_threshold);
  }
  std::string name() const override { return "tensor"; }

 private:
  std::filesystem::path dir_;
  DecoderConfig cfg_;
};

/// RGB raster of a section image alpha-composited over white, the form a
/// pose model consumes.
inline std::vector<std::uint8_t> composite_over_white(const SectionImage& image) {
  const std::size_t n = static_cast<std::size_t>(image.meta.width_px) * image.meta.height_px;
  std::vector<std::uint8_t> rgb(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned a = image.rgba[4 * i + 3];
    for (std::size_t c = 0; c < 3; ++c)
      rgb[3 * i + c] = static_cast<std::uint8_t>((image.rgba[4 * i + c] * a + 255u * (255u - a) + 127u) / 255u);
  }
  return rgb;
}

}  // namespace whorl
