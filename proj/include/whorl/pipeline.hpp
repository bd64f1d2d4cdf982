#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <glob.h>

#include <spdlog/spdlog.h>

#include "json.hpp"

#include "whorl/detector.hpp"
#include "whorl/evaluation.hpp"
#include "whorl/image_io.hpp"
#include "whorl/overlay.hpp"
#include "whorl/pointcloud_io.hpp"
#include "whorl/postprocess.hpp"
#include "whorl/projection.hpp"
#include "whorl/synthgen.hpp"
#include "whorl/version.hpp"

namespace whorl {

inline constexpr int kExitOk = 0;
inline constexpr int kExitPartial = 1;
inline constexpr int kExitUsage = 2;

enum class DetectorKind { Fixture, Oracle, Tensor, Onnx };

inline DetectorKind parse_detector_kind(const std::string& s) {
  if (s == "fixture") return DetectorKind::Fixture;
  if (s == "oracle") return DetectorKind::Oracle;
  if (s == "tensor") return DetectorKind::Tensor;
  if (s == "onnx") return DetectorKind::Onnx;
  throw ConfigError("unknown detector backend '" + s + "' (expected fixture, oracle, tensor or onnx)");
}

inline const char* to_string(DetectorKind k) {
  switch (k) {
    case DetectorKind::Fixture: return "fixture";
    case DetectorKind::Oracle: return "oracle";
    case DetectorKind::Tensor: return "tensor";
    case DetectorKind::Onnx: return "onnx";
  }
  return "?";
}

struct DetectorSpec {
  DetectorKind kind = DetectorKind::Oracle;
  std::filesystem::path predictions;  // fixture
  std::filesystem::path truth_dir;    // oracle
  double oracle_sigma_m = 0.0;
  std::uint64_t seed = 0;
  std::filesystem::path tensor_dir;  // tensor
  std::filesystem::path model;       // onnx
};

struct PipelineConfig {
  std::string input;
  std::filesystem::path output;
  PipelineSettings settings;
  EvalConfig eval;
  DetectorSpec detector;
  /// Ground truth directory; enables evaluation in `pipeline`.
  std::optional<std::filesystem::path> truth_dir;
  int workers = 1;
  bool save_images = false;
  bool dump_candidates = false;

  void validate() const {
    if (workers < 1) throw ConfigError("workers must be >= 1");
    settings.validate();
    eval.validate();
  }
};

/// Backend selected by `spec`. Every backend returned here is safe to share
/// between workers.
inline std::unique_ptr<DetectorPort> make_detector(const DetectorSpec& spec, const DecoderConfig& decoder) {
  switch (spec.kind) {
    case DetectorKind::Fixture:
      if (spec.predictions.empty()) throw ConfigError("fixture detector needs --predictions <file>");
      return std::make_unique<FixtureDetector>(spec.predictions);
    case DetectorKind::Oracle:
      if (spec.truth_dir.empty()) throw ConfigError("oracle detector needs --truth <dir>");
      return std::make_unique<OracleDetector>(
          OracleDetector::from_directory(spec.truth_dir, spec.oracle_sigma_m, spec.seed));
    case DetectorKind::Tensor:
      if (spec.tensor_dir.empty()) throw ConfigError("tensor detector needs --tensor-dir <dir>");
      return std::make_unique<TensorDetector>(spec.tensor_dir, decoder);
    case DetectorKind::Onnx:
      throw ConfigError("this build has no ONNX Runtime session support; export the model output with "
                        "'--detector tensor' fixtures instead");
  }
  throw ConfigError("unknown detector backend");
}

/// Point cloud files named by a file, a directory (non-recursive) or a glob
/// pattern, sorted by path.
inline std::vector<std::filesystem::path> discover_inputs(const std::string& input) {
  namespace fs = std::filesystem;
  std::vector<fs::path> found;
  if (input.find_first_of("*?[") != std::string::npos) {
    glob_t g{};
    if (::glob(input.c_str(), 0, nullptr, &g) == 0)
      for (std::size_t i = 0; i < g.gl_pathc; ++i) found.emplace_back(g.gl_pathv[i]);
    ::globfree(&g);
  } else if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.is_regular_file()) found.push_back(e.path());
  } else if (fs::is_regular_file(input)) {
    found.emplace_back(input);
  }
  std::erase_if(found, [](const fs::path& p) { return !fs::is_regular_file(p) || !format_from_extension(p); });
  std::sort(found.begin(), found.end());
  return found;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads pulling from a shared
/// counter. The first exception escaping fn is rethrown after all join.
template <typename Fn>
void parallel_for_each(std::size_t n, int workers, Fn&& fn) {
  const std::size_t threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, std::max<std::size_t>(n, 1));
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1, std::memory_order_relaxed)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
  }
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Run manifest

struct TreeRecord {
  std::string input;
  std::string tree_id;
  bool ok = false;
  std::string error;
  std::size_t points = 0;
  std::size_t images = 0;
  std::size_t candidates = 0;
  std::size_t whorls = 0;
  double z_offset_m = 0.0;
  StageTimings timings;
  double total_ms = 0.0;
};

/// Per-input records filled concurrently by workers, one slot per input.
class ManifestSink {
 public:
  explicit ManifestSink(std::size_t n) : records_(n) {}

  void record(std::size_t index, TreeRecord rec) {
    std::lock_guard lock(mutex_);
    records_.at(index) = std::move(rec);
  }

  std::vector<TreeRecord> records() const {
    std::lock_guard lock(mutex_);
    return records_;
  }

 private:
  mutable std::mutex mutex_;
  std::vector<TreeRecord> records_;
};

inline nlohmann::json config_snapshot(const PipelineConfig& cfg) {
  const auto& s = cfg.settings;
  nlohmann::json j{
      {"input", cfg.input},
      {"output", cfg.output.string()},
      {"workers", cfg.workers},
      {"image_px", s.image_px},
      {"slicing",
       {{"view_angles_deg", s.slicing.view_angles_deg},
        {"slab_thickness_m", std::isinf(s.slicing.slab_thickness_m) ? nlohmann::json("full")
                                                                   : nlohmann::json(s.slicing.slab_thickness_m)},
        {"section_height_m", s.slicing.section_height_m},
        {"section_overlap_m", s.slicing.section_overlap_m},
        {"window_width_m", s.slicing.window_width_m},
        {"marker_radius_px", s.slicing.marker_radius_px}}},
      {"decoder",
       {{"score_threshold", s.decoder.score_threshold},
        {"nms_iou_threshold", s.decoder.nms_iou_threshold},
        {"kp_score_threshold", s.decoder.kp_score_threshold},
        {"scores_are_logits", s.decoder.scores_are_logits}}},
      {"min_whorl_dist_m", s.filter.min_whorl_dist_m},
      {"match_tol_m", cfg.eval.match_tol_m},
      {"detector",
       {{"backend", to_string(cfg.detector.kind)},
        {"predictions", cfg.detector.predictions.string()},
        {"truth", cfg.detector.truth_dir.string()},
        {"oracle_sigma_m", cfg.detector.oracle_sigma_m},
        {"seed", cfg.detector.seed},
        {"tensor_dir", cfg.detector.tensor_dir.string()}}},
  };
  if (cfg.truth_dir) j["truth"] = cfg.truth_dir->string();
  return j;
}

struct RunManifest {
  std::string command;
  int workers = 1;
  double wall_ms = 0.0;
  nlohmann::json config;
  std::vector<TreeRecord> trees;
};

inline nlohmann::json manifest_to_json(const RunManifest& m) {
  auto trees = nlohmann::json::array();
  double sum_project = 0.0, sum_detect = 0.0, sum_post = 0.0;
  std::size_t ok = 0;
  for (const auto& t : m.trees) {
    trees.push_back({{"input", t.input},
                     {"tree_id", t.tree_id},
                     {"status", t.ok ? "ok" : "failed"},
                     {"error", t.error},
                     {"counts", {{"points", t.points}, {"images", t.images}, {"candidates", t.candidates}, {"whorls", t.whorls}}},
                     {"z_offset_m", t.z_offset_m},
                     {"timings_ms",
                      {{"project", t.timings.project_ms},
                       {"detect", t.timings.detect_ms},
                       {"postprocess", t.timings.postprocess_ms},
                       {"pipeline_excl_detector", t.timings.project_ms + t.timings.postprocess_ms},
                       {"total", t.total_ms}}}});
    sum_project += t.timings.project_ms;
    sum_detect += t.timings.detect_ms;
    sum_post += t.timings.postprocess_ms;
    ok += t.ok;
  }
  const double n = m.trees.empty() ? 1.0 : static_cast<double>(m.trees.size());
  return {{"tool", "whorl"},
          {"version", kVersion},
          {"command", m.command},
          {"workers", m.workers},
          {"wall_ms", m.wall_ms},
          {"wall_s_per_tree", m.wall_ms / 1000.0 / n},
          {"trees_ok", ok},
          {"trees_failed", m.trees.size() - ok},
          {"mean_ms_per_tree",
           {{"project", sum_project / n}, {"detect", sum_detect / n}, {"postprocess", sum_post / n}}},
          {"config", m.config},
          {"trees", std::move(trees)}};
}

inline int exit_code_for(const std::vector<TreeRecord>& records) {
  const auto failed = std::count_if(records.begin(), records.end(), [](const TreeRecord& r) { return !r.ok; });
  return failed == 0 ? kExitOk : kExitPartial;
}

namespace detail {
inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

/// PNG files in `dir`, sorted.
inline std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (std::filesystem::is_directory(dir))
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline HeightsByTree truth_heights(const std::filesystem::path& dir) {
  HeightsByTree out;
  if (!std::filesystem::is_directory(dir)) throw IoError("truth directory '" + dir.string() + "' not found");
  constexpr std::string_view suffix = "_truth.json";
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix))
      out[name.substr(0, name.size() - suffix.size())] = read_truth(e.path()).z_values();
  }
  return out;
}

inline HeightsByTree whorl_heights(const std::vector<Whorl>& whorls) {
  HeightsByTree out;
  for (const auto& w : whorls) out[w.tree_id].push_back(w.z_m);
  return out;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands

/// Point clouds to section PNGs plus JSON sidecars.
inline int cmd_project(const PipelineConfig& cfg) {
  cfg.validate();
  const auto inputs = discover_inputs(cfg.input);
  if (inputs.empty()) {
    spdlog::error("no input trees");
    return kExitUsage;
  }
  detail::ensure_dir(cfg.output);
  const auto t0 = std::chrono::steady_clock::now();
  ManifestSink sink(inputs.size());
  parallel_for_each(inputs.size(), cfg.workers, [&](std::size_t i) {
    TreeRecord rec;
    rec.input = inputs[i].string();
    rec.tree_id = inputs[i].stem().string();
    const auto start = std::chrono::steady_clock::now();
    try {
      const auto projected = process_point_cloud(inputs[i], cfg.settings.slicing, cfg.settings.image_px);
      rec.timings.project_ms = detail::ms_since(start);
      for (const auto& img : projected.images) write_section_image(cfg.output, img);
      rec.points = projected.cloud.size();
      rec.images = projected.images.size();
      rec.z_offset_m = projected.cloud.z_offset;
      rec.ok = true;
      spdlog::info("{}: {} images", rec.tree_id, rec.images);
    } catch (const std::exception& e) {
      rec.error = e.what();
      spdlog::error("{}: {}", rec.tree_id, e.what());
    }
    rec.total_ms = detail::ms_since(start);
    sink.record(i, std::move(rec));
  });
  RunManifest manifest{"project", cfg.workers, detail::ms_since(t0), config_snapshot(cfg), sink.records()};
  io::write_file_text(cfg.output / "manifest.json", manifest_to_json(manifest).dump(2) + "\n");
  return exit_code_for(manifest.trees);
}

struct PipelineOutcome {
  int exit_code = kExitOk;
  std::vector<TreeResult> results;  // input order; failed trees have empty whorls
  RunManifest manifest;
  std::optional<EvalReport> report;
  std::string csv;
};

/// Full chain per tree across workers. Writes whorls.csv and manifest.json
/// (plus eval_report.json/.txt when truth is configured) into cfg.output.
inline PipelineOutcome run_pipeline(const PipelineConfig& cfg, const DetectorPort& detector) {
  cfg.validate();
  PipelineOutcome out;
  const auto inputs = discover_inputs(cfg.input);
  if (inputs.empty()) {
    spdlog::error("no input trees");
    out.exit_code = kExitUsage;
    return out;
  }
  detail::ensure_dir(cfg.output);
  if (cfg.save_images) detail::ensure_dir(cfg.output / "images");

  const auto t0 = std::chrono::steady_clock::now();
  ManifestSink sink(inputs.size());
  out.results.resize(inputs.size());
  parallel_for_each(inputs.size(), cfg.workers, [&](std::size_t i) {
    TreeRecord rec;
    rec.input = inputs[i].string();
    rec.tree_id = inputs[i].stem().string();
    const auto start = std::chrono::steady_clock::now();
    try {
      auto result = pose_detection_tree(inputs[i], detector, cfg.settings, cfg.save_images);
      for (const auto& img : result.images) write_section_image(cfg.output / "images", img);
      result.images.clear();
      rec.points = result.point_count;
      rec.images = result.image_count;
      rec.candidates = result.candidates.size();
      rec.whorls = result.whorls.size();
      rec.z_offset_m = result.z_offset_m;
      rec.timings = result.timings;
      rec.ok = true;
      out.results[i] = std::move(result);
      spdlog::info("{}: {} candidates, {} whorls", rec.tree_id, rec.candidates, rec.whorls);
    } catch (const std::exception& e) {
      rec.error = e.what();
      out.results[i].tree_id = rec.tree_id;
      spdlog::error("{}: {}", rec.tree_id, e.what());
    }
    rec.total_ms = detail::ms_since(start);
    sink.record(i, std::move(rec));
  });

  std::vector<Whorl> all;
  nlohmann::json cand_dump = nlohmann::json::object();
  for (const auto& r : out.results) {
    all.insert(all.end(), r.whorls.begin(), r.whorls.end());
    if (cfg.dump_candidates) cand_dump[r.tree_id] = candidates_to_json(r.candidates);
  }
  out.csv = format_whorls_csv(all);
  io::write_file_text(cfg.output / "whorls.csv", out.csv);
  if (cfg.dump_candidates) io::write_file_text(cfg.output / "candidates.json", cand_dump.dump(1) + "\n");

  if (cfg.truth_dir) {
    auto truths = detail::truth_heights(*cfg.truth_dir);
    HeightsByTree selected;
    for (const auto& r : out.results)
      if (auto it = truths.find(r.tree_id); it != truths.end()) selected[r.tree_id] = it->second;
    auto preds = detail::whorl_heights(all);
    out.report = evaluate_batch(preds, selected, cfg.eval);
    io::write_file_text(cfg.output / "eval_report.json", report_to_json(*out.report).dump(2) + "\n");
    io::write_file_text(cfg.output / "eval_report.txt", format_report_table(*out.report));
  }

  out.manifest = RunManifest{"pipeline", cfg.workers, detail::ms_since(t0), config_snapshot(cfg), sink.records()};
  io::write_file_text(cfg.output / "manifest.json", manifest_to_json(out.manifest).dump(2) + "\n");
  out.exit_code = exit_code_for(out.manifest.trees);
  return out;
}

inline int cmd_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  if (discover_inputs(cfg.input).empty()) {
    spdlog::error("no input trees");
    return kExitUsage;
  }
  const auto detector = make_detector(cfg.detector, cfg.settings.decoder);
  const auto outcome = run_pipeline(cfg, *detector);
  if (outcome.report) std::fputs(format_report_table(*outcome.report).c_str(), stdout);
  return outcome.exit_code;
}

/// Section PNGs (with sidecars) in cfg.input to a predictions file at cfg.output.
inline int cmd_detect(const PipelineConfig& cfg) {
  cfg.validate();
  const auto pngs = detail::list_pngs(cfg.input);
  if (pngs.empty()) {
    spdlog::error("no input images");
    return kExitUsage;
  }
  const auto detector = make_detector(cfg.detector, cfg.settings.decoder);
  std::vector<std::vector<RawDetection>> dets(pngs.size());
  std::vector<std::string> names(pngs.size());
  std::atomic<std::size_t> failed{0};
  parallel_for_each(pngs.size(), cfg.workers, [&](std::size_t i) {
    try {
      const auto image = read_section_image(pngs[i]);
      names[i] = image_name(image.meta);
      dets[i] = detector->detect(image);
    } catch (const std::exception& e) {
      ++failed;
      spdlog::error("{}: {}", pngs[i].string(), e.what());
    }
  });
  PredictionMap preds;
  for (std::size_t i = 0; i < pngs.size(); ++i)
    if (!names[i].empty()) preds[names[i]] = std::move(dets[i]);
  if (!cfg.output.parent_path().empty()) detail::ensure_dir(cfg.output.parent_path());
  save_predictions_file(cfg.output, preds);
  return failed == 0 ? kExitOk : kExitPartial;
}

/// Sidecars in cfg.input plus a predictions file to a whorl CSV at cfg.output.
inline int cmd_postprocess(const PipelineConfig& cfg, const std::filesystem::path& predictions_path,
                           const std::optional<std::filesystem::path>& candidates_out = std::nullopt) {
  cfg.validate();
  const auto pngs = detail::list_pngs(cfg.input);
  if (pngs.empty()) {
    spdlog::error("no input images");
    return kExitUsage;
  }
  const auto preds = load_predictions_file(predictions_path);
  std::map<std::string, std::vector<WhorlCandidate>> by_tree;
  for (const auto& png : pngs) {
    auto sidecar = png;
    sidecar.replace_extension(".json");
    const auto meta = read_sidecar(sidecar);
    auto& cands = by_tree[meta.tree_id];
    if (auto it = preds.find(image_name(meta)); it != preds.end())
      for (const auto& d : it->second) cands.push_back(convert_to_real_world(d, meta));
  }
  std::vector<Whorl> all;
  nlohmann::json dump = nlohmann::json::object();
  for (auto& [tree, cands] : by_tree) {
    const auto merged = merge_views(std::move(cands));
    auto whorls = filter_whorls(merged, cfg.settings.filter);
    for (auto& w : whorls) attach_geometry(w, cfg.settings.decoder.kp_score_threshold);
    all.insert(all.end(), whorls.begin(), whorls.end());
    dump[tree] = candidates_to_json(merged);
  }
  if (!cfg.output.parent_path().empty()) detail::ensure_dir(cfg.output.parent_path());
  io::write_file_text(cfg.output, format_whorls_csv(all));
  if (candidates_out) io::write_file_text(*candidates_out, dump.dump(1) + "\n");
  return kExitOk;
}

/// Whorl CSV in cfg.input against a truth directory; report JSON at cfg.output.
inline int cmd_eval(const PipelineConfig& cfg) {
  cfg.validate();
  if (!cfg.truth_dir) {
    spdlog::error("eval needs --truth <dir>");
    return kExitUsage;
  }
  const auto whorls = parse_whorls_csv(io::read_file_text(cfg.input), cfg.input);
  const auto report = evaluate_batch(detail::whorl_heights(whorls), detail::truth_heights(*cfg.truth_dir), cfg.eval);
  if (!cfg.output.empty()) {
    if (!cfg.output.parent_path().empty()) detail::ensure_dir(cfg.output.parent_path());
    io::write_file_text(cfg.output, report_to_json(report).dump(2) + "\n");
  }
  std::fputs(format_report_table(report).c_str(), stdout);
  return kExitOk;
}

struct SynthOptions {
  std::size_t count = 1;
  std::uint64_t seed = 0;
  std::optional<double> density_pts_per_m;
  std::optional<double> noise_sigma_m;
  bool random_azimuth = false;
};

/// Writes `count` varied synthetic trees and their truth files into cfg.output.
inline int cmd_synth(const PipelineConfig& cfg, const SynthOptions& opt) {
  if (opt.count == 0) {
    spdlog::error("synth: count must be >= 1");
    return kExitUsage;
  }
  detail::ensure_dir(cfg.output);
  parallel_for_each(opt.count, cfg.workers, [&](std::size_t i) {
    auto tc = synth_batch_config(i, opt.seed);
    if (opt.density_pts_per_m) tc.point_density_pts_per_m = *opt.density_pts_per_m;
    if (opt.noise_sigma_m) tc.noise_sigma_m = *opt.noise_sigma_m;
    tc.random_azimuth = opt.random_azimuth;
    const auto [cloud, truth] = generate_tree(tc);
    write_tree(cloud, truth, cfg.output);
    spdlog::info("{}: {} points, {} whorls", cloud.tree_id, cloud.size(), truth.whorls.size());
  });
  return kExitOk;
}

/// Annotated PNG for one section image from either detections or whorls.
inline int cmd_overlay(const std::filesystem::path& image_png, const std::optional<std::filesystem::path>& predictions,
                       const std::optional<std::filesystem::path>& whorls_csv, const std::filesystem::path& output,
                       double kp_score_threshold) {
  if (!predictions == !whorls_csv) {
    spdlog::error("overlay needs exactly one of --predictions or --whorls");
    return kExitUsage;
  }
  const auto image = read_section_image(image_png);
  cv::Mat rendered;
  if (predictions) {
    const auto preds = load_predictions_file(*predictions);
    const auto it = preds.find(image_name(image.meta));
    const std::vector<RawDetection> dets = it != preds.end() ? it->second : std::vector<RawDetection>{};
    rendered = render_overlay(image, dets, kp_score_threshold);
  } else {
    const auto whorls = parse_whorls_csv(io::read_file_text(*whorls_csv), whorls_csv->string());
    rendered = render_overlay(image, std::span<const Whorl>(whorls));
  }
  if (!output.parent_path().empty()) detail::ensure_dir(output.parent_path());
  write_png(output, rendered);
  return kExitOk;
}

}  // namespace whorl
