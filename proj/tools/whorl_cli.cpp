// whorl: section images, whorl detection post-processing and evaluation for
// individual-tree point clouds.

#include <cstdlib>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"

#include "whorl/pipeline.hpp"
#include "whorl/version.hpp"

namespace {

void configure_logging() {
  spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("WHORL_LOG")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to "off"; only honour an explicit "off".
    if (level != spdlog::level::off || std::string(env) == "off") spdlog::set_level(level);
  }
}

double parse_slab(const std::string& text) {
  if (text == "full" || text == "inf") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  const double v = std::stod(text, &used);
  if (used != text.size()) throw whorl::ConfigError("slab thickness must be a number or 'full'");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();

  CLI::App app{"Tree whorl detection pipeline for laser-scanned individual trees"};
  app.set_version_flag("--version", whorl::kVersion);
  app.set_config("--config", "", "TOML key = value file; keys match the long flag names");
  app.require_subcommand(1);

  whorl::PipelineConfig cfg;
  auto& s = cfg.settings;
  std::string output;
  std::string detector = "oracle";
  std::string truth;
  std::string slab = "1.0";
  std::string predictions, whorls_csv, candidates;
  std::string tensor_dir, model;
  whorl::SynthOptions synth;
  double density = 0.0, synth_noise = -1.0;

  app.add_option("--input", cfg.input, "Input file, directory or glob");
  app.add_option("--output", output, "Output directory (project/pipeline/synth) or file (detect/postprocess/eval/overlay)");
  app.add_option("--workers", cfg.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--detector", detector, "Detector backend")
      ->check(CLI::IsMember({"fixture", "oracle", "tensor", "onnx"}));
  app.add_option("--truth", truth, "Ground-truth directory (<tree_id>_truth.json files)");
  app.add_option("--min-whorl-dist-m", s.filter.min_whorl_dist_m, "Minimum vertical whorl spacing")->capture_default_str();
  app.add_option("--match-tol-m", cfg.eval.match_tol_m, "Evaluation match tolerance along z")->capture_default_str();
  app.add_option("--views", s.slicing.view_angles_deg, "View angles in degrees")->delimiter(',')->capture_default_str();
  app.add_option("--seed", cfg.detector.seed, "Random seed (oracle noise, synth batch)");
  app.add_option("--image-px", s.image_px, "Image width in pixels")->capture_default_str();
  app.add_option("--slab-thickness-m", slab, "Centre slab thickness or 'full'")->capture_default_str();
  app.add_option("--section-height-m", s.slicing.section_height_m)->capture_default_str();
  app.add_option("--section-overlap-m", s.slicing.section_overlap_m)->capture_default_str();
  app.add_option("--window-width-m", s.slicing.window_width_m)->capture_default_str();
  app.add_option("--marker-radius-px", s.slicing.marker_radius_px)->capture_default_str();
  app.add_option("--score-threshold", s.decoder.score_threshold)->capture_default_str();
  app.add_option("--nms-iou-threshold", s.decoder.nms_iou_threshold)->capture_default_str();
  app.add_option("--kp-score-threshold", s.decoder.kp_score_threshold)->capture_default_str();
  app.add_flag("--scores-are-logits", s.decoder.scores_are_logits, "Apply a sigmoid to exported scores");
  app.add_option("--predictions", predictions, "Predictions JSON (fixture backend, postprocess, overlay)");
  app.add_option("--whorls", whorls_csv, "Whorl CSV (overlay)");
  app.add_option("--tensor-dir", tensor_dir, "Directory of exported <image stem>.bin pose tensors");
  app.add_option("--model", model, "Model file for the onnx backend");
  app.add_option("--oracle-sigma-m", cfg.detector.oracle_sigma_m, "Oracle keypoint noise (m)")->capture_default_str();
  app.add_flag("--save-images", cfg.save_images, "Also write section images in pipeline runs");
  app.add_flag("--dump-candidates", cfg.dump_candidates, "Write candidates.json");
  app.add_option("--candidates", candidates, "Candidate dump path (postprocess)");
  app.add_option("--count", synth.count, "Number of synthetic trees")->capture_default_str();
  app.add_option("--density", density, "Synthetic point density per meter of stem/branch");
  app.add_option("--noise-sigma-m", synth_noise, "Synthetic point noise (m)");
  app.add_flag("--random-azimuth", synth.random_azimuth, "Rotate each synthetic whorl's branch plane randomly");

  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic trees with whorl ground truth");
  auto* project_cmd = app.add_subcommand("project", "Point clouds to section images and metadata");
  auto* detect_cmd = app.add_subcommand("detect", "Run a detector backend over section images");
  auto* post_cmd = app.add_subcommand("postprocess", "Detections to filtered whorls with geometry");
  auto* eval_cmd = app.add_subcommand("eval", "Score a whorl CSV against ground truth");
  auto* pipeline_cmd = app.add_subcommand("pipeline", "End-to-end run over many trees");
  auto* overlay_cmd = app.add_subcommand("overlay", "Annotate a section image");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : whorl::kExitUsage;
  }

  try {
    cfg.output = output;
    s.slicing.slab_thickness_m = parse_slab(slab);
    cfg.detector.kind = whorl::parse_detector_kind(detector);
    cfg.detector.predictions = predictions;
    cfg.detector.truth_dir = truth;
    cfg.detector.tensor_dir = tensor_dir;
    cfg.detector.model = model;
    if (!truth.empty()) cfg.truth_dir = truth;
    synth.seed = cfg.detector.seed;
    if (density > 0.0) synth.density_pts_per_m = density;
    if (synth_noise >= 0.0) synth.noise_sigma_m = synth_noise;

    auto need = [&](const std::string& value, const char* flag) {
      if (value.empty()) throw whorl::ConfigError(std::string("missing required ") + flag);
    };

    if (*synth_cmd) {
      need(output, "--output");
      return whorl::cmd_synth(cfg, synth);
    }
    if (*project_cmd) {
      need(cfg.input, "--input");
      need(output, "--output");
      return whorl::cmd_project(cfg);
    }
    if (*detect_cmd) {
      need(cfg.input, "--input");
      need(output, "--output");
      return whorl::cmd_detect(cfg);
    }
    if (*post_cmd) {
      need(cfg.input, "--input");
      need(output, "--output");
      need(predictions, "--predictions");
      std::optional<std::filesystem::path> cand_out;
      if (!candidates.empty()) cand_out = candidates;
      return whorl::cmd_postprocess(cfg, predictions, cand_out);
    }
    if (*eval_cmd) {
      need(cfg.input, "--input");
      return whorl::cmd_eval(cfg);
    }
    if (*pipeline_cmd) {
      need(cfg.input, "--input");
      need(output, "--output");
      return whorl::cmd_pipeline(cfg);
    }
    if (*overlay_cmd) {
      need(cfg.input, "--input");
      need(output, "--output");
      std::optional<std::filesystem::path> p, w;
      if (!predictions.empty()) p = predictions;
      if (!whorls_csv.empty()) w = whorls_csv;
      return whorl::cmd_overlay(cfg.input, p, w, output, s.decoder.kp_score_threshold);
    }
  } catch (const whorl::ConfigError& e) {
    spdlog::error("{}", e.what());
    return whorl::kExitUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return whorl::kExitPartial;
  }
  return whorl::kExitUsage;
}
