// Acceptance harness: one PASS/FAIL/SKIP line per criterion, non-zero exit on
// any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "oracles.hpp"
#include "whorl/pipeline.hpp"

using namespace whorl;
using namespace whorl::testing;

namespace {

enum class Verdict { Pass, Fail, Skip };

struct Outcome {
  Verdict verdict;
  std::string detail;
};

Outcome pass_if(bool ok, std::string detail) { return {ok ? Verdict::Pass : Verdict::Fail, std::move(detail)}; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Writes the 20-tree benchmark batch (heights 8-25 m, spacing 0.4-1.0 m).
void write_batch(const std::filesystem::path& dir, std::size_t n, std::uint64_t seed, double density = 0.0) {
  for (std::size_t i = 0; i < n; ++i) {
    auto cfg = synth_batch_config(i, seed);
    if (density > 0.0) cfg.point_density_pts_per_m = density;
    const auto [cloud, truth] = generate_tree(cfg);
    write_tree(cloud, truth, dir);
  }
}

PipelineConfig oracle_config(const std::filesystem::path& in, const std::filesystem::path& out, int workers) {
  PipelineConfig cfg;
  cfg.input = in.string();
  cfg.output = out;
  cfg.truth_dir = in;
  cfg.workers = workers;
  return cfg;
}

// ---------------------------------------------------------------------------

Outcome oracle_end_to_end(const std::filesystem::path& batch, const std::filesystem::path& work) {
  auto cfg = oracle_config(batch, work / "e2e", 4);
  const auto detector = OracleDetector::from_directory(batch, 0.0, 0);
  const auto t0 = std::chrono::steady_clock::now();
  const auto run = run_pipeline(cfg, detector);
  const double secs = seconds_since(t0);
  if (run.exit_code != kExitOk || !run.report) return {Verdict::Fail, "pipeline failed"};
  const auto& r = *run.report;

  double worst = 0.0;
  for (const auto& res : run.results) {
    const auto& truth = detector.truths().at(res.tree_id);
    for (const auto& w : res.whorls) {
      double best = 1e9;
      for (const auto& t : truth.whorls) best = std::min(best, std::abs(w.z_m - t.z_m));
      worst = std::max(worst, best);
    }
  }
  const double rmse = r.rmse_internodal_m.value_or(1e9);
  const bool ok = r.trees.size() == 20 && r.precision == 1.0 && r.recall == 1.0 && r.f1 == 1.0 && worst <= 0.02 &&
                  rmse <= 0.01 && secs < 60.0;
  return pass_if(ok, fmt::format("trees={} tp={} fp={} fn={} P={:.4f} R={:.4f} F1={:.4f} max|dz|={:.4f} m "
                                 "rmse={:.5f} m time={:.1f} s (4 workers)",
                                 r.trees.size(), r.tp, r.fp, r.fn, r.precision, r.recall, r.f1, worst, rmse, secs));
}

Outcome noise_robustness(const std::filesystem::path& batch, const std::filesystem::path& work) {
  auto cfg = oracle_config(batch, work / "noise", 4);
  const auto detector = OracleDetector::from_directory(batch, 0.05, 1);
  const auto run = run_pipeline(cfg, detector);
  if (run.exit_code != kExitOk || !run.report) return {Verdict::Fail, "pipeline failed"};
  const auto& r = *run.report;
  return pass_if(r.precision >= 0.95 && r.recall >= 0.95,
                 fmt::format("sigma=0.05 m tol=0.20 m tp={} fp={} fn={} P={:.4f} R={:.4f} F1={:.4f}", r.tp, r.fp,
                             r.fn, r.precision, r.recall, r.f1));
}

Outcome back_projection() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_norm = 0.0, worst_ratio = 0.0;
  for (int i = 0; i < 10000; ++i) {
    ImageMeta meta;
    meta.tree_id = "bp";
    meta.width_px = 50 + static_cast<int>(u(rng) * 1950);
    meta.height_px = 50 + static_cast<int>(u(rng) * 1950);
    const double gsd = 0.001 + 0.05 * u(rng);
    meta.x_min = -500 + 1000 * u(rng);
    meta.z_min = -50 + 400 * u(rng);
    meta.x_max = meta.x_min + gsd * meta.width_px;
    meta.z_max = meta.z_min + gsd * meta.height_px;

    const double xn = u(rng), yn = u(rng);
    RawDetection d;
    d.keypoints[kCenter] = {xn, yn, 1.0};
    const auto world = convert_to_real_world(d, meta).kp_world[kCenter];
    const auto back = world_to_normalized(meta, world);
    worst_norm = std::max({worst_norm, std::abs(back.x - xn), std::abs(back.z - yn)});

    const auto px = world_to_pixel(meta, world.x, world.z);
    const auto centre = pixel_center_to_world(meta, px);
    const double err = std::hypot(centre.x - world.x, centre.z - world.z);
    worst_ratio = std::max(worst_ratio, err / (gsd / std::sqrt(2.0)));
  }
  return pass_if(worst_norm <= 1e-12 && worst_ratio <= 1.0 + 1e-9,
                 fmt::format("10000 keypoints: max normalized error {:.2e}, max pixel error {:.4f} x gsd/sqrt2",
                             worst_norm, worst_ratio));
}

Outcome filter_correctness() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> uz(0.0, 15.0), uc(0.0, 1.0), us(0.01, 100.0);
  std::size_t mismatches = 0, spacing_violations = 0, rescale_changes = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<WhorlCandidate> cands(rng() % 60);
    for (auto& c : cands) {
      c.tree_id = "f";
      c.z_m = uz(rng);
      c.confidence = uc(rng);
      c.view_angle_deg = 45.0 * static_cast<double>(rng() % 4);
      c.kp_scores = {1, 1, 1};
    }
    const auto got = filter_whorls(merge_views(cands), FilterConfig{});
    const auto ref = brute_force_filter(cands, 0.25);
    bool same = got.size() == ref.size();
    for (std::size_t i = 0; same && i < got.size(); ++i)
      same = got[i].z_m == ref[i].z_m && got[i].confidence == ref[i].confidence;
    mismatches += !same;
    for (std::size_t i = 1; i < got.size(); ++i) spacing_violations += got[i].z_m - got[i - 1].z_m < 0.25;

    const double s = us(rng);
    auto scaled = cands;
    for (auto& c : scaled) c.confidence *= s;
    const auto got_scaled = filter_whorls(merge_views(scaled), FilterConfig{});
    bool invariant = got_scaled.size() == got.size();
    for (std::size_t i = 0; invariant && i < got.size(); ++i) invariant = got_scaled[i].z_m == got[i].z_m;
    rescale_changes += !invariant;
  }
  return pass_if(mismatches == 0 && spacing_violations == 0 && rescale_changes == 0,
                 fmt::format("1000 lists: {} reference mismatches, {} spacing violations, {} rescale changes",
                             mismatches, spacing_violations, rescale_changes));
}

Outcome matching_optimality() {
  std::mt19937_64 rng(5150);
  std::uniform_real_distribution<double> u(0.0, 2.5);
  std::size_t failures = 0;
  constexpr int trials = 20000;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> p(rng() % 7), g(rng() % 7);
    for (auto& v : p) v = u(rng);
    for (auto& v : g) v = u(rng);
    const auto m = match_whorls(p, g, 0.2);
    bool ok = m.pairs.size() == exhaustive_max_matching(p, g, 0.2);
    for (auto [pi, gi] : m.pairs) ok = ok && std::abs(p[pi] - g[gi]) <= 0.2;
    failures += !ok;
  }
  return pass_if(failures == 0, fmt::format("{} trials with |pred|,|gt| <= 6: {} non-maximum", trials, failures));
}

Outcome metric_identities() {
  std::size_t bad = 0;
  for (std::size_t tp = 0; tp <= 20; ++tp)
    for (std::size_t fp = 0; fp <= 20; ++fp)
      for (std::size_t fn = 0; fn <= 20; ++fn) {
        const double ep = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        const double er = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        const double ef = ep + er > 0.0 ? 2.0 * (ep * er) / (ep + er) : 0.0;
        const double p = precision(tp, fp), r = recall(tp, fn), f = f1(p, r);
        bad += std::abs(p - ep) > 1e-15 || std::abs(r - er) > 1e-15 || std::abs(f - ef) > 1e-15;
      }
  const double p = precision(2, 1), r = recall(2, 1), f = f1(p, r);
  const bool worked = std::abs(p - 2.0 / 3) < 1e-15 && std::abs(r - 2.0 / 3) < 1e-15 && std::abs(f - 2.0 / 3) < 1e-15;
  return pass_if(bad == 0 && worked,
                 fmt::format("9261 grid points: {} mismatches; tp=2 fp=1 fn=1 -> P={:.6f} R={:.6f} F1={:.6f}", bad, p,
                             r, f));
}

Outcome geometry_identities() {
  const double a180 = calculate_angle_at_p2({-1, 0}, {0, 0}, {1, 0}).value_or(-1);
  const double a90 = calculate_angle_at_p2({0, 1}, {0, 0}, {1, 0}).value_or(-1);
  const double a90b = calculate_angle_at_p2({-1, 1}, {0, 0}, {1, 1}).value_or(-1);
  bool ok = std::abs(a180 - 180) <= 1e-9 && std::abs(a90 - 90) <= 1e-9 && std::abs(a90b - 90) <= 1e-9;

  std::mt19937_64 rng(31337);
  std::uniform_real_distribution<double> u(-10, 10), ua(0, 2 * std::numbers::pi), us(0.05, 50);
  double worst_sym = 0, worst_tf = 0, worst_len = 0;
  for (int i = 0; i < 1000; ++i) {
    const PlanePoint p1{u(rng), u(rng)}, p2{u(rng), u(rng)}, p3{u(rng), u(rng)};
    const double a = *calculate_angle_at_p2(p1, p2, p3);
    worst_sym = std::max(worst_sym, std::abs(a - *calculate_angle_at_p2(p3, p2, p1)));
    const double th = ua(rng), s = us(rng), tx = u(rng), tz = u(rng);
    auto tf = [&](PlanePoint p) {
      return PlanePoint{s * (std::cos(th) * p.x - std::sin(th) * p.z) + tx, s * (std::sin(th) * p.x + std::cos(th) * p.z) + tz};
    };
    worst_tf = std::max(worst_tf, std::abs(a - *calculate_angle_at_p2(tf(p1), tf(p2), tf(p3))));
    const double ref = std::max(std::sqrt((p1.x - p2.x) * (p1.x - p2.x) + (p1.z - p2.z) * (p1.z - p2.z)),
                                std::sqrt((p3.x - p2.x) * (p3.x - p2.x) + (p3.z - p2.z) * (p3.z - p2.z)));
    worst_len = std::max(worst_len, std::abs(calculate_distance(p2, p1, p3) - ref));
  }
  ok = ok && worst_sym <= 1e-9 && worst_tf <= 1e-6 && worst_len <= 1e-12;
  return pass_if(ok, fmt::format("180/90/90 -> {:.12f}/{:.12f}/{:.12f}; 1000 triples: symmetry {:.1e} deg, "
                                 "rotation+scale {:.1e} deg, length {:.1e} m",
                                 a180, a90, a90b, worst_sym, worst_tf, worst_len));
}

Outcome decoder_round_trip() {
  std::mt19937_64 rng(4242);
  std::uniform_int_distribution<int> upx(64, 2048), un(0, 40);
  DecoderConfig cfg;
  double worst = 0.0;
  std::size_t count_mismatch = 0;
  for (int t = 0; t < 1000; ++t) {
    auto meta = square_meta(0, 0, 10, upx(rng));
    meta.height_px = upx(rng);
    std::vector<RawDetection> dets(static_cast<std::size_t>(un(rng)));
    for (auto& d : dets) d = random_detection(rng, cfg.score_threshold);
    std::stable_sort(dets.begin(), dets.end(), detection_order);
    const auto tensor = encode_pose_tensor(dets, meta);
    const auto decoded = decode_pose_tensor(tensor, meta, cfg);
    const auto again = encode_pose_tensor(decoded, meta);
    if (decoded.size() != dets.size() || again.data.size() != tensor.data.size()) {
      ++count_mismatch;
      continue;
    }
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const auto& a = dets[i];
      const auto& b = decoded[i];
      worst = std::max({worst, std::abs(a.bbox.xc - b.bbox.xc), std::abs(a.bbox.yc - b.bbox.yc),
                        std::abs(a.bbox.w - b.bbox.w), std::abs(a.bbox.h - b.bbox.h), std::abs(a.score - b.score)});
      for (std::size_t k = 0; k < 3; ++k)
        worst = std::max({worst, std::abs(a.keypoints[k].x - b.keypoints[k].x),
                          std::abs(a.keypoints[k].y - b.keypoints[k].y),
                          std::abs(a.keypoints[k].score - b.keypoints[k].score)});
    }
    for (std::uint32_t c = 0; c < tensor.cols; ++c)
      for (std::uint32_t r = 0; r < kPoseRows; ++r) {
        const double scale = (r == 0 || r == 2 || r == 5 || r == 8 || r == 11) ? meta.width_px
                             : (r == 4 || r == 7 || r == 10 || r == 13)        ? 1.0
                                                                               : meta.height_px;
        worst = std::max(worst, std::abs(static_cast<double>(tensor.at(r, c)) - again.at(r, c)) / scale);
      }
  }

  std::size_t nms_mismatch = 0;
  std::uniform_real_distribution<double> uthr(0.05, 0.95);
  for (int t = 0; t < 1000; ++t) {
    std::vector<RawDetection> dets(static_cast<std::size_t>(un(rng)));
    for (auto& d : dets) d = random_detection(rng);
    const double thr = uthr(rng);
    nms_mismatch += nms(dets, thr) != reference_nms(dets, thr);
  }
  return pass_if(worst <= 1e-4 && count_mismatch == 0 && nms_mismatch == 0,
                 fmt::format("1000 tensors: max normalized error {:.2e}, {} count mismatches; 1000 NMS sets: {} "
                             "reference mismatches",
                             worst, count_mismatch, nms_mismatch));
}

struct ParallelOutcomes {
  Outcome determinism;
  Outcome speedup;
};

ParallelOutcomes parallel_runs(const std::filesystem::path& work) {
  // Calibrate density so each tree carries roughly 100k points.
  const auto dir = work / "big";
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < 8; ++i) {
    auto cfg = synth_batch_config(i, 99);
    const auto probe = generate_tree(cfg).first.size();
    cfg.point_density_pts_per_m *= 100000.0 / static_cast<double>(probe);
    const auto [cloud, truth] = generate_tree(cfg);
    sizes.push_back(cloud.size());
    write_tree(cloud, truth, dir);
  }
  const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
  const auto detector = OracleDetector::from_directory(dir, 0.0, 0);

  auto cfg1 = oracle_config(dir, work / "w1", 1);
  auto t0 = std::chrono::steady_clock::now();
  const auto one = run_pipeline(cfg1, detector);
  const double t_one = seconds_since(t0);

  auto cfg4 = oracle_config(dir, work / "w4", 4);
  t0 = std::chrono::steady_clock::now();
  const auto four = run_pipeline(cfg4, detector);
  const double t_four = seconds_since(t0);

  const bool identical = one.exit_code == kExitOk && four.exit_code == kExitOk && one.csv == four.csv &&
                         io::read_file_text(work / "w1" / "eval_report.json") ==
                             io::read_file_text(work / "w4" / "eval_report.json");
  const auto manifest = nlohmann::json::parse(io::read_file_text(work / "w1" / "manifest.json"));
  const bool timed = manifest["trees"].size() == 8 && manifest["trees"][0].contains("timings_ms");

  ParallelOutcomes out;
  out.determinism = pass_if(identical && timed && t_one < 30.0,
                            fmt::format("8 trees of {}-{} points: outputs identical for 1 and 4 workers: {}; "
                                        "single worker {:.2f} s ({:.2f} s/tree); per-tree timings in manifest: {}",
                                        *lo, *hi, identical ? "yes" : "no", t_one, t_one / 8, timed ? "yes" : "no"));
  const double speedup = t_one / t_four;
  const unsigned cores = std::thread::hardware_concurrency();
  if (cores < 4) {
    out.speedup = {Verdict::Skip, fmt::format("needs a 4-core machine, this one reports {} core(s); measured "
                                              "speedup {:.2f}x ({:.2f} s vs {:.2f} s)",
                                              cores, speedup, t_one, t_four)};
  } else {
    out.speedup = pass_if(speedup >= 2.0, fmt::format("{} cores: speedup {:.2f}x ({:.2f} s vs {:.2f} s)", cores,
                                                      speedup, t_one, t_four));
  }
  return out;
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::off);
  TempDir work("acceptance");
  const auto batch = work / "batch20";
  write_batch(batch, 20, 2024);

  int failures = 0;
  auto report = [&](const char* name, const Outcome& o) {
    const char* tag = o.verdict == Verdict::Pass ? "PASS" : o.verdict == Verdict::Fail ? "FAIL" : "SKIP";
    failures += o.verdict == Verdict::Fail;
    std::printf("[%s] %s: %s\n", tag, name, o.detail.c_str());
    std::fflush(stdout);
  };
  auto guarded = [&](const char* name, const std::function<Outcome()>& fn) {
    try {
      report(name, fn());
    } catch (const std::exception& e) {
      report(name, {Verdict::Fail, std::string("exception: ") + e.what()});
    }
  };

  guarded("oracle end-to-end", [&] { return oracle_end_to_end(batch, work.path()); });
  guarded("noise robustness", [&] { return noise_robustness(batch, work.path()); });
  guarded("back-projection inverse", back_projection);
  guarded("filter correctness", filter_correctness);
  guarded("matching optimality", matching_optimality);
  guarded("metric identities", metric_identities);
  guarded("geometry identities", geometry_identities);
  guarded("decoder round-trip", decoder_round_trip);
  try {
    const auto par = parallel_runs(work.path());
    report("parallel determinism + single-worker throughput", par.determinism);
    report("4-worker speedup >= 2x", par.speedup);
  } catch (const std::exception& e) {
    report("parallel determinism + throughput", {Verdict::Fail, std::string("exception: ") + e.what()});
  }

  std::printf("%s\n", failures == 0 ? "acceptance: all evaluated criteria passed" : "acceptance: FAILED");
  return failures == 0 ? 0 : 1;
}
