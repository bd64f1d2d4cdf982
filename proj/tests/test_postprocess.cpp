#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "whorl/postprocess.hpp"
#include "whorl/synthgen.hpp"

using namespace whorl;
using namespace whorl::testing;

namespace {

WhorlCandidate cand(double z, double conf, double view = 0.0) {
  WhorlCandidate c;
  c.tree_id = "t";
  c.z_m = z;
  c.confidence = conf;
  c.view_angle_deg = view;
  c.kp_scores = {1, 1, 1};
  return c;
}

std::vector<double> zs(const std::vector<Whorl>& ws) {
  std::vector<double> out;
  for (const auto& w : ws) out.push_back(w.z_m);
  return out;
}

RawDetection center_at(double x, double y) {
  RawDetection d;
  d.score = 0.5;
  d.keypoints = {Keypoint{x, y, 1}, Keypoint{x, y, 1}, Keypoint{x, y, 1}};
  return d;
}

}  // namespace

TEST(RealWorld, Midpoint) {
  const auto c = convert_to_real_world(center_at(0.5, 0.5), square_meta(0, 0, 10));
  EXPECT_NEAR(c.kp_world[kCenter].x, 5.0, 1e-12);
  EXPECT_NEAR(c.z_m, 5.0, 1e-12);
}

TEST(RealWorld, TopLeftCorner) {
  const auto meta = square_meta(-3, 7, 10);
  const auto c = convert_to_real_world(center_at(0, 0), meta);
  EXPECT_EQ(c.kp_world[kCenter].x, meta.x_min);
  EXPECT_EQ(c.z_m, meta.z_max);
}

TEST(RealWorld, AffineExample) {
  const auto c = convert_to_real_world(center_at(0.25, 0.1), square_meta(-5, 10, 10));
  EXPECT_NEAR(c.kp_world[kCenter].x, -2.5, 1e-12);
  EXPECT_NEAR(c.z_m, 19.0, 1e-12);
}

TEST(RealWorld, InverseOfNormalization) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1), off(-100, 100);
  for (int i = 0; i < 1000; ++i) {
    const auto meta = square_meta(off(rng), off(rng), 1 + 20 * u(rng), 1000);
    const double x = u(rng), y = u(rng);
    const auto c = convert_to_real_world(center_at(x, y), meta);
    const auto n = world_to_normalized(meta, c.kp_world[kCenter]);
    EXPECT_NEAR(n.x, x, 1e-12);
    EXPECT_NEAR(n.z, y, 1e-12);
  }
}

TEST(Merge, SortsAcrossViews) {
  std::vector<WhorlCandidate> all;
  for (double z : {3.0, 1.0, 2.0}) all.push_back(cand(z, 0.5, 0));
  for (double z : {2.5, 0.5, 2.0}) all.push_back(cand(z, 0.7, 90));
  const auto merged = merge_views(all);
  ASSERT_EQ(merged.size(), 6u);
  for (std::size_t i = 1; i < merged.size(); ++i) EXPECT_LE(merged[i - 1].z_m, merged[i].z_m);
  EXPECT_EQ(merged[2].z_m, 2.0);
  EXPECT_EQ(merged[2].confidence, 0.7);  // tie on z: higher confidence first
}

TEST(Merge, OneViewEmpty) {
  std::vector<WhorlCandidate> only{cand(1, 0.5, 45), cand(2, 0.5, 45)};
  const auto merged = merge_views(only);
  ASSERT_EQ(merged.size(), 2u);
  EXPECT_EQ(merged[0].z_m, 1.0);
  EXPECT_EQ(merged[1].z_m, 2.0);
}

TEST(Merge, RejectsMixedTrees) {
  auto a = cand(1, 1);
  auto b = cand(2, 1);
  b.tree_id = "other";
  EXPECT_THROW(merge_views({a, b}), Error);
}

TEST(Merge, OracleViewsAgreeOnHeight) {
  SynthGroundTruth truth;
  SynthWhorl w;
  w.z_m = 4.37;
  w.tip1 = {-1, 5};
  w.tip2 = {1, 5};
  truth.whorls = {w};
  std::vector<WhorlCandidate> cands;
  for (double view : {0.0, 45.0, 90.0, 135.0}) {
    auto meta = square_meta(-5, 0, 10, 1000);
    meta.view_angle_deg = view;
    for (const auto& d : oracle_detect(truth, meta, 0.0, 0)) cands.push_back(convert_to_real_world(d, meta));
  }
  const auto merged = merge_views(cands);
  ASSERT_EQ(merged.size(), 4u);
  for (const auto& c : merged) EXPECT_NEAR(c.z_m, 4.37, 0.01 / std::sqrt(2.0));
}

TEST(Filter, KeepsHighestThenNextOutsideRadius) {
  const auto out = filter_whorls({cand(1.0, 0.9), cand(1.1, 0.8), cand(1.4, 0.7)}, FilterConfig{});
  EXPECT_EQ(zs(out), (std::vector<double>{1.0, 1.4}));
}

TEST(Filter, EmptyAndSingle) {
  EXPECT_TRUE(filter_whorls({}, FilterConfig{}).empty());
  const auto out = filter_whorls({cand(3.3, 0.1, 90)}, FilterConfig{});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].z_m, 3.3);
  EXPECT_EQ(out[0].source_view_deg, 90.0);
}

TEST(Filter, ExactRadiusIsNotSuppressed) {
  const auto out = filter_whorls({cand(1.0, 0.9), cand(1.5, 0.8)}, FilterConfig{0.5});
  EXPECT_EQ(out.size(), 2u);
}

TEST(Filter, SuppressedCandidatesDoNotSuppress) {
  // 1.2 is removed by 1.0, so 1.4 survives even though it sits near 1.2.
  const auto out = filter_whorls({cand(1.0, 0.9), cand(1.2, 0.8), cand(1.4, 0.7)}, FilterConfig{0.3});
  EXPECT_EQ(zs(out), (std::vector<double>{1.0, 1.4}));
}

TEST(Filter, ConfidenceTieGoesToLowerZThenView) {
  auto out = filter_whorls({cand(1.1, 0.8), cand(1.0, 0.8)}, FilterConfig{});
  EXPECT_EQ(zs(out), (std::vector<double>{1.0}));
  out = filter_whorls({cand(1.0, 0.8, 90), cand(1.0, 0.8, 45)}, FilterConfig{});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].source_view_deg, 45.0);
}

TEST(Filter, MatchesBruteForceOnRandomLists) {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> uz(0, 10), uc(0, 1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<WhorlCandidate> cands;
    const int n = static_cast<int>(rng() % 40);
    for (int i = 0; i < n; ++i) cands.push_back(cand(uz(rng), uc(rng), 45.0 * static_cast<double>(rng() % 4)));
    const auto got = filter_whorls(merge_views(cands), FilterConfig{});
    const auto ref = brute_force_filter(cands, 0.25);
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].z_m, ref[i].z_m);
      EXPECT_EQ(got[i].confidence, ref[i].confidence);
    }
    for (std::size_t i = 1; i < got.size(); ++i) EXPECT_GE(got[i].z_m - got[i - 1].z_m, 0.25);
  }
}

TEST(Filter, RejectsNonPositiveRadius) {
  EXPECT_THROW(filter_whorls({cand(1, 1)}, FilterConfig{0.0}), ConfigError);
}

TEST(Geometry, AngleExamples) {
  EXPECT_NEAR(*calculate_angle_at_p2({-1, 0}, {0, 0}, {1, 0}), 180.0, 1e-12);
  EXPECT_NEAR(*calculate_angle_at_p2({0, 1}, {0, 0}, {1, 0}), 90.0, 1e-12);
  EXPECT_NEAR(*calculate_angle_at_p2({-1, 1}, {0, 0}, {1, 1}), 90.0, 1e-12);
  EXPECT_NEAR(*calculate_angle_at_p2({2, 0}, {0, 0}, {5, 0}), 0.0, 1e-12);
}

TEST(Geometry, DegenerateAngleIsAbsent) {
  EXPECT_FALSE(calculate_angle_at_p2({0, 0}, {0, 0}, {1, 0}));
  EXPECT_FALSE(calculate_angle_at_p2({1, 0}, {0, 0}, {0, 0}));
}

TEST(Geometry, AngleInvariants) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-5, 5), ua(0, 2 * std::numbers::pi), us(0.01, 100);
  for (int i = 0; i < 1000; ++i) {
    const PlanePoint p1{u(rng), u(rng)}, p2{u(rng), u(rng)}, p3{u(rng), u(rng)};
    const auto a = calculate_angle_at_p2(p1, p2, p3);
    ASSERT_TRUE(a);
    EXPECT_GE(*a, 0.0);
    EXPECT_LE(*a, 180.0);
    EXPECT_NEAR(*a, *calculate_angle_at_p2(p3, p2, p1), 1e-9);
    const double th = ua(rng), s = us(rng);
    auto tf = [&](PlanePoint p) {
      return PlanePoint{s * (std::cos(th) * p.x - std::sin(th) * p.z) + 3, s * (std::sin(th) * p.x + std::cos(th) * p.z) - 1};
    };
    EXPECT_NEAR(*a, *calculate_angle_at_p2(tf(p1), tf(p2), tf(p3)), 1e-6);
  }
}

TEST(Geometry, DistanceExamples) {
  EXPECT_DOUBLE_EQ(calculate_distance({0, 0}, {3, 4}, {1, 1}), 5.0);
  EXPECT_EQ(calculate_distance({2, 2}, {2, 2}, {2, 2}), 0.0);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int i = 0; i < 1000; ++i) {
    const PlanePoint a{u(rng), u(rng)}, b{u(rng), u(rng)}, c{u(rng), u(rng)};
    const double ref = std::max(std::sqrt((a.x - b.x) * (a.x - b.x) + (a.z - b.z) * (a.z - b.z)),
                                std::sqrt((a.x - c.x) * (a.x - c.x) + (a.z - c.z) * (a.z - c.z)));
    EXPECT_NEAR(calculate_distance(a, b, c), ref, 1e-12);
  }
}

TEST(Geometry, AttachRespectsKeypointGate) {
  Whorl w;
  w.kp_world = {PlanePoint{-1, 1}, PlanePoint{0, 0}, PlanePoint{1, 1}};
  w.kp_scores = {0.9, 0.9, 0.9};
  attach_geometry(w, 0.3);
  ASSERT_TRUE(w.insertion_angle_deg);
  EXPECT_NEAR(*w.insertion_angle_deg, 90.0, 1e-12);
  EXPECT_NEAR(*w.max_branch_len_m, std::sqrt(2.0), 1e-12);
  w.kp_scores[kRightTip] = 0.29;
  attach_geometry(w, 0.3);
  EXPECT_FALSE(w.insertion_angle_deg);
  EXPECT_FALSE(w.max_branch_len_m);
}

TEST(Internodes, Differences) {
  std::vector<Whorl> ws(3);
  ws[0].z_m = 1.0;
  ws[1].z_m = 1.6;
  ws[2].z_m = 2.5;
  const auto d = internodal_distances(ws);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_NEAR(d[0], 0.6, 1e-12);
  EXPECT_NEAR(d[1], 0.9, 1e-12);
  EXPECT_TRUE(internodal_distances({ws[0]}).empty());
}

TEST(Csv, FormatAndParse) {
  Whorl a;
  a.tree_id = "t1";
  a.z_m = 1.5;
  a.confidence = 0.875;
  a.insertion_angle_deg = 120.0;
  a.max_branch_len_m = 1.25;
  a.source_view_deg = 45;
  Whorl b = a;
  b.z_m = 2.0;
  b.insertion_angle_deg.reset();
  b.max_branch_len_m.reset();
  const auto text = format_whorls_csv({a, b});
  EXPECT_EQ(text, std::string(kWhorlCsvHeader) +
                      "\nt1,1.500000,0.875000,120.000000,1.250000,45.000000\nt1,2.000000,0.875000,,,45.000000\n");
  const auto back = parse_whorls_csv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].insertion_angle_deg, 120.0);
  EXPECT_FALSE(back[1].max_branch_len_m);
  EXPECT_THROW(parse_whorls_csv("bad header\n"), ParseError);
  EXPECT_THROW(parse_whorls_csv(std::string(kWhorlCsvHeader) + "\nt,1,2\n"), ParseError);
}

class EndToEnd : public ::testing::Test {
 protected:
  void SetUp() override {
    SynthTreeConfig cfg;
    cfg.tree_id = "e2e";
    cfg.height_m = 12.0;
    cfg.first_whorl_z_m = 2.5;
    cfg.whorl_spacing_m = 1.0;
    cfg.base_z_m = 55.0;
    cfg.stem_x_m = 3.0;
    cfg.point_density_pts_per_m = 150;
    auto [cloud, t] = generate_tree(cfg);
    truth = t;
    path = write_tree(cloud, truth, dir.path()).cloud;
    settings.image_px = 500;
  }

  TempDir dir{"e2e"};
  std::filesystem::path path;
  SynthGroundTruth truth;
  PipelineSettings settings;
};

TEST_F(EndToEnd, OracleRecoversEveryWhorl) {
  const OracleDetector oracle({{"e2e", truth}}, 0.0, 0);
  const auto result = pose_detection_tree(path, oracle, settings);
  ASSERT_EQ(result.whorls.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_NEAR(result.whorls[i].z_m, truth.whorls[i].z_m, 0.01);
    ASSERT_TRUE(result.whorls[i].insertion_angle_deg) << i;
    // Every view sees the branch plane; foreshortening only narrows the angle.
    EXPECT_LE(*result.whorls[i].insertion_angle_deg, 120.0 + 1e-6);
  }
  const auto d = internodal_distances(result.whorls);
  for (double v : d) EXPECT_NEAR(v, 1.0, 0.02);
  EXPECT_EQ(result.image_count, 8u);
}

TEST_F(EndToEnd, ViewZeroGivesExactGeometry) {
  settings.slicing.view_angles_deg = {0.0};
  const OracleDetector oracle({{"e2e", truth}}, 0.0, 0);
  const auto result = pose_detection_tree(path, oracle, settings);
  ASSERT_EQ(result.whorls.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    ASSERT_TRUE(result.whorls[i].insertion_angle_deg);
    EXPECT_NEAR(*result.whorls[i].insertion_angle_deg, 120.0, 1e-6);
    EXPECT_NEAR(*result.whorls[i].max_branch_len_m, truth.whorls[i].max_len_m, 1e-6);
  }
}

TEST_F(EndToEnd, EmptyDetectorAndDeterminism) {
  const FixtureDetector none(PredictionMap{});
  EXPECT_TRUE(pose_detection_tree(path, none, settings).whorls.empty());
  const OracleDetector oracle({{"e2e", truth}}, 0.03, 5);
  const auto a = pose_detection_tree(path, oracle, settings);
  const auto b = pose_detection_tree(path, oracle, settings);
  EXPECT_EQ(format_whorls_csv(a.whorls), format_whorls_csv(b.whorls));
  EXPECT_EQ(candidates_to_json(a.candidates), candidates_to_json(b.candidates));
}
