#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "whorl/error.hpp"
#include "whorl/io/ascii_xyz.hpp"
#include "whorl/io/bytes.hpp"
#include "whorl/pointcloud_io.hpp"
#include "whorl/whorl_geometry.hpp"

namespace whorl {

/// Parameters of a procedural conifer. Lengths in meters, angles in degrees.
struct SynthTreeConfig {
  std::string tree_id = "synth";
  double height_m = 12.0;
  double base_z_m = 0.0;
  double stem_x_m = 0.0;
  double stem_y_m = 0.0;
  double first_whorl_z_m = 2.0;
  double whorl_spacing_m = 0.5;
  /// Added to the spacing after every whorl (linearly varying internodes).
  double spacing_slope_m = 0.0;
  double insertion_angle_deg = 120.0;
  double branch_len_base_m = 2.0;
  /// Fraction of the base length lost between the first whorl and the top.
  double taper = 0.8;
  double stem_radius_m = 0.1;
  double point_density_pts_per_m = 300.0;
  /// Ground patch size as a fraction of the tree points; anchors the robust base.
  double ground_fraction = 0.03;
  double ground_radius_m = 0.6;
  double noise_sigma_m = 0.0;
  /// When false every branch pair lies in the x-z plane (view 0).
  bool random_azimuth = false;
  std::uint64_t seed = 0;

  static constexpr double kMinSpacing = 0.3;

  void validate() const {
    if (!(height_m > first_whorl_z_m) || !(first_whorl_z_m >= 0.0))
      throw ConfigError("synth: need height_m > first_whorl_z_m >= 0");
    if (!(whorl_spacing_m >= kMinSpacing)) throw ConfigError("synth: whorl_spacing_m must be >= 0.3");
    if (!(insertion_angle_deg > 0.0 && insertion_angle_deg <= 180.0))
      throw ConfigError("synth: insertion_angle_deg must lie in (0,180]");
    if (!(branch_len_base_m > 0.0)) throw ConfigError("synth: branch_len_base_m must be > 0");
    if (!(taper >= 0.0 && taper < 1.0)) throw ConfigError("synth: taper must lie in [0,1)");
    if (!(stem_radius_m >= 0.0)) throw ConfigError("synth: stem_radius_m must be >= 0");
    if (!(point_density_pts_per_m > 0.0)) throw ConfigError("synth: point density must be > 0");
    if (!(ground_fraction >= 0.0) || !(ground_radius_m >= 0.0)) throw ConfigError("synth: ground patch must be >= 0");
    if (!(noise_sigma_m >= 0.0)) throw ConfigError("synth: noise_sigma_m must be >= 0");
  }
};

/// Exact (pre-noise) geometry of one whorl. Tip x is the signed horizontal
/// offset from the stem axis inside the branch plane; z is height above the
/// true base. The centre is (0, z_m).
struct SynthWhorl {
  double z_m = 0.0;
  PlanePoint tip1;
  PlanePoint tip2;
  double angle_deg = 0.0;
  double max_len_m = 0.0;
  /// Horizontal direction of the branch plane; 0 is the x-z plane.
  double azimuth_deg = 0.0;

  PlanePoint center() const { return {0.0, z_m}; }
};

struct SynthGroundTruth {
  std::vector<SynthWhorl> whorls;

  std::vector<double> z_values() const {
    std::vector<double> z;
    z.reserve(whorls.size());
    for (const auto& w : whorls) z.push_back(w.z_m);
    return z;
  }
};

/// Whorl heights: z_0 = first, then gaps of spacing + i * slope, up to the top.
inline std::vector<double> synth_whorl_heights(const SynthTreeConfig& cfg) {
  std::vector<double> z;
  for (std::size_t i = 0;; ++i) {
    double zi;
    if (cfg.spacing_slope_m == 0.0) {
      // Multiplication keeps the count at floor((H - z1) / s) + 1.
      zi = cfg.first_whorl_z_m + static_cast<double>(i) * cfg.whorl_spacing_m;
    } else if (i == 0) {
      zi = cfg.first_whorl_z_m;
    } else {
      const double gap = cfg.whorl_spacing_m + cfg.spacing_slope_m * static_cast<double>(i - 1);
      if (!(gap >= SynthTreeConfig::kMinSpacing))
        throw ConfigError("synth: spacing falls below 0.3 m after whorl " + std::to_string(i - 1));
      zi = z.back() + gap;
    }
    if (zi > cfg.height_m + 1e-9) break;
    z.push_back(zi);
  }
  return z;
}

/// Samples the stem, the whorl branches and a small ground patch. The cloud
/// keeps the configured base offset; truth heights are relative to the base.
inline std::pair<TreeCloud, SynthGroundTruth> generate_tree(const SynthTreeConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double deg = std::numbers::pi / 180.0;

  SynthGroundTruth truth;
  const double half = cfg.insertion_angle_deg / 2.0 * deg;
  const auto heights = synth_whorl_heights(cfg);
  const double crown = cfg.height_m - cfg.first_whorl_z_m;
  for (double z : heights) {
    SynthWhorl w;
    w.z_m = z;
    const double rel = (z - cfg.first_whorl_z_m) / crown;
    const double len = cfg.branch_len_base_m * (1.0 - cfg.taper * rel);
    w.tip1 = {-len * std::sin(half), z + len * std::cos(half)};
    w.tip2 = {len * std::sin(half), z + len * std::cos(half)};
    w.angle_deg = cfg.insertion_angle_deg;
    w.max_len_m = len;
    w.azimuth_deg = cfg.random_azimuth ? unit(rng) * 180.0 : 0.0;
    truth.whorls.push_back(w);
  }

  std::vector<Point3> pts;
  const double sx = cfg.stem_x_m, sy = cfg.stem_y_m;
  const double density = cfg.point_density_pts_per_m;

  const auto n_stem = static_cast<std::size_t>(std::ceil(density * cfg.height_m));
  for (std::size_t i = 0; i < n_stem; ++i) {
    const double z = unit(rng) * cfg.height_m;
    const double a = unit(rng) * 2.0 * std::numbers::pi;
    pts.push_back({sx + cfg.stem_radius_m * std::cos(a), sy + cfg.stem_radius_m * std::sin(a), z});
  }
  pts.push_back({sx, sy, cfg.height_m});

  for (const auto& w : truth.whorls) {
    const double ux = std::cos(w.azimuth_deg * deg), uy = std::sin(w.azimuth_deg * deg);
    for (const auto& tip : {w.tip1, w.tip2}) {
      const double len = distance(tip, w.center());
      const auto n = static_cast<std::size_t>(std::ceil(density * len));
      const double t0 = len > 0.0 ? std::min(1.0, cfg.stem_radius_m / len) : 1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = t0 + (1.0 - t0) * unit(rng);
        pts.push_back({sx + t * tip.x * ux, sy + t * tip.x * uy, w.z_m + t * (tip.z - w.z_m)});
      }
    }
  }

  const auto n_ground = static_cast<std::size_t>(std::ceil(cfg.ground_fraction * static_cast<double>(pts.size())));
  for (std::size_t i = 0; i < n_ground; ++i) {
    const double r = cfg.ground_radius_m * std::sqrt(unit(rng));
    const double a = unit(rng) * 2.0 * std::numbers::pi;
    pts.push_back({sx + r * std::cos(a), sy + r * std::sin(a), 0.0});
  }

  if (cfg.noise_sigma_m > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma_m);
    for (auto& p : pts) {
      p.x += noise(rng);
      p.y += noise(rng);
      p.z += noise(rng);
    }
  }
  if (cfg.base_z_m != 0.0)
    for (auto& p : pts) p.z += cfg.base_z_m;

  return {make_tree_cloud(cfg.tree_id, std::move(pts)), std::move(truth)};
}

/// Varied configuration for tree `index` of a benchmark batch: heights 8-25 m,
/// internodes 0.4-1.0 m.
inline SynthTreeConfig synth_batch_config(std::size_t index, std::uint64_t base_seed) {
  std::mt19937_64 rng(base_seed * 1000003ULL + index);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SynthTreeConfig cfg;
  char id[32];
  std::snprintf(id, sizeof(id), "tree_%03zu", index);
  cfg.tree_id = id;
  cfg.height_m = 8.0 + 17.0 * unit(rng);
  cfg.whorl_spacing_m = 0.4 + 0.6 * unit(rng);
  cfg.first_whorl_z_m = 1.0 + 2.0 * unit(rng);
  cfg.insertion_angle_deg = 90.0 + 60.0 * unit(rng);
  cfg.branch_len_base_m = 1.0 + 2.0 * unit(rng);
  cfg.stem_x_m = -20.0 + 40.0 * unit(rng);
  cfg.stem_y_m = -20.0 + 40.0 * unit(rng);
  cfg.base_z_m = 100.0 * unit(rng);
  cfg.noise_sigma_m = 0.005;
  cfg.seed = base_seed * 7919ULL + index;
  return cfg;
}

inline nlohmann::json truth_to_json(const SynthGroundTruth& truth) {
  auto arr = nlohmann::json::array();
  for (const auto& w : truth.whorls) {
    nlohmann::json j{{"z_m", w.z_m},
                     {"tip1", {w.tip1.x, w.tip1.z}},
                     {"tip2", {w.tip2.x, w.tip2.z}},
                     {"angle_deg", w.angle_deg},
                     {"max_len_m", w.max_len_m}};
    if (w.azimuth_deg != 0.0) j["azimuth_deg"] = w.azimuth_deg;
    arr.push_back(std::move(j));
  }
  return arr;
}

inline SynthGroundTruth truth_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw SchemaError("ground truth: top level must be an array");
  SynthGroundTruth truth;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& j = arr[i];
    const auto where = "ground truth item " + std::to_string(i);
    auto number = [&](const char* name) {
      if (!j.contains(name) || !j[name].is_number()) throw SchemaError(where + ": field '" + name + "' must be a number");
      return j[name].get<double>();
    };
    auto point = [&](const char* name) {
      if (!j.contains(name) || !j[name].is_array() || j[name].size() != 2 || !j[name][0].is_number() ||
          !j[name][1].is_number())
        throw SchemaError(where + ": field '" + name + "' must be [x, z]");
      return PlanePoint{j[name][0].get<double>(), j[name][1].get<double>()};
    };
    SynthWhorl w;
    w.z_m = number("z_m");
    w.tip1 = point("tip1");
    w.tip2 = point("tip2");
    w.angle_deg = number("angle_deg");
    w.max_len_m = number("max_len_m");
    if (j.contains("azimuth_deg")) w.azimuth_deg = number("azimuth_deg");
    truth.whorls.push_back(w);
  }
  return truth;
}

inline std::filesystem::path truth_path_for(const std::filesystem::path& dir, const std::string& tree_id) {
  return dir / (tree_id + "_truth.json");
}

inline SynthGroundTruth read_truth(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  return truth_from_json(j);
}

struct WrittenTree {
  std::filesystem::path cloud;
  std::filesystem::path truth;
};

/// Writes <tree_id>.xyz and <tree_id>_truth.json into `dir`.
inline WrittenTree write_tree(const TreeCloud& cloud, const SynthGroundTruth& truth, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  WrittenTree out{dir / (cloud.tree_id + ".xyz"), truth_path_for(dir, cloud.tree_id)};
  io::write_ascii_xyz(out.cloud, cloud.points);
  io::write_file_text(out.truth, truth_to_json(truth).dump(2) + "\n");
  return out;
}

}  // namespace whorl
