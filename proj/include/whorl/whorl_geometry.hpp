#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>

#include "whorl/types.hpp"

namespace whorl {

/// Angle at vertex `p2` between the rays to `p1` and `p3`, in degrees within
/// [0, 180]. Absent when either ray has zero length.
inline std::optional<double> calculate_angle_at_p2(PlanePoint p1, PlanePoint p2, PlanePoint p3) {
  const double ax = p1.x - p2.x, az = p1.z - p2.z;
  const double bx = p3.x - p2.x, bz = p3.z - p2.z;
  const double na = std::hypot(ax, az);
  const double nb = std::hypot(bx, bz);
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  const double cosine = std::clamp((ax * bx + az * bz) / (na * nb), -1.0, 1.0);
  return std::acos(cosine) * 180.0 / std::numbers::pi;
}

/// Longer of the two branch lengths from the whorl centre `p2`.
inline double calculate_distance(PlanePoint p2, PlanePoint tip1, PlanePoint tip3) {
  return std::max(distance(tip1, p2), distance(tip3, p2));
}

}  // namespace whorl
