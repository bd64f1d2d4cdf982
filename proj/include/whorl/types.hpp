#pragma once

#include <cmath>

namespace whorl {

/// A 3D point in meters.
struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const Point3&, const Point3&) = default;
};

/// A point in the vertical section plane of one view: horizontal image axis
/// `x` and height `z`, both in meters.
struct PlanePoint {
  double x = 0.0;
  double z = 0.0;

  friend bool operator==(const PlanePoint&, const PlanePoint&) = default;
};

inline bool is_finite(const Point3& p) {
  return std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z);
}

inline double distance(const PlanePoint& a, const PlanePoint& b) {
  return std::hypot(a.x - b.x, a.z - b.z);
}

}  // namespace whorl
