#pragma once

#include "find3d/cloud.hpp"
#include "find3d/rng.hpp"

#include <cstdint>

namespace find3d::testing {

inline Point make_point(double x, double y, double z) {
  Point p;
  p.position = {x, y, z};
  p.normal = {0.0, 0.0, 1.0};
  p.color = {0.5, 0.5, 0.5};
  return p;
}

/// Random points with unit normals and colors in [0,1].
inline PointCloud random_cloud(std::size_t n, std::uint64_t seed, double half_extent = 0.5) {
  Rng rng(seed);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    Point p;
    p.position = {rng.uniform(-half_extent, half_extent), rng.uniform(-half_extent, half_extent),
                  rng.uniform(-half_extent, half_extent)};
    p.normal = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    p.color = {rng.uniform(), rng.uniform(), rng.uniform()};
    c.points.push_back(p);
  }
  return c;
}

}  // namespace find3d::testing
