#include "find3d/spatial_grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace find3d {

SpatialGrid::SpatialGrid(std::span<const Vec3> points, double cell_size)
    : points_(points.begin(), points.end()), cell_size_(cell_size) {
  if (!(cell_size > 0.0)) throw std::invalid_argument("SpatialGrid: cell size must be positive");
  for (std::uint32_t i = 0; i < points_.size(); ++i) {
    const Cell c = cell_of(points_[i]);
    if (i == 0) {
      lo_ = hi_ = c;
    } else {
      lo_ = {std::min(lo_.x, c.x), std::min(lo_.y, c.y), std::min(lo_.z, c.z)};
      hi_ = {std::max(hi_.x, c.x), std::max(hi_.y, c.y), std::max(hi_.z, c.z)};
    }
    cells_[key_of(c)].push_back(i);
  }
}

SpatialGrid::Cell SpatialGrid::cell_of(const Vec3& p) const {
  return {static_cast<std::int64_t>(std::floor(p.x() / cell_size_)),
          static_cast<std::int64_t>(std::floor(p.y() / cell_size_)),
          static_cast<std::int64_t>(std::floor(p.z() / cell_size_))};
}

SpatialGrid::CellKey SpatialGrid::key_of(const Cell& c) {
  constexpr std::int64_t kOffset = 1 << 20;
  const auto u = [](std::int64_t v) { return static_cast<std::uint64_t>(v + kOffset) & 0x1fffff; };
  return u(c.x) | (u(c.y) << 21) | (u(c.z) << 42);
}

std::optional<std::uint32_t> SpatialGrid::nearest(const Vec3& query) const {
  if (points_.empty()) return std::nullopt;
  const Cell q = cell_of(query);

  // Rings beyond this radius cannot add cells that exist.
  const std::int64_t max_ring = std::max({std::abs(q.x - lo_.x), std::abs(q.x - hi_.x),
                                          std::abs(q.y - lo_.y), std::abs(q.y - hi_.y),
                                          std::abs(q.z - lo_.z), std::abs(q.z - hi_.z)});

  double best_d2 = std::numeric_limits<double>::infinity();
  std::uint32_t best = 0;
  bool found = false;

  const auto visit = [&](const Cell& c) {
    auto it = cells_.find(key_of(c));
    if (it == cells_.end()) return;
    for (std::uint32_t idx : it->second) {
      const double d2 = (points_[idx] - query).squaredNorm();
      if (d2 < best_d2 || (d2 == best_d2 && idx < best)) {
        best_d2 = d2;
        best = idx;
        found = true;
      }
    }
  };

  for (std::int64_t r = 0; r <= max_ring; ++r) {
    for (std::int64_t dx = -r; dx <= r; ++dx) {
      for (std::int64_t dy = -r; dy <= r; ++dy) {
        for (std::int64_t dz = -r; dz <= r; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
          visit({q.x + dx, q.y + dy, q.z + dz});
        }
      }
    }
    // Every point within r * cell_size of the query has been seen. A tie at
    // exactly that distance may still sit in the next ring, so require strict.
    if (found) {
      const double covered = static_cast<double>(r) * cell_size_;
      if (best_d2 < covered * covered) break;
    }
  }
  return best;
}

}  // namespace find3d
