#pragma once

#include "find3d/cloud.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

namespace find3d {

// Uniform grid over a fixed point set for exact nearest-neighbor queries.
// Cells are cubes of edge `cell_size`; the search scans growing Chebyshev
// rings of cells and stops once the best candidate is provably closest.
class SpatialGrid {
 public:
  SpatialGrid(std::span<const Vec3> points, double cell_size);

  /// Index of the nearest point. Ties go to the lowest index.
  std::optional<std::uint32_t> nearest(const Vec3& query) const;

  std::size_t size() const { return points_.size(); }

 private:
  using CellKey = std::uint64_t;
  struct Cell {
    std::int64_t x, y, z;
  };

  Cell cell_of(const Vec3& p) const;
  static CellKey key_of(const Cell& c);

  std::vector<Vec3> points_;
  double cell_size_;
  Cell lo_{}, hi_{};
  std::unordered_map<CellKey, std::vector<std::uint32_t>> cells_;
};

}  // namespace find3d
