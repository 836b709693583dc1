#pragma once

#include "find3d/cloud.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace find3d::sfc {

enum class Scheme { Z, TransZ, Hilbert, TransHilbert };

std::string_view to_string(Scheme s);
Scheme parse_scheme(std::string_view name);

inline constexpr unsigned kMaxBits = 21;
inline constexpr std::size_t kDefaultBlockSize = 1024;

/// Interleaves the low `bits` bits of each index, x least significant in
/// every triple. Throws std::out_of_range for an index >= 2^bits.
std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, unsigned bits);
std::array<std::uint32_t, 3> morton_decode(std::uint64_t code, unsigned bits);

/// Position of cell (x, y, z) along the 3D Hilbert curve of side 2^bits,
/// computed with Skilling's transpose method. The curve starts at the origin.
std::uint64_t hilbert_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, unsigned bits);
std::array<std::uint32_t, 3> hilbert_decode(std::uint64_t code, unsigned bits);

/// Code of a grid cell under a scheme. Trans variants swap x and y first.
std::uint64_t encode(Scheme scheme, const GridCoord& c, unsigned bits);

/// ceil(log2(1 / voxel_size)) + 1, clamped to [1, kMaxBits].
unsigned bits_for_voxel_size(double voxel_size);

/// Smallest bit depth that holds every coordinate, never below `min_bits`.
unsigned bits_for_grid(std::span<const GridCoord> grid, unsigned min_bits);

using BlockBounds = std::vector<std::pair<std::size_t, std::size_t>>;

/// ceil(len / block_size) half-open ranges; the last holds the remainder.
BlockBounds block_partition(std::size_t len, std::size_t block_size);

struct SerialOrder {
  std::vector<std::uint32_t> permutation;  // sequence position -> point slot
  std::vector<std::uint64_t> codes;        // per sequence position
  BlockBounds blocks;

  std::size_t size() const { return permutation.size(); }
  /// point slot -> sequence position
  std::vector<std::uint32_t> inverse() const;
};

/// Orders grid cells along a curve. Equal codes keep slot order.
SerialOrder serialize_grid(std::span<const GridCoord> grid, Scheme scheme, unsigned bits,
                           std::size_t block_size = kDefaultBlockSize);

SerialOrder serialize(const SampleResult& sample, Scheme scheme, std::size_t block_size = kDefaultBlockSize);

/// Moves rows laid out in `from` sequence order into `to` sequence order.
template <typename Derived>
Matrix<typename Derived::Scalar> reorder(const Eigen::MatrixBase<Derived>& rows, const SerialOrder& from,
                                         const SerialOrder& to) {
  const auto where = from.inverse();
  Matrix<typename Derived::Scalar> out(rows.rows(), rows.cols());
  for (std::size_t pos = 0; pos < to.size(); ++pos) {
    out.row(static_cast<Eigen::Index>(pos)) = rows.row(where[to.permutation[pos]]);
  }
  return out;
}

}  // namespace find3d::sfc
