#include "find3d/sfc.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace find3d::sfc {

std::string_view to_string(Scheme s) {
  switch (s) {
    case Scheme::Z: return "z";
    case Scheme::TransZ: return "z-trans";
    case Scheme::Hilbert: return "hilbert";
    case Scheme::TransHilbert: return "hilbert-trans";
  }
  return "?";
}

Scheme parse_scheme(std::string_view name) {
  for (Scheme s : {Scheme::Z, Scheme::TransZ, Scheme::Hilbert, Scheme::TransHilbert}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown serialization scheme '" + std::string(name) + "'");
}

namespace {

void check_args(std::uint32_t x, std::uint32_t y, std::uint32_t z, unsigned bits) {
  if (bits < 1 || bits > kMaxBits) throw std::out_of_range("curve bit depth must be in [1, 21]");
  const std::uint64_t limit = 1ULL << bits;
  if (x >= limit || y >= limit || z >= limit) {
    throw std::out_of_range("grid index (" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z) +
                            ") exceeds 2^" + std::to_string(bits));
  }
}

// Spreads the low 21 bits of v so bit i lands at bit 3i.
std::uint64_t spread3(std::uint64_t v) {
  v &= 0x1fffff;
  v = (v | (v << 32)) & 0x1f00000000ffffULL;
  v = (v | (v << 16)) & 0x1f0000ff0000ffULL;
  v = (v | (v << 8)) & 0x100f00f00f00f00fULL;
  v = (v | (v << 4)) & 0x10c30c30c30c30c3ULL;
  v = (v | (v << 2)) & 0x1249249249249249ULL;
  return v;
}

std::uint32_t compact3(std::uint64_t v) {
  v &= 0x1249249249249249ULL;
  v = (v ^ (v >> 2)) & 0x10c30c30c30c30c3ULL;
  v = (v ^ (v >> 4)) & 0x100f00f00f00f00fULL;
  v = (v ^ (v >> 8)) & 0x1f0000ff0000ffULL;
  v = (v ^ (v >> 16)) & 0x1f00000000ffffULL;
  v = (v ^ (v >> 32)) & 0x1fffff;
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, unsigned bits) {
  check_args(x, y, z, bits);
  return spread3(x) | (spread3(y) << 1) | (spread3(z) << 2);
}

std::array<std::uint32_t, 3> morton_decode(std::uint64_t code, unsigned bits) {
  if (bits < 1 || bits > kMaxBits || (bits < kMaxBits && code >> (3 * bits)) != 0) {
    throw std::out_of_range("morton code out of range");
  }
  return {compact3(code), compact3(code >> 1), compact3(code >> 2)};
}

std::uint64_t hilbert_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, unsigned bits) {
  check_args(x, y, z, bits);
  std::array<std::uint32_t, 3> v{x, y, z};
  const std::uint32_t top = 1U << (bits - 1);

  // Inverse undo of the excess work.
  for (std::uint32_t q = top; q > 1; q >>= 1) {
    const std::uint32_t p = q - 1;
    for (auto& vi : v) {
      if (vi & q) {
        v[0] ^= p;
      } else {
        const std::uint32_t t = (v[0] ^ vi) & p;
        v[0] ^= t;
        vi ^= t;
      }
    }
  }
  // Gray encode.
  v[1] ^= v[0];
  v[2] ^= v[1];
  std::uint32_t t = 0;
  for (std::uint32_t q = top; q > 1; q >>= 1) {
    if (v[2] & q) t ^= q - 1;
  }
  for (auto& vi : v) vi ^= t;

  // Transposed form -> code, v[0] most significant within each triple.
  return (spread3(v[0]) << 2) | (spread3(v[1]) << 1) | spread3(v[2]);
}

std::array<std::uint32_t, 3> hilbert_decode(std::uint64_t code, unsigned bits) {
  if (bits < 1 || bits > kMaxBits || (bits < kMaxBits && code >> (3 * bits)) != 0) {
    throw std::out_of_range("hilbert code out of range");
  }
  std::array<std::uint32_t, 3> v{compact3(code >> 2), compact3(code >> 1), compact3(code)};
  const std::uint32_t n = 2U << (bits - 1);

  // Gray decode.
  std::uint32_t t = v[2] >> 1;
  v[2] ^= v[1];
  v[1] ^= v[0];
  v[0] ^= t;
  // Undo excess work.
  for (std::uint32_t q = 2; q != n; q <<= 1) {
    const std::uint32_t p = q - 1;
    for (int i = 2; i >= 0; --i) {
      if (v[i] & q) {
        v[0] ^= p;
      } else {
        t = (v[0] ^ v[i]) & p;
        v[0] ^= t;
        v[i] ^= t;
      }
    }
  }
  return v;
}

std::uint64_t encode(Scheme scheme, const GridCoord& c, unsigned bits) {
  switch (scheme) {
    case Scheme::Z: return morton_encode(c.x, c.y, c.z, bits);
    case Scheme::TransZ: return morton_encode(c.y, c.x, c.z, bits);
    case Scheme::Hilbert: return hilbert_encode(c.x, c.y, c.z, bits);
    case Scheme::TransHilbert: return hilbert_encode(c.y, c.x, c.z, bits);
  }
  return 0;
}

unsigned bits_for_voxel_size(double voxel_size) {
  if (!(voxel_size > 0.0)) throw std::invalid_argument("voxel size must be positive");
  const double b = std::ceil(std::log2(1.0 / voxel_size)) + 1.0;
  return static_cast<unsigned>(std::clamp(b, 1.0, static_cast<double>(kMaxBits)));
}

unsigned bits_for_grid(std::span<const GridCoord> grid, unsigned min_bits) {
  std::uint32_t hi = 0;
  for (const auto& c : grid) hi = std::max({hi, c.x, c.y, c.z});
  const auto needed = static_cast<unsigned>(std::bit_width(hi));
  return std::clamp(std::max(min_bits, needed), 1U, kMaxBits);
}

BlockBounds block_partition(std::size_t len, std::size_t block_size) {
  if (block_size == 0) throw std::invalid_argument("block size must be at least 1");
  BlockBounds out;
  out.reserve((len + block_size - 1) / block_size);
  for (std::size_t start = 0; start < len; start += block_size) {
    out.emplace_back(start, std::min(len, start + block_size));
  }
  return out;
}

std::vector<std::uint32_t> SerialOrder::inverse() const {
  std::vector<std::uint32_t> inv(permutation.size());
  for (std::uint32_t pos = 0; pos < permutation.size(); ++pos) inv[permutation[pos]] = pos;
  return inv;
}

SerialOrder serialize_grid(std::span<const GridCoord> grid, Scheme scheme, unsigned bits, std::size_t block_size) {
  std::vector<std::uint64_t> codes(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) codes[i] = encode(scheme, grid[i], bits);

  SerialOrder out;
  out.permutation.resize(grid.size());
  std::iota(out.permutation.begin(), out.permutation.end(), 0U);
  std::stable_sort(out.permutation.begin(), out.permutation.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return codes[a] < codes[b]; });
  out.codes.reserve(grid.size());
  for (std::uint32_t slot : out.permutation) out.codes.push_back(codes[slot]);
  out.blocks = block_partition(grid.size(), block_size);
  return out;
}

SerialOrder serialize(const SampleResult& sample, Scheme scheme, std::size_t block_size) {
  const unsigned bits = bits_for_grid(sample.grid, bits_for_voxel_size(sample.voxel_size));
  SerialOrder order = serialize_grid(sample.grid, scheme, bits, block_size);
  // One point per voxel means codes are unique.
  for (std::size_t i = 1; i < order.codes.size(); ++i) {
    if (order.codes[i] == order.codes[i - 1]) throw std::logic_error("serialize: duplicate voxel code");
  }
  return order;
}

}  // namespace find3d::sfc
