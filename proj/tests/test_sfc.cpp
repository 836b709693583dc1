#include "find3d/sfc.hpp"
#include "test_helpers.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <vector>

using namespace find3d;
using namespace find3d::sfc;

namespace {

// Bit-by-bit interleave, written independently of the magic-mask version.
std::uint64_t interleave_oracle(std::uint32_t x, std::uint32_t y, std::uint32_t z, unsigned bits) {
  std::uint64_t code = 0;
  for (unsigned b = 0; b < bits; ++b) {
    code |= static_cast<std::uint64_t>((x >> b) & 1U) << (3 * b);
    code |= static_cast<std::uint64_t>((y >> b) & 1U) << (3 * b + 1);
    code |= static_cast<std::uint64_t>((z >> b) & 1U) << (3 * b + 2);
  }
  return code;
}

// Literal transcription of Skilling's AxestoTranspose on an n-dim array,
// followed by bit-by-bit extraction of the transposed index.
std::uint64_t hilbert_oracle(std::uint32_t x, std::uint32_t y, std::uint32_t z, unsigned bits) {
  const int n = 3;
  std::uint32_t X[3] = {x, y, z};
  const std::uint32_t M = 1U << (bits - 1);
  for (std::uint32_t Q = M; Q > 1; Q >>= 1) {
    const std::uint32_t P = Q - 1;
    for (int i = 0; i < n; i++) {
      if (X[i] & Q) {
        X[0] ^= P;
      } else {
        const std::uint32_t t = (X[0] ^ X[i]) & P;
        X[0] ^= t;
        X[i] ^= t;
      }
    }
  }
  for (int i = 1; i < n; i++) X[i] ^= X[i - 1];
  std::uint32_t t = 0;
  for (std::uint32_t Q = M; Q > 1; Q >>= 1) {
    if (X[n - 1] & Q) t ^= Q - 1;
  }
  for (int i = 0; i < n; i++) X[i] ^= t;

  std::uint64_t code = 0;
  for (int b = static_cast<int>(bits) - 1; b >= 0; --b) {
    for (int i = 0; i < n; i++) code = (code << 1) | ((X[i] >> b) & 1U);
  }
  return code;
}

int manhattan(const std::array<std::uint32_t, 3>& a, const std::array<std::uint32_t, 3>& b) {
  int d = 0;
  for (int i = 0; i < 3; ++i) d += std::abs(static_cast<int>(a[i]) - static_cast<int>(b[i]));
  return d;
}

}  // namespace

TEST_CASE("morton_encode examples") {
  CHECK(morton_encode(0, 0, 0, 1) == 0);
  CHECK(morton_encode(0, 0, 0, 21) == 0);
  CHECK(morton_encode(1, 1, 1, 1) == 7);
  CHECK(morton_encode(1, 0, 0, 1) == 1);
  CHECK(morton_encode(0, 0, 1, 1) == 4);
  CHECK_THROWS_AS(morton_encode(2, 0, 0, 1), std::out_of_range);
  CHECK_THROWS_AS(morton_encode(0, 0, 0, 22), std::out_of_range);
  const std::uint32_t top = (1U << 21) - 1;
  CHECK(morton_encode(top, top, top, 21) == (1ULL << 63) - 1);
}

TEST_CASE("morton bits=2 matches the interleave oracle over all 64 cells") {
  for (std::uint32_t x = 0; x < 4; ++x)
    for (std::uint32_t y = 0; y < 4; ++y)
      for (std::uint32_t z = 0; z < 4; ++z) {
        const auto code = morton_encode(x, y, z, 2);
        CHECK(code == interleave_oracle(x, y, z, 2));
        CHECK(morton_decode(code, 2) == std::array<std::uint32_t, 3>{x, y, z});
      }
}

TEST_CASE("hilbert_encode matches the transpose oracle") {
  for (unsigned bits = 1; bits <= 4; ++bits) {
    const std::uint32_t side = 1U << bits;
    for (std::uint32_t x = 0; x < side; ++x)
      for (std::uint32_t y = 0; y < side; ++y)
        for (std::uint32_t z = 0; z < side; ++z) REQUIRE(hilbert_encode(x, y, z, bits) == hilbert_oracle(x, y, z, bits));
  }
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    const auto x = static_cast<std::uint32_t>(rng.below(1U << 21));
    const auto y = static_cast<std::uint32_t>(rng.below(1U << 21));
    const auto z = static_cast<std::uint32_t>(rng.below(1U << 21));
    REQUIRE(hilbert_encode(x, y, z, 21) == hilbert_oracle(x, y, z, 21));
    REQUIRE(hilbert_decode(hilbert_encode(x, y, z, 21), 21) == std::array<std::uint32_t, 3>{x, y, z});
  }
}

TEST_CASE("hilbert examples") {
  for (unsigned bits = 1; bits <= 21; ++bits) CHECK(hilbert_encode(0, 0, 0, bits) == 0);
  std::set<std::uint64_t> codes;
  for (std::uint32_t c = 0; c < 8; ++c) codes.insert(hilbert_encode(c & 1, (c >> 1) & 1, c >> 2, 1));
  CHECK(codes == std::set<std::uint64_t>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK_THROWS_AS(hilbert_encode(0, 4, 0, 2), std::out_of_range);
  for (std::uint64_t k = 0; k + 1 < 512; ++k) {
    REQUIRE(manhattan(hilbert_decode(k, 3), hilbert_decode(k + 1, 3)) == 1);
  }
}

TEST_CASE("hilbert curve is recursively octant-nested") {
  // Every aligned run of 8^level consecutive codes fills exactly one aligned
  // sub-cube of side 2^level; this separates a Hilbert curve from an arbitrary
  // Hamiltonian path.
  const unsigned bits = 3;
  for (unsigned level = 1; level < bits; ++level) {
    const std::uint64_t run = 1ULL << (3 * level);
    for (std::uint64_t start = 0; start < (1ULL << (3 * bits)); start += run) {
      std::set<std::array<std::uint32_t, 3>> blocks;
      for (std::uint64_t k = start; k < start + run; ++k) {
        auto c = hilbert_decode(k, bits);
        blocks.insert({c[0] >> level, c[1] >> level, c[2] >> level});
      }
      CHECK(blocks.size() == 1);
    }
  }
}

TEST_CASE("Trans schemes equal base schemes on swapped axes") {
  for (unsigned bits = 1; bits <= 3; ++bits) {
    const std::uint32_t side = 1U << bits;
    for (std::uint32_t x = 0; x < side; ++x)
      for (std::uint32_t y = 0; y < side; ++y)
        for (std::uint32_t z = 0; z < side; ++z) {
          GridCoord c{x, y, z};
          CHECK(encode(Scheme::TransZ, c, bits) == morton_encode(y, x, z, bits));
          CHECK(encode(Scheme::TransHilbert, c, bits) == hilbert_encode(y, x, z, bits));
        }
  }
}

TEST_CASE("bit depth from voxel size") {
  CHECK(bits_for_voxel_size(0.02) == 7);
  CHECK(bits_for_voxel_size(0.5) == 2);
  CHECK(bits_for_voxel_size(1e-9) == 21);
  std::vector<GridCoord> grid{{0, 0, 0}, {200, 3, 1}};
  CHECK(bits_for_grid(grid, 7) == 8);
}

TEST_CASE("block_partition") {
  CHECK(block_partition(2500, 1024) == BlockBounds{{0, 1024}, {1024, 2048}, {2048, 2500}});
  CHECK(block_partition(10, 1024) == BlockBounds{{0, 10}});
  CHECK(block_partition(1024, 1024) == BlockBounds{{0, 1024}});
  CHECK(block_partition(0, 4).empty());
  CHECK_THROWS(block_partition(5, 0));
  for (std::size_t len = 1; len < 50; ++len) {
    for (std::size_t size = 1; size < 12; ++size) {
      auto b = block_partition(len, size);
      CHECK(b.size() == (len + size - 1) / size);
      std::size_t covered = 0;
      for (auto [s, e] : b) {
        CHECK(s == covered);
        CHECK(e - s <= size);
        covered = e;
      }
      CHECK(covered == len);
    }
  }
}

namespace {

SampleResult cube_corners() {
  PointCloud c;
  for (int i = 0; i < 8; ++i) {
    c.points.push_back(testing::make_point(0.5 * (i & 1), 0.5 * ((i >> 1) & 1), 0.5 * (i >> 2)));
  }
  return voxel_sample(c, 0.25);
}

bool is_bijection(const std::vector<std::uint32_t>& perm) {
  std::vector<std::uint32_t> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (std::uint32_t i = 0; i < sorted.size(); ++i)
    if (sorted[i] != i) return false;
  return true;
}

}  // namespace

TEST_CASE("serialize") {
  SUBCASE("single point") {
    PointCloud c;
    c.points = {testing::make_point(0.1, 0.2, 0.3)};
    auto order = serialize(voxel_sample(c, 0.02), Scheme::Hilbert);
    CHECK(order.permutation == std::vector<std::uint32_t>{0});
    CHECK(order.blocks.size() == 1);
  }
  SUBCASE("cube corners under Z and Hilbert") {
    auto s = cube_corners();
    REQUIRE(s.kept.size() == 8);
    auto z = serialize(s, Scheme::Z);
    auto h = serialize(s, Scheme::Hilbert);
    CHECK(is_bijection(z.permutation));
    CHECK(is_bijection(h.permutation));
    CHECK(z.permutation != h.permutation);
    // Corner i sits at grid (2*(i&1), 2*((i>>1)&1), 2*(i>>2)): Morton sorts
    // them in index order.
    CHECK(z.permutation == std::vector<std::uint32_t>{0, 1, 2, 3, 4, 5, 6, 7});
    std::vector<std::uint32_t> expected(8);
    std::iota(expected.begin(), expected.end(), 0U);
    const unsigned bits = bits_for_grid(s.grid, bits_for_voxel_size(0.25));
    std::sort(expected.begin(), expected.end(), [&](auto a, auto b) {
      return hilbert_encode(s.grid[a].x, s.grid[a].y, s.grid[a].z, bits) <
             hilbert_encode(s.grid[b].x, s.grid[b].y, s.grid[b].z, bits);
    });
    CHECK(h.permutation == expected);
    CHECK(std::is_sorted(h.codes.begin(), h.codes.end()));
  }
  SUBCASE("order depends only on the voxel set") {
    auto cloud = normalize(testing::random_cloud(400, 6)).first;
    auto a = voxel_sample(cloud, 0.05);
    PointCloud rev;
    for (auto it = cloud.points.rbegin(); it != cloud.points.rend(); ++it) rev.points.push_back(*it);
    auto b = voxel_sample(rev, 0.05);
    for (Scheme scheme : {Scheme::Z, Scheme::TransZ, Scheme::Hilbert, Scheme::TransHilbert}) {
      auto oa = serialize(a, scheme, 64);
      auto ob = serialize(b, scheme, 64);
      CHECK(oa.codes == ob.codes);
      CHECK(oa.blocks == ob.blocks);
    }
  }
}

TEST_CASE("reorder") {
  auto cloud = normalize(testing::random_cloud(10, 77)).first;
  auto s = voxel_sample(cloud, 0.02);
  REQUIRE(s.kept.size() == 10);
  auto z = serialize(s, Scheme::Z);
  auto h = serialize(s, Scheme::Hilbert);

  // Row r of `in_z` holds point z.permutation[r]; encode the point slot in the row.
  MatrixD in_z(10, 2);
  for (int r = 0; r < 10; ++r) {
    in_z(r, 0) = z.permutation[r];
    in_z(r, 1) = 100.0 + z.permutation[r];
  }
  CHECK(reorder(in_z, z, z) == in_z);
  MatrixD in_h = reorder(in_z, z, h);
  // Permutation composition oracle: position r under h is the z-position of h.permutation[r].
  for (int r = 0; r < 10; ++r) {
    std::size_t zpos = 0;
    while (z.permutation[zpos] != h.permutation[r]) ++zpos;
    CHECK(in_h.row(r) == in_z.row(static_cast<Eigen::Index>(zpos)));
  }
  CHECK(reorder(in_h, h, z) == in_z);
}
