#include "find3d/net.hpp"
#include "test_helpers.hpp"

#include <doctest.h>

#include <algorithm>
#include <map>
#include <numeric>

using namespace find3d;
using namespace find3d::net;
using find3d::testing::make_point;
using find3d::testing::random_cloud;

namespace {

MatrixD random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  MatrixD m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
  return m;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.widths = {8, 8};
  c.heads = {2, 2};
  c.block_size = 16;
  c.head_hidden = 8;
  c.out_dim = 4;
  c.voxel_size = 0.05;
  return c;
}

// A cloud with at most one point per 0.05 voxel.
PointCloud sparse_cloud(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  PointCloud c;
  std::vector<std::array<int, 3>> cells;
  while (c.size() < n) {
    std::array<int, 3> cell{static_cast<int>(rng.below(20)), static_cast<int>(rng.below(20)),
                            static_cast<int>(rng.below(20))};
    if (std::find(cells.begin(), cells.end(), cell) != cells.end()) continue;
    cells.push_back(cell);
    Point p = make_point(-0.5 + 0.05 * cell[0] + 0.025, -0.5 + 0.05 * cell[1] + 0.025, -0.5 + 0.05 * cell[2] + 0.025);
    p.normal = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    p.color = {rng.uniform(), rng.uniform(), rng.uniform()};
    c.points.push_back(p);
  }
  return c;
}

}  // namespace

TEST_CASE("embed_points") {
  ad::Tape<double> t;
  const MatrixD x = random_matrix(3, 9, 1);
  SUBCASE("zero weights give zeros") {
    ParamVars p{{"embed.weight", t.constant(MatrixD::Zero(9, 5))}, {"embed.bias", t.constant(MatrixD::Zero(1, 5))}};
    CHECK(t.value(embed_points(t, t.constant(x), p)).isZero());
  }
  SUBCASE("identity weights pass inputs through") {
    ParamVars p{{"embed.weight", t.constant(MatrixD::Identity(9, 9))}, {"embed.bias", t.constant(MatrixD::Zero(1, 9))}};
    CHECK(t.value(embed_points(t, t.constant(x), p)) == x);
  }
  SUBCASE("random weights match a triple-loop matmul") {
    const MatrixD w = random_matrix(9, 4, 2), b = random_matrix(1, 4, 3);
    ParamVars p{{"embed.weight", t.constant(w)}, {"embed.bias", t.constant(b)}};
    const MatrixD out = t.value(embed_points(t, t.constant(x), p));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) {
        double acc = b(0, j);
        for (int k = 0; k < 9; ++k) acc += x(i, k) * w(k, j);
        CHECK(out(i, j) == doctest::Approx(acc).epsilon(1e-12));
      }
  }
}

TEST_CASE("cond_pos_encode") {
  ModelConfig cfg = tiny_config();
  SUBCASE("isolated point sees only itself") {
    PointCloud c;
    c.points = {make_point(0.01, 0.01, 0.01)};
    Geometry geo = build_geometry(c, cfg);
    ad::Tape<double> t;
    const MatrixD f = random_matrix(1, 3, 4), w = random_matrix(3, 3, 5), b = random_matrix(1, 3, 6);
    ParamVars p{{"cpe.weight", t.constant(w)}, {"cpe.bias", t.constant(b)}};
    const MatrixD out = t.value(cond_pos_encode(t, t.constant(f), geo, p));
    CHECK((out - (f + f * w + b)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("zero weights are the identity") {
    Geometry geo = build_geometry(sparse_cloud(30, 2), cfg);
    ad::Tape<double> t;
    const MatrixD f = random_matrix(30, 3, 7);
    ParamVars p{{"cpe.weight", t.constant(MatrixD::Zero(3, 3))}, {"cpe.bias", t.constant(MatrixD::Zero(1, 3))}};
    CHECK(t.value(cond_pos_encode(t, t.constant(f), geo, p)) == f);
  }
  SUBCASE("neighbor averaging matches an O(N^2) scan") {
    PointCloud c;
    c.points = {make_point(0.01, 0.01, 0.01), make_point(0.06, 0.01, 0.01), make_point(0.31, 0.01, 0.01),
                make_point(0.11, 0.06, 0.06)};
    Geometry geo = build_geometry(c, cfg);
    const auto& grid = geo.levels[0].grid;
    ad::Tape<double> t;
    const MatrixD f = random_matrix(4, 2, 8);
    ParamVars p{{"cpe.weight", t.constant(MatrixD::Identity(2, 2))}, {"cpe.bias", t.constant(MatrixD::Zero(1, 2))}};
    const MatrixD out = t.value(cond_pos_encode(t, t.constant(f), geo, p));
    for (int i = 0; i < 4; ++i) {
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(2);
      int count = 0;
      for (int j = 0; j < 4; ++j) {
        const auto d = [](std::uint32_t a, std::uint32_t b) { return std::abs(static_cast<int>(a) - static_cast<int>(b)); };
        if (std::max({d(grid[i].x, grid[j].x), d(grid[i].y, grid[j].y), d(grid[i].z, grid[j].z)}) <= 1) {
          mean += f.row(j);
          ++count;
        }
      }
      CHECK(((f.row(i) + mean / count) - out.row(i)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("grid_pool and grid_unpool") {
  std::vector<GridCoord> grid{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 1, 1}};
  std::vector<Vec3> pos{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 1, 1}};
  const MatrixD f = random_matrix(4, 3, 9);
  const MatrixD w = random_matrix(3, 2, 10), b = random_matrix(1, 2, 11);

  const auto pool_with = [&](const PoolTrace& trace) {
    ad::SparseRows m;
    m.cols = 4;
    std::vector<std::vector<std::uint32_t>> kids(trace.coarse_keys.size());
    for (std::uint32_t i = 0; i < 4; ++i) kids[trace.parent[i]].push_back(i);
    for (auto& k : kids) m.add_mean_row(k);
    ad::Tape<double> t;
    ParamVars p{{"pool.weight", t.constant(w)}, {"pool.bias", t.constant(b)}};
    return MatrixD(t.value(grid_pool(t, t.constant(f), std::make_shared<const ad::SparseRows>(m), "pool", p)));
  };

  SUBCASE("stride 1 keeps every point") {
    auto trace = pool_trace(grid, pos, 1);
    CHECK(trace.coarse_keys.size() == 4);
    CHECK((pool_with(trace) - ((f * w).rowwise() + b.row(0))).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("one parent voxel") {
    auto trace = pool_trace(grid, pos, 8);
    REQUIRE(trace.coarse_keys.size() == 1);
    CHECK((pool_with(trace) - (f.colwise().mean() * w + b)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(trace.coarse_positions[0].isApprox(Vec3(1.5, 0.25, 0.25)));
  }
  SUBCASE("two parents match a hash group-by") {
    auto trace = pool_trace(grid, pos, 2);
    REQUIRE(trace.coarse_keys.size() == 2);
    std::map<std::uint64_t, std::vector<int>> groups;
    for (int i = 0; i < 4; ++i) groups[pack_voxel_key({grid[i].x / 2, grid[i].y / 2, grid[i].z / 2})].push_back(i);
    const MatrixD pooled = pool_with(trace);
    int row = 0;
    for (auto& [key, members] : groups) {
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(3);
      for (int m : members) mean += f.row(m);
      mean /= static_cast<double>(members.size());
      CHECK(trace.coarse_keys[row] == key);
      CHECK(((mean * w + b) - pooled.row(row)).cwiseAbs().maxCoeff() < 1e-12);
      ++row;
    }
  }
  SUBCASE("unpool shape and zero skip weights") {
    auto trace = pool_trace(grid, pos, 2);
    auto unpool = std::make_shared<const ad::SparseRows>(ad::SparseRows::gather(trace.parent, 2));
    ad::Tape<double> t;
    const MatrixD coarse = random_matrix(2, 2, 12), skip = random_matrix(4, 3, 13);
    const MatrixD up = random_matrix(2, 3, 14);
    ParamVars p{{"u.up.weight", t.constant(up)},
                {"u.up.bias", t.constant(MatrixD::Zero(1, 3))},
                {"u.skip.weight", t.constant(MatrixD::Zero(3, 3))},
                {"u.skip.bias", t.constant(MatrixD::Zero(1, 3))}};
    const MatrixD out = t.value(grid_unpool(t, t.constant(coarse), t.constant(skip), unpool, "u", p));
    REQUIRE(out.rows() == 4);
    for (int i = 0; i < 4; ++i) CHECK((out.row(i) - coarse.row(trace.parent[i]) * up).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("two-level trace composition") {
    auto t1 = pool_trace(grid, pos, 2);
    auto t2 = pool_trace(t1.coarse_grid, t1.coarse_positions, 2);
    auto direct = pool_trace(grid, pos, 4);
    REQUIRE(t2.coarse_keys.size() == direct.coarse_keys.size());
    for (int i = 0; i < 4; ++i) CHECK(t2.parent[t1.parent[i]] == direct.parent[i]);
  }
}

TEST_CASE("forward contract") {
  ModelConfig cfg = tiny_config();
  const ModelState state = init_model(cfg);
  const PointCloud cloud = sparse_cloud(60, 3);

  SUBCASE("shape and determinism") {
    const MatrixF a = forward(cloud, state);
    CHECK(a.rows() == 60);
    CHECK(a.cols() == cfg.out_dim);
    CHECK(a.allFinite());
    ModelState copy = state;
    CHECK(forward(cloud, copy) == a);
  }
  SUBCASE("permuting inputs permutes outputs") {
    std::vector<std::uint32_t> perm(cloud.size());
    std::iota(perm.begin(), perm.end(), 0U);
    Rng rng(5);
    rng.shuffle(perm.begin(), perm.end());
    PointCloud shuffled;
    for (auto i : perm) shuffled.points.push_back(cloud.points[i]);
    const MatrixF a = forward(cloud, state);
    const MatrixF b = forward(shuffled, state);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(b.row(static_cast<Eigen::Index>(i)) == a.row(perm[i]));
  }
  SUBCASE("empty cloud") { CHECK_THROWS(forward(PointCloud{}, state)); }
  SUBCASE("random inputs in [-1,1] stay finite under the default config") {
    const ModelState def = init_model(ModelConfig{});
    PointCloud big = random_cloud(3000, 8, 1.0);
    CHECK(forward(normalize(big).first, def).allFinite());
  }
}

TEST_CASE("pre-norm layers with zero attention and MLP weights are the identity") {
  ModelConfig cfg = tiny_config();
  ModelState state = init_model(cfg);
  for (auto& [name, t] : state.params) {
    if (name.find(".attn.") != std::string::npos || name.find(".ffn.") != std::string::npos) t.value.setZero();
  }
  Geometry geo = build_geometry(sparse_cloud(40, 4), cfg);
  ad::Tape<double> t;
  const ParamVars p = bind_params(t, state.params, false);
  const MatrixD x = random_matrix(40, 8, 15);
  const auto plan = layer_plan(cfg);
  const auto order = geo.levels[0].orders.at(plan[0].scheme);
  CHECK(t.value(transformer_layer(t, t.constant(x), order, 2, plan[0].prefix, p)) == x);
}

TEST_CASE("parameters and configuration") {
  ModelConfig cfg;
  const auto state = init_model(cfg);
  CHECK(state.all_finite());
  CHECK(state.parameter_count() == [&] {
    std::size_t n = 0;
    for (auto& [k, s] : parameter_shapes(cfg)) n += s.numel();
    return n;
  }());
  CHECK(state.parameter_count() < 1'000'000);
  CHECK(init_model(cfg).params.at("enc0.layer0.attn.qkv.weight").value ==
        state.params.at("enc0.layer0.attn.qkv.weight").value);
  CHECK(state.params.at("head.fc4.weight").value.cwiseAbs().maxCoeff() < 0.01f);
  CHECK(describe(cfg).find("total parameters") != std::string::npos);

  ModelConfig bad = cfg;
  bad.heads = {3, 2, 2};
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.scheme_cycle.clear();
  CHECK_THROWS(bad.validate());

  const auto plan = layer_plan(cfg);
  REQUIRE(plan.size() == 5);
  CHECK(plan[0].scheme == sfc::Scheme::Z);
  CHECK(plan[1].scheme == sfc::Scheme::TransZ);
  CHECK(plan[2].scheme == sfc::Scheme::Hilbert);
  CHECK(plan[3].scheme == sfc::Scheme::TransHilbert);
  CHECK(plan[4].scheme == sfc::Scheme::Z);
  CHECK(plan[3].level == 1);
  CHECK(plan[4].level == 0);
}
