#include "find3d/autodiff.hpp"
#include "gradcheck.hpp"
#include "test_helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace find3d;
using namespace find3d::ad;
using find3d::testing::check_gradients;
using find3d::sfc::SerialOrder;

namespace {

MatrixD random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  MatrixD m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.uniform(-1.0, 1.0);
  return m;
}

// ||x + w||^2 for a fixed random w, so every entry of x gets a distinct
// upstream gradient.
Var probe(Tape<double>& t, Var x, std::uint64_t seed) {
  const auto& v = t.value(x);
  const Var w = t.constant(random_matrix(v.rows(), v.cols(), seed));
  return sum_squares(t, add(t, x, w));
}

SerialOrder two_block_order(std::size_t n, std::size_t block) {
  SerialOrder o;
  for (std::uint32_t i = 0; i < n; ++i) o.permutation.push_back(static_cast<std::uint32_t>((2 * n + 2 - i) % n));
  o.codes.assign(n, 0);
  o.blocks = sfc::block_partition(n, block);
  return o;
}

}  // namespace

TEST_CASE("quadratic loss has gradient w") {
  Tape<double> t;
  MatrixD w = random_matrix(3, 4, 1);
  Var wv = t.leaf(w, true);
  Var other = t.leaf(random_matrix(2, 2, 2), true);
  Var loss = scale(t, sum_squares(t, wv), 0.5);
  t.backward(loss);
  CHECK((t.grad(wv) - w).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(t.grad(other).isZero());
}

TEST_CASE("per-op gradients match finite differences") {
  SUBCASE("linear + gelu") {
    auto r = check_gradients(
        [](Tape<double>& t, const std::vector<Var>& in) {
          return probe(t, gelu(t, linear(t, in[0], in[1], in[2])), 9);
        },
        {random_matrix(5, 3, 1), random_matrix(3, 4, 2), random_matrix(1, 4, 3)});
    CHECK(r.max_rel_error < 1e-5);
  }
  SUBCASE("layer norm") {
    auto r = check_gradients(
        [](Tape<double>& t, const std::vector<Var>& in) { return probe(t, layer_norm(t, in[0], in[1], in[2]), 4); },
        {random_matrix(4, 6, 5), random_matrix(1, 6, 6), random_matrix(1, 6, 7)});
    CHECK(r.max_rel_error < 1e-5);
  }
  SUBCASE("sparse mix, gather and concat") {
    auto map = std::make_shared<SparseRows>();
    map->cols = 5;
    const std::vector<std::uint32_t> c0{0, 2, 4}, c1{1}, c2{3, 3};
    map->add_mean_row(c0);
    map->add_mean_row(c1);
    const std::vector<double> w2{0.25, 2.0};
    map->add_row(c2, w2);
    auto idx = std::make_shared<const std::vector<std::uint32_t>>(std::vector<std::uint32_t>{4, 0, 0, 2});
    auto r = check_gradients(
        [&](Tape<double>& t, const std::vector<Var>& in) {
          const Var a = sparse_mix(t, in[0], map);
          const Var b = gather_rows(t, in[0], idx);
          const std::vector<Var> parts{a, b};
          return probe(t, concat_rows(t, std::span<const Var>(parts)), 11);
        },
        {random_matrix(5, 3, 8)});
    CHECK(r.max_rel_error < 1e-5);
  }
  SUBCASE("normalize rows") {
    auto r = check_gradients(
        [](Tape<double>& t, const std::vector<Var>& in) { return probe(t, normalize_rows(t, in[0]), 12); },
        {random_matrix(4, 5, 13)});
    CHECK(r.max_rel_error < 1e-5);
  }
  SUBCASE("block attention, two heads, ragged blocks") {
    auto order = std::make_shared<const SerialOrder>(two_block_order(7, 3));
    auto r = check_gradients(
        [&](Tape<double>& t, const std::vector<Var>& in) { return probe(t, block_attention(t, in[0], order, 2), 14); },
        {random_matrix(7, 12, 15)});
    CHECK(r.max_rel_error < 1e-5);
  }
  SUBCASE("contrastive loss") {
    auto targets = std::make_shared<const MatrixD>(random_matrix(4, 3, 16).rowwise().normalized());
    auto r = check_gradients(
        [&](Tape<double>& t, const std::vector<Var>& in) {
          return contrastive_loss(t, normalize_rows(t, in[0]), targets, 0.5);
        },
        {random_matrix(4, 3, 17)});
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("block attention matches a scalar-loop reference on one 4-point block") {
  const MatrixD qkv = random_matrix(4, 9, 21);  // width 3, one head
  SerialOrder o;
  o.permutation = {2, 0, 3, 1};
  o.codes.assign(4, 0);
  o.blocks = sfc::block_partition(4, 4);
  Tape<double> t;
  const MatrixD out = t.value(block_attention(t, t.constant(qkv), std::make_shared<const SerialOrder>(o), 1));

  const double scale = 1.0 / std::sqrt(3.0);
  for (int i = 0; i < 4; ++i) {
    double s[4];
    double mx = -1e300;
    for (int j = 0; j < 4; ++j) {
      s[j] = 0.0;
      for (int c = 0; c < 3; ++c) s[j] += qkv(i, c) * qkv(j, 3 + c);
      s[j] *= scale;
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (double& v : s) z += (v = std::exp(v - mx));
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int j = 0; j < 4; ++j) acc += s[j] / z * qkv(j, 6 + c);
      CHECK(out(i, c) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("block attention edge cases") {
  SUBCASE("single point block returns its value row") {
    SerialOrder o;
    o.permutation = {0};
    o.codes = {0};
    o.blocks = {{0, 1}};
    const MatrixD qkv = random_matrix(1, 6, 3);
    Tape<double> t;
    const MatrixD out = t.value(block_attention(t, t.constant(qkv), std::make_shared<const SerialOrder>(o), 2));
    CHECK((out - qkv.rightCols(2)).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("identical rows give identical outputs") {
    MatrixD qkv = random_matrix(3, 6, 4);
    qkv.row(2) = qkv.row(0);
    auto o = std::make_shared<const SerialOrder>(two_block_order(3, 3));
    Tape<double> t;
    const MatrixD out = t.value(block_attention(t, t.constant(qkv), o, 1));
    CHECK((out.row(0) - out.row(2)).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("zeroing one block leaves other blocks untouched") {
    const std::size_t n = 10;
    auto o = std::make_shared<const SerialOrder>(two_block_order(n, 4));
    MatrixD qkv = random_matrix(n, 12, 5);
    Tape<double> t;
    const MatrixD before = t.value(block_attention(t, t.constant(qkv), o, 2));
    for (std::size_t pos = 4; pos < 8; ++pos) qkv.row(o->permutation[pos]).setZero();
    const MatrixD after = t.value(block_attention(t, t.constant(qkv), o, 2));
    for (std::size_t pos = 0; pos < n; ++pos) {
      if (pos >= 4 && pos < 8) continue;
      CHECK(before.row(o->permutation[pos]) == after.row(o->permutation[pos]));
    }
  }
  SUBCASE("width not divisible by heads") {
    Tape<double> t;
    auto o = std::make_shared<const SerialOrder>(two_block_order(2, 2));
    CHECK_THROWS(block_attention(t, t.constant(random_matrix(2, 9, 1)), o, 2));
  }
}

TEST_CASE("contrastive loss anchors") {
  Tape<double> t;
  SUBCASE("one pair is exactly zero") {
    auto target = std::make_shared<const MatrixD>(MatrixD::Constant(1, 3, 1.0 / std::sqrt(3.0)));
    MatrixD pred(1, 3);
    pred << 0.0, 0.6, 0.8;
    CHECK(t.value(contrastive_loss(t, t.constant(pred), target))(0, 0) == 0.0);
  }
  SUBCASE("two orthonormal pairs predicted exactly") {
    auto target = std::make_shared<const MatrixD>(MatrixD::Identity(2, 2));
    const double loss = t.value(contrastive_loss(t, t.constant(MatrixD::Identity(2, 2)), target))(0, 0);
    CHECK(std::abs(loss - std::log1p(std::exp(-1.0))) < 1e-12);
    CHECK(std::abs(loss - 0.313262) < 1e-6);
  }
  SUBCASE("identical labels give log 2 whatever the predictions") {
    MatrixD lab(2, 3);
    lab << 0.0, 1.0, 0.0, 0.0, 1.0, 0.0;
    auto target = std::make_shared<const MatrixD>(lab);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const MatrixD pred = random_matrix(2, 3, s).rowwise().normalized();
      CHECK(std::abs(t.value(contrastive_loss(t, t.constant(pred), target))(0, 0) - std::numbers::ln2) < 1e-12);
    }
  }
  SUBCASE("length mismatch") {
    auto target = std::make_shared<const MatrixD>(MatrixD::Identity(3, 3));
    CHECK_THROWS(contrastive_loss(t, t.constant(MatrixD::Identity(2, 3)), target));
  }
}

TEST_CASE("raising a mismatched similarity never lowers the contrastive loss") {
  // Orthonormal labels make pred row i's similarity to label j its j-th entry.
  auto target = std::make_shared<const MatrixD>(MatrixD::Identity(3, 3));
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    MatrixD pred = random_matrix(3, 3, 100 + static_cast<std::uint64_t>(trial));
    const auto i = static_cast<Eigen::Index>(rng.below(3));
    auto j = static_cast<Eigen::Index>(rng.below(3));
    if (j == i) j = (j + 1) % 3;
    Tape<double> t;
    const double before = t.value(contrastive_loss(t, t.constant(pred), target))(0, 0);
    pred(i, j) += rng.uniform(0.0, 1.0);
    const double after = t.value(contrastive_loss(t, t.constant(pred), target))(0, 0);
    CHECK(after >= before);
  }
}
