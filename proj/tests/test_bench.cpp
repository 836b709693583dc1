#include "find3d/bench.hpp"
#include "test_helpers.hpp"

#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace find3d;
using namespace find3d::bench;

namespace {

using Labels = std::vector<std::int32_t>;

ObjectScore scored(const std::string& category, double miou) {
  ObjectScore s;
  s.category = category;
  s.miou = miou;
  return s;
}

std::vector<BenchmarkObject> small_dataset(std::size_t n = 10, std::uint64_t seed = 2) {
  SynthConfig c;
  c.n_objects = n;
  c.points_per_part = 80;
  c.seed = seed;
  return synth_dataset(c);
}

}  // namespace

TEST_CASE("part_iou examples") {
  const Labels gt = {0, 0, 1, 1}, pred = {0, 1, 1, 1};
  CHECK(part_iou(pred, gt, 0) == doctest::Approx(0.5));
  CHECK(part_iou(pred, gt, 1) == doctest::Approx(2.0 / 3.0));
  CHECK(part_iou(gt, gt, 0) == 1.0);
  CHECK(part_iou(Labels{1, 1, 0, 0}, gt, 0) == 0.0);
  CHECK(std::isnan(part_iou(pred, gt, 5)));

  SUBCASE("unlabeled ground truth is ignored") {
    CHECK(part_iou(Labels{0, 0, 0}, Labels{0, kUnlabeled, kUnlabeled}, 0) == 1.0);
  }
  SUBCASE("no-label predictions only cost recall") {
    CHECK(part_iou(Labels{query::kNoLabel, 0}, Labels{0, 0}, 0) == 0.5);
  }
  SUBCASE("size mismatch") { CHECK_THROWS_AS(part_iou(Labels{0}, Labels{0, 1}, 0), std::invalid_argument); }
}

TEST_CASE("score_object hand example") {
  BenchmarkObject o;
  o.id = "hand";
  o.category = "hand";
  for (int i = 0; i < 4; ++i) o.cloud.points.push_back(find3d::testing::make_point(i, 0, 0));
  o.part_names = {"A", "B"};
  o.gt = {0, 0, 1, 1};
  const auto s = score_object(o, Labels{0, 1, 1, 1});
  CHECK(std::abs(s.miou - 7.0 / 12.0) < 1e-9);
  CHECK(s.parts == std::vector<std::string>{"A", "B"});

  SUBCASE("parts missing from gt are not averaged") {
    o.part_names.push_back("C");
    CHECK(std::abs(score_object(o, Labels{0, 1, 1, 1}).miou - 7.0 / 12.0) < 1e-9);
  }
}

TEST_CASE("iou properties") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    Labels a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<std::int32_t>(rng.below(4)) - 1;
      b[i] = static_cast<std::int32_t>(rng.below(3));
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    Labels pa(n), pb(n);
    for (std::size_t i = 0; i < n; ++i) {
      pa[i] = a[perm[i]];
      pb[i] = b[perm[i]];
    }
    for (std::int32_t part = 0; part < 3; ++part) {
      const double base = part_iou(b, b, part);
      CHECK((std::isnan(base) || base == 1.0));
      // Symmetric when neither side carries unlabeled points.
      Labels c = a;
      for (auto& v : c) v = std::max(v, 0);
      const double ab = part_iou(c, b, part), ba = part_iou(b, c, part);
      CHECK(((std::isnan(ab) && std::isnan(ba)) || ab == ba));
      const double x = part_iou(a, b, part), y = part_iou(pa, pb, part);
      CHECK(((std::isnan(x) && std::isnan(y)) || x == y));
    }
  }
}

TEST_CASE("class_miou") {
  CHECK(class_miou({scored("x", 1.0)}) == 1.0);
  std::map<std::string, double> per;
  CHECK(class_miou({scored("a", 0.4), scored("b", 0.6), scored("b", 0.8)}, &per) == doctest::Approx(0.55));
  CHECK(per.at("b") == doctest::Approx(0.7));
  CHECK(class_miou({scored("b", 0.8), scored("a", 0.4), scored("b", 0.6)}) ==
        class_miou({scored("a", 0.4), scored("b", 0.6), scored("b", 0.8)}));
  CHECK_THROWS_AS(class_miou({}), std::invalid_argument);
}

TEST_CASE("rotation mode names") {
  CHECK(parse_rotation_mode("rotated") == RotationMode::Rotated);
  CHECK(std::string(to_string(RotationMode::Canonical)) == "canonical");
  CHECK_THROWS_AS(parse_rotation_mode("upside-down"), std::invalid_argument);
}

TEST_CASE("synth_dataset") {
  CHECK(synth_dataset(SynthConfig{.n_objects = 0}).empty());
  const auto a = small_dataset(), b = small_dataset();
  REQUIRE(a.size() == 10);
  std::set<std::string> ids;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto& o = a[k];
    ids.insert(o.id);
    CHECK_NOTHROW(o.validate());
    CHECK(o.part_names.size() >= 2);
    CHECK(o.part_names.size() <= 5);
    const auto& vocab = synth_categories().at(o.category);
    for (const auto& p : o.part_names) CHECK(std::find(vocab.begin(), vocab.end(), p) != vocab.end());
    std::vector<int> counts(o.part_names.size(), 0);
    for (auto g : o.gt) ++counts.at(static_cast<std::size_t>(g));
    for (int c : counts) CHECK(c >= 30);
    // Same seed, same bytes.
    CHECK(o.gt == b[k].gt);
    bool same = o.cloud.size() == b[k].cloud.size();
    for (std::size_t i = 0; same && i < o.cloud.size(); ++i)
      same = o.cloud.points[i].position == b[k].cloud.points[i].position &&
             o.cloud.points[i].color == b[k].cloud.points[i].color;
    CHECK(same);
  }
  CHECK(ids.size() == a.size());
  CHECK(small_dataset(10, 3)[0].cloud.points[0].position != a[0].cloud.points[0].position);
}

TEST_CASE("split_by_object") {
  const auto data = small_dataset(10);
  const auto s = split_by_object(data, 0.2, 7);
  CHECK(s.test.size() == 2);
  CHECK(s.train.size() == 8);
  std::set<std::string> train_ids;
  for (const auto& o : s.train) train_ids.insert(o.id);
  for (const auto& o : s.test) CHECK(train_ids.count(o.id) == 0);
  CHECK(split_by_object(data, 0.2, 7).test[0].id == s.test[0].id);
}

TEST_CASE("evaluate") {
  const auto data = small_dataset(8);
  query::MockEmbedder embedder(16, 0);
  EvalConfig cfg;

  SUBCASE("oracle features score 100%") {
    for (const char* templ : {"{part} of a {object}", "{part}"}) {
      cfg.prompt_template = templ;
      for (auto mode : {RotationMode::Canonical, RotationMode::Rotated}) {
        cfg.rotation = mode;
        const auto r = evaluate(oracle_features(embedder, templ), data, cfg, embedder);
        CHECK(r.overall == 1.0);
      }
    }
  }
  SUBCASE("canonical runs are reproducible") {
    const auto a = report_json(evaluate(constant_features(embedder.embed("x")), data, cfg, embedder));
    const auto b = report_json(evaluate(constant_features(embedder.embed("x")), data, cfg, embedder));
    CHECK(a == b);
  }
  SUBCASE("a geometry-blind predictor ignores rotation") {
    const auto f = constant_features(embedder.embed("leg of a chair"));
    const double canonical = evaluate(f, data, cfg, embedder).overall;
    cfg.rotation = RotationMode::Rotated;
    cfg.seed = 99;
    CHECK(evaluate(f, data, cfg, embedder).overall == canonical);
  }
  SUBCASE("rotated mode actually rotates") {
    cfg.rotation = RotationMode::Rotated;
    bool moved = false;
    const FeatureFn probe = [&](const PointCloud& c, const BenchmarkObject& o) {
      moved = moved || (c.points[0].position - o.cloud.points[0].position).norm() > 1e-6;
      return MatrixF(MatrixF::Zero(static_cast<Eigen::Index>(c.size()), 16));
    };
    evaluate(probe, data, cfg, embedder);
    CHECK(moved);
    CHECK(is_rotation(eval_rotation(1, "a")));
    CHECK(eval_rotation(1, "a") != eval_rotation(1, "b"));
  }
  SUBCASE("prompt overrides") {
    cfg.prompt_overrides[data[0].part_names[0]] = "override";
    CHECK(object_prompts(data[0], cfg)[0] == "override");
  }
  SUBCASE("unknown placeholder fails") {
    cfg.prompt_template = "{colour}";
    CHECK_THROWS_AS(evaluate(constant_features(embedder.embed("x")), data, cfg, embedder), std::invalid_argument);
  }
  SUBCASE("empty dataset") {
    CHECK_THROWS_AS(evaluate(constant_features(embedder.embed("x")), {}, cfg, embedder), std::invalid_argument);
  }
}

TEST_CASE("random baseline and reports") {
  const auto data = small_dataset(10);
  const auto r = random_baseline(data, 1);
  CHECK(r.overall > 0.05);
  CHECK(r.overall < 0.6);
  CHECK(report_json(random_baseline(data, 1)) == report_json(r));

  const auto j = nlohmann::json::parse(report_json(r));
  CHECK(j.at("overall_miou").get<double>() == r.overall);
  const std::string csv = report_csv(r);
  CHECK(csv.rfind("category,object,part,iou\n", 0) == 0);
  std::size_t lines = std::count(csv.begin(), csv.end(), '\n');
  std::size_t parts = 0;
  for (const auto& o : r.objects) parts += o.parts.size();
  CHECK(lines == parts + 1);

  // Per-category mean of objects, overall mean of categories.
  std::map<std::string, std::vector<double>> by_cat;
  for (const auto& o : r.objects) by_cat[o.category].push_back(o.miou);
  double total = 0;
  for (const auto& [cat, v] : by_cat) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    CHECK(r.per_category.at(cat) == doctest::Approx(m));
    total += m;
  }
  CHECK(r.overall == doctest::Approx(total / by_cat.size()));
}

TEST_CASE("search_prompts recovers a planted prompt") {
  const auto data = small_dataset(6);
  std::set<std::string> names;
  for (const auto& o : data) names.insert(o.part_names.begin(), o.part_names.end());
  const std::vector<std::string> parts(names.begin(), names.end());
  const auto axis = [&](const std::string& part) {
    Eigen::VectorXf v = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(parts.size()));
    v(std::find(parts.begin(), parts.end(), part) - parts.begin()) = 1.0f;
    return v;
  };

  // "true <part>" points along the part's own axis, every decoy away from it.
  class Planted final : public query::TextEmbedder {
   public:
    Planted(const std::vector<std::string>& parts, std::function<Eigen::VectorXf(const std::string&)> axis)
        : parts_(parts), axis_(std::move(axis)) {}
    int dim() const override { return static_cast<int>(parts_.size()); }
    Eigen::VectorXf embed(const std::string& text) override {
      for (const auto& p : parts_) {
        if (text == "true " + p) return axis_(p);
        if (text.size() >= p.size() && text.compare(text.size() - p.size(), p.size(), p) == 0) return -axis_(p);
      }
      throw std::invalid_argument("unexpected prompt " + text);
    }

   private:
    std::vector<std::string> parts_;
    std::function<Eigen::VectorXf(const std::string&)> axis_;
  } embedder(parts, axis);

  const FeatureFn features = [&](const PointCloud& c, const BenchmarkObject& o) {
    MatrixF f(static_cast<Eigen::Index>(c.size()), static_cast<Eigen::Index>(parts.size()));
    for (std::size_t i = 0; i < c.size(); ++i)
      f.row(static_cast<Eigen::Index>(i)) = axis(o.part_names[static_cast<std::size_t>(o.gt[i])]).transpose();
    return f;
  };
  std::vector<std::vector<std::string>> candidates;
  for (const auto& p : parts) candidates.push_back({p, "a " + p, "true " + p, "the " + p});
  const auto chosen = search_prompts(features, data, parts, candidates, embedder, EvalConfig{}, 2);
  for (const auto& p : parts) CHECK(chosen.at(p) == "true " + p);
}
