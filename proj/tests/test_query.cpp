#include "find3d/query.hpp"
#include "fake_server.hpp"
#include "test_helpers.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace find3d;
using namespace find3d::query;
using find3d::testing::random_cloud;

namespace {

MatrixF rows(std::initializer_list<std::initializer_list<float>> values) {
  MatrixF m(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(values.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : values) {
    Eigen::Index j = 0;
    for (float v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

MatrixF random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  MatrixF m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = static_cast<float>(rng.uniform(-1.0, 1.0));
  return m;
}

/// Fixed table embedder for planting known vectors.
class TableEmbedder final : public TextEmbedder {
 public:
  explicit TableEmbedder(std::map<std::string, Eigen::VectorXf> table) : table_(std::move(table)) {}
  int dim() const override { return static_cast<int>(table_.begin()->second.size()); }
  Eigen::VectorXf embed(const std::string& text) override { return table_.at(text); }

 private:
  std::map<std::string, Eigen::VectorXf> table_;
};

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "find3d_test_query";
  std::filesystem::create_directories(dir);
  auto p = dir / name;
  std::filesystem::remove(p);
  return p;
}

}  // namespace

TEST_CASE("score examples") {
  const MatrixF q = rows({{1, 0}, {0, 1}});
  const MatrixF s = score(rows({{1, 0}}), q);
  CHECK(s(0, 0) == doctest::Approx(1.0));
  CHECK(s(0, 1) == doctest::Approx(0.0));

  SUBCASE("zero feature rows score 0") {
    const MatrixF z = score(rows({{0, 0}}), q);
    CHECK(z(0, 0) == 0.0f);
    CHECK(z(0, 1) == 0.0f);
  }
  SUBCASE("matches a scalar cosine loop") {
    const MatrixF f = random_matrix(3, 5, 1), e = random_matrix(2, 5, 2);
    const MatrixF got = score(f, e);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 2; ++j) {
        double dot = 0, nf = 0, ne = 0;
        for (int k = 0; k < 5; ++k) {
          dot += double(f(i, k)) * e(j, k);
          nf += double(f(i, k)) * f(i, k);
          ne += double(e(j, k)) * e(j, k);
        }
        CHECK(std::abs(got(i, j) - dot / std::sqrt(nf * ne)) < 1e-6);
      }
    }
  }
  SUBCASE("symmetric under role swap") {
    const MatrixF f = random_matrix(4, 6, 3), e = random_matrix(3, 6, 4);
    CHECK((score(f, e) - score(e, f).transpose()).cwiseAbs().maxCoeff() < 1e-6f);
  }
  SUBCASE("dimension mismatch") { CHECK_THROWS_AS(score(random_matrix(2, 3, 1), random_matrix(2, 4, 1)), std::invalid_argument); }
}

TEST_CASE("assign examples") {
  const auto a = assign(rows({{-0.2f, -0.9f}, {0.3f, 0.7f}, {0.5f, 0.5f}, {0.0f, 0.0f}}));
  CHECK(a == std::vector<std::int32_t>{kNoLabel, 1, 0, kNoLabel});
}

TEST_CASE("assignment properties") {
  const MatrixF f = random_matrix(50, 8, 7), e = random_matrix(4, 8, 8);
  const auto base = assign(score(f, e));

  SUBCASE("positive scaling of features") {
    for (float k : {0.001f, 0.5f, 3.0f, 1000.0f}) CHECK(assign(score(f * k, e)) == base);
  }
  SUBCASE("duplicate query keeps the winning text") {
    for (Eigen::Index dup = 0; dup < e.rows(); ++dup) {
      MatrixF e2(e.rows() + 1, e.cols());
      e2 << e, e.row(dup);
      const auto a2 = assign(score(f, e2));
      for (std::size_t i = 0; i < base.size(); ++i) {
        const auto text_of = [&](std::int32_t k) { return k == e.rows() ? static_cast<std::int32_t>(dup) : k; };
        CHECK(text_of(a2[i]) == base[i]);
      }
    }
  }
}

TEST_CASE("render_prompt") {
  CHECK(render_prompt("{part} of a {object}", "leg", "chair") == "leg of a chair");
  CHECK(render_prompt("{part}", "leg", "chair") == "leg");
  CHECK(render_prompt("a plain prompt", "leg", "chair") == "a plain prompt");
  CHECK(render_prompt("{part} {part}", "x", "y") == "x x");
  CHECK_THROWS_AS(render_prompt("{color} {part}", "leg", "chair"), std::invalid_argument);
  CHECK_THROWS_AS(render_prompt("{part", "leg", "chair"), std::invalid_argument);
}

TEST_CASE("mock embedder") {
  MockEmbedder a(16, 0), b(16, 0), c(16, 1);
  const auto v = a.embed("leg of a chair");
  CHECK(v.size() == 16);
  CHECK(std::abs(v.norm() - 1.0f) < 1e-6f);
  CHECK(v == b.embed("leg of a chair"));
  CHECK(v != a.embed("seat of a chair"));
  CHECK(v != c.embed("leg of a chair"));
  const std::string texts[] = {"x", "y"};
  const MatrixF m = a.embed_all(texts);
  CHECK(m.row(1).transpose() == a.embed("y"));
}

TEST_CASE("cache embedder") {
  const auto path = temp_path("cache.jsonl");

  SUBCASE("misses without fallback are errors") {
    std::ofstream(path) << R"({"text":"a","vector":[3,4]})" << '\n';
    CacheEmbedder cache(path, 2);
    const auto v = cache.embed("a");
    CHECK(v(0) == doctest::Approx(0.6));
    CHECK(v(1) == doctest::Approx(0.8));
    CHECK_THROWS_AS(cache.embed("b"), std::runtime_error);
  }
  SUBCASE("misses append through the fallback") {
    {
      CacheEmbedder cache(path, 8, std::make_unique<MockEmbedder>(8, 5));
      CHECK(cache.size() == 0);
      cache.embed("leg");
      cache.embed("seat");
      cache.embed("leg");
      CHECK(cache.size() == 2);
    }
    CacheEmbedder reread(path, 8);
    CHECK(reread.size() == 2);
    MockEmbedder mock(8, 5);
    CHECK((reread.embed("seat") - mock.embed("seat")).norm() < 1e-6f);
  }
  SUBCASE("bad lines report their line number") {
    std::ofstream(path) << R"({"text":"a","vector":[1,0]})" << "\n" << R"({"text":"b","vector":[1]})" << "\n";
    try {
      CacheEmbedder cache(path, 2);
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
  }
}

TEST_CASE("remote embedder against a fake service") {
  find3d::testing::FakeServer fake;
  std::vector<std::string> seen;
  fake.server.Post("/v1/embed", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    nlohmann::json vectors = nlohmann::json::array();
    for (const auto& t : body.at("texts")) {
      seen.push_back(t.get<std::string>());
      vectors.push_back({static_cast<float>(t.get<std::string>().size()), 0.0f, 0.0f});
    }
    res.set_content(nlohmann::json{{"vectors", vectors}}.dump(), "application/json");
  });
  fake.server.Post("/bad/embed", [](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("boom", "text/plain");
  });
  fake.start();

  RemoteEmbedder remote(fake.url("/v1"), 3);
  const std::string texts[] = {"ab", "cde"};
  const MatrixF m = remote.embed_all(texts);
  CHECK(seen == std::vector<std::string>{"ab", "cde"});
  CHECK(m(0, 0) == doctest::Approx(1.0));
  CHECK(m(1, 0) == doctest::Approx(1.0));

  RemoteEmbedder wrong_dim(fake.url("/v1"), 4);
  CHECK_THROWS_AS(wrong_dim.embed("x"), std::runtime_error);
  RemoteEmbedder failing(fake.url("/bad"), 3);
  CHECK_THROWS_WITH_AS(failing.embed("x"), doctest::Contains("HTTP 500"), std::runtime_error);
}

TEST_CASE("make_embedder") {
  CHECK(make_embedder("mock", 8)->dim() == 8);
  CHECK_THROWS_AS(make_embedder("sbert", 8), std::invalid_argument);
  CHECK_THROWS_AS(make_embedder("cache", 8), std::invalid_argument);
}

TEST_CASE("topk_prompt_search") {
  SUBCASE("one candidate per part is returned unchanged") {
    const auto chosen = topk_prompt_search({{"a"}, {"b"}}, [](const auto&) { return 0.0; });
    CHECK(chosen == std::vector<std::size_t>{0, 0});
  }
  SUBCASE("passes=0 keeps the first candidates") {
    int calls = 0;
    const auto chosen = topk_prompt_search({{"a", "b"}, {"c", "d"}}, [&](const auto&) { return ++calls; }, 0);
    CHECK(chosen == std::vector<std::size_t>{0, 0});
  }
  SUBCASE("planted superior prompts are recovered") {
    const auto objective = [](const std::vector<std::string>& c) {
      return (c[0] == "good leg" ? 1.0 : 0.0) + (c[1] == "good seat" ? 1.0 : 0.0);
    };
    const auto chosen = topk_prompt_search({{"leg", "a leg", "good leg"}, {"good seat", "seat"}}, objective, 2);
    CHECK(chosen == std::vector<std::size_t>{2, 0});
  }
  SUBCASE("empty candidate list is an error") {
    CHECK_THROWS_AS(topk_prompt_search({{"a"}, {}}, [](const auto&) { return 0.0; }), std::invalid_argument);
  }
}

TEST_CASE("segment") {
  net::ModelConfig config;
  config.widths = {8, 8};
  config.heads = {2, 2};
  config.block_size = 16;
  config.head_hidden = 8;
  config.out_dim = 4;
  net::ModelState state = net::init_model(config);
  const PointCloud cloud = random_cloud(300, 3);

  SUBCASE("every point takes the query aligned with a constant output") {
    state.params.at("head.fc4.weight").value.setZero();
    auto& bias = state.params.at("head.fc4.bias").value;
    bias << 0.0f, 2.0f, 0.0f, 0.0f;
    Eigen::VectorXf up = Eigen::VectorXf::Zero(4), side = Eigen::VectorXf::Zero(4);
    up(1) = 1.0f;
    side(0) = 1.0f;
    TableEmbedder table({{"up", up}, {"side", side}});
    const auto result = segment(cloud, state, {"side", "up"}, table);
    REQUIRE(result.assignment.size() == cloud.size());
    for (auto a : result.assignment) CHECK(a == 1);
    CHECK(result.scores.rows() == static_cast<Eigen::Index>(cloud.size()));
    CHECK(result.max_score.front() == doctest::Approx(1.0));
  }
  SUBCASE("errors") {
    MockEmbedder mock(4);
    CHECK_THROWS_AS(segment(cloud, state, {}, mock), std::invalid_argument);
    MockEmbedder wrong(5);
    CHECK_THROWS_AS(segment(cloud, state, {"x"}, wrong), std::invalid_argument);
  }
  SUBCASE("json has a fixed member order and round-trips the assignment") {
    MockEmbedder mock(4);
    const auto result = segment(cloud, state, {"a", "b"}, mock);
    const std::string text = to_json(result);
    CHECK(text.rfind("{\"queries\"", 0) == 0);
    const auto j = nlohmann::json::parse(text);
    CHECK(j.at("assignment").get<std::vector<std::int32_t>>() == result.assignment);
    CHECK(j.at("scores").size() == cloud.size());
    CHECK(to_json(segment(cloud, state, {"a", "b"}, mock)) == text);
  }
}
