#include "find3d/query.hpp"

#include "find3d/rng.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace find3d::query {

using nlohmann::json;

MatrixF TextEmbedder::embed_all(std::span<const std::string> texts) {
  MatrixF out(static_cast<Eigen::Index>(texts.size()), dim());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const Eigen::VectorXf v = embed(texts[i]);
    if (v.size() != dim()) throw std::runtime_error("embedder returned a vector of the wrong dimension");
    out.row(static_cast<Eigen::Index>(i)) = v.transpose();
  }
  return out;
}

MockEmbedder::MockEmbedder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim <= 0) throw std::invalid_argument("embedding dimension must be positive");
}

Eigen::VectorXf MockEmbedder::embed(const std::string& text) {
  Rng rng(fnv1a64(text) ^ seed_);
  Eigen::VectorXd v(dim_);
  do {
    for (int i = 0; i < dim_; ++i) v(i) = rng.normal();
  } while (v.norm() == 0.0);
  return (v / v.norm()).cast<float>();
}

namespace {

Eigen::VectorXf unit_or_throw(Eigen::VectorXf v, const std::string& text) {
  const float n = v.norm();
  if (!(n > 0.0f) || !std::isfinite(n)) throw std::runtime_error("embedding for '" + text + "' has zero or invalid norm");
  return v / n;
}

std::pair<std::string, std::string> split_url(const std::string& url) {
  // "http://host:port/prefix" -> ("http://host:port", "/prefix")
  const auto scheme = url.find("://");
  const auto path_start = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) return {url, ""};
  std::string prefix = url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, path_start), prefix};
}

}  // namespace

RemoteEmbedder::RemoteEmbedder(std::string base_url, int dim) : base_url_(std::move(base_url)), dim_(dim) {
  if (base_url_.empty()) throw std::invalid_argument("remote embedder: empty base URL");
  if (dim <= 0) throw std::invalid_argument("embedding dimension must be positive");
}

Eigen::VectorXf RemoteEmbedder::embed(const std::string& text) {
  const std::string one[] = {text};
  return embed_all(one).row(0).transpose();
}

MatrixF RemoteEmbedder::embed_all(std::span<const std::string> texts) {
  const auto [host, prefix] = split_url(base_url_);
  httplib::Client client(host);
  client.set_read_timeout(60, 0);
  const json body = {{"texts", std::vector<std::string>(texts.begin(), texts.end())}};
  const auto res = client.Post(prefix + "/embed", body.dump(), "application/json");
  if (!res) throw std::runtime_error("embedder request to " + base_url_ + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw std::runtime_error("embedder returned HTTP " + std::to_string(res->status) + ": " + res->body);
  }
  const json reply = json::parse(res->body);
  const auto& vectors = reply.at("vectors");
  if (vectors.size() != texts.size()) throw std::runtime_error("embedder returned the wrong number of vectors");
  MatrixF out(static_cast<Eigen::Index>(texts.size()), dim_);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto values = vectors[i].get<std::vector<float>>();
    if (values.size() != static_cast<std::size_t>(dim_)) {
      throw std::runtime_error("embedder vector for '" + texts[i] + "' has dimension " + std::to_string(values.size()) +
                               ", expected " + std::to_string(dim_));
    }
    out.row(static_cast<Eigen::Index>(i)) =
        unit_or_throw(Eigen::Map<const Eigen::VectorXf>(values.data(), dim_), texts[i]).transpose();
  }
  return out;
}

CacheEmbedder::CacheEmbedder(std::filesystem::path path, int dim, std::unique_ptr<TextEmbedder> fallback)
    : path_(std::move(path)), dim_(dim), fallback_(std::move(fallback)) {
  std::ifstream in(path_);
  if (!in) {
    if (!fallback_) throw std::runtime_error("embedding cache " + path_.string() + " cannot be opened");
    return;
  }
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const auto values = j.at("vector").get<std::vector<float>>();
      if (values.size() != static_cast<std::size_t>(dim_)) throw std::runtime_error("wrong vector dimension");
      const auto text = j.at("text").get<std::string>();
      entries_.insert_or_assign(text, unit_or_throw(Eigen::Map<const Eigen::VectorXf>(values.data(), dim_), text));
    } catch (const std::exception& e) {
      throw std::runtime_error(path_.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

Eigen::VectorXf CacheEmbedder::embed(const std::string& text) {
  std::lock_guard lock(mutex_);
  if (auto it = entries_.find(text); it != entries_.end()) return it->second;
  if (!fallback_) throw std::runtime_error("text '" + text + "' is not in embedding cache " + path_.string());
  Eigen::VectorXf v = unit_or_throw(fallback_->embed(text), text);
  std::ofstream out(path_, std::ios::app);
  out << json{{"text", text}, {"vector", std::vector<float>(v.data(), v.data() + v.size())}}.dump() << '\n';
  if (!out) throw std::runtime_error("cannot append to embedding cache " + path_.string());
  entries_.emplace(text, v);
  return v;
}

std::size_t CacheEmbedder::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

std::unique_ptr<TextEmbedder> make_embedder(const std::string& kind, int dim, std::uint64_t seed,
                                            const std::filesystem::path& cache_path) {
  const char* url = std::getenv("FIND3D_EMBEDDER_URL");
  if (kind == "mock") return std::make_unique<MockEmbedder>(dim, seed);
  if (kind == "remote") {
    if (!url || !*url) throw std::runtime_error("remote embedder requires FIND3D_EMBEDDER_URL");
    return std::make_unique<RemoteEmbedder>(url, dim);
  }
  if (kind == "cache") {
    if (cache_path.empty()) throw std::invalid_argument("cache embedder requires a cache file path");
    std::unique_ptr<TextEmbedder> fallback;
    if (url && *url) fallback = std::make_unique<RemoteEmbedder>(url, dim);
    return std::make_unique<CacheEmbedder>(cache_path, dim, std::move(fallback));
  }
  throw std::invalid_argument("unknown embedder '" + kind + "' (expected mock, cache or remote)");
}

MatrixF score(const MatrixF& features, const MatrixF& queries) {
  if (features.cols() != queries.cols()) {
    throw std::invalid_argument("score: feature dimension " + std::to_string(features.cols()) +
                                " does not match query dimension " + std::to_string(queries.cols()));
  }
  const auto unit_rows = [](const MatrixF& m) {
    MatrixF out = m;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const float n = out.row(i).norm();
      if (n > 0.0f) out.row(i) /= n;
    }
    return out;
  };
  MatrixF s = unit_rows(features) * unit_rows(queries).transpose();
  return s.cwiseMax(-1.0f).cwiseMin(1.0f);
}

std::vector<std::int32_t> assign(const MatrixF& scores) {
  std::vector<std::int32_t> out(static_cast<std::size_t>(scores.rows()), kNoLabel);
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    if (scores.cols() == 0) continue;
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < scores.cols(); ++j) {
      if (scores(i, j) > scores(i, best)) best = j;
    }
    if (scores(i, best) > 0.0f) out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(best);
  }
  return out;
}

std::string render_prompt(const std::string& templ, const std::string& part, const std::string& object) {
  std::string out;
  for (std::size_t i = 0; i < templ.size();) {
    if (templ[i] != '{') {
      out += templ[i++];
      continue;
    }
    const auto close = templ.find('}', i);
    if (close == std::string::npos) throw std::invalid_argument("prompt template has an unclosed '{': " + templ);
    const std::string name = templ.substr(i + 1, close - i - 1);
    if (name == "part") {
      out += part;
    } else if (name == "object") {
      out += object;
    } else {
      throw std::invalid_argument("unknown placeholder {" + name + "} in prompt template '" + templ + "'");
    }
    i = close + 1;
  }
  return out;
}

MatrixF point_features(const PointCloud& cloud, const net::ModelState& state) {
  net::Geometry geo;
  const MatrixF kept = net::forward(normalize(cloud).first, state, &geo);
  return nn_upsample(kept, geo.sample);
}

QueryResult query_features(const MatrixF& features, const std::vector<std::string>& queries, TextEmbedder& embedder) {
  if (queries.empty()) throw std::invalid_argument("at least one query is required");
  QueryResult r;
  r.queries = queries;
  r.scores = score(features, embedder.embed_all(queries));
  r.assignment = assign(r.scores);
  r.max_score.resize(r.assignment.size());
  for (Eigen::Index i = 0; i < r.scores.rows(); ++i) r.max_score[static_cast<std::size_t>(i)] = r.scores.row(i).maxCoeff();
  return r;
}

QueryResult segment(const PointCloud& cloud, const net::ModelState& state, const std::vector<std::string>& queries,
                    TextEmbedder& embedder) {
  if (queries.empty()) throw std::invalid_argument("at least one query is required");
  if (embedder.dim() != state.config.out_dim) {
    throw std::invalid_argument("embedder dimension " + std::to_string(embedder.dim()) +
                                " does not match model output dimension " + std::to_string(state.config.out_dim));
  }
  return query_features(point_features(cloud, state), queries, embedder);
}

std::string to_json(const QueryResult& result) {
  json scores = json::array();
  for (Eigen::Index i = 0; i < result.scores.rows(); ++i) {
    scores.push_back(std::vector<float>(result.scores.row(i).data(), result.scores.row(i).data() + result.scores.cols()));
  }
  // ordered_json keeps the member order stable for byte comparisons.
  nlohmann::ordered_json j;
  j["queries"] = result.queries;
  j["scores"] = std::move(scores);
  j["assignment"] = result.assignment;
  j["max_score"] = result.max_score;
  return j.dump();
}

std::vector<std::size_t> topk_prompt_search(
    const std::vector<std::vector<std::string>>& candidates,
    const std::function<double(const std::vector<std::string>& chosen)>& objective, int passes) {
  std::vector<std::size_t> choice(candidates.size(), 0);
  for (std::size_t p = 0; p < candidates.size(); ++p) {
    if (candidates[p].empty()) throw std::invalid_argument("part " + std::to_string(p) + " has no candidate prompts");
  }
  const auto chosen_text = [&] {
    std::vector<std::string> out;
    for (std::size_t p = 0; p < candidates.size(); ++p) out.push_back(candidates[p][choice[p]]);
    return out;
  };
  for (int pass = 0; pass < passes; ++pass) {
    for (std::size_t p = 0; p < candidates.size(); ++p) {
      if (candidates[p].size() == 1) continue;
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_idx = 0;
      for (std::size_t c = 0; c < candidates[p].size(); ++c) {
        choice[p] = c;
        const double value = objective(chosen_text());
        if (value > best) {
          best = value;
          best_idx = c;
        }
      }
      choice[p] = best_idx;
    }
  }
  return choice;
}

}  // namespace find3d::query
