#pragma once

#include "find3d/cloud.hpp"
#include "find3d/net.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace find3d::query {

inline constexpr std::int32_t kNoLabel = -1;

/// Text -> unit vector. Implementations must be deterministic per text.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual int dim() const = 0;
  virtual Eigen::VectorXf embed(const std::string& text) = 0;
  /// Rows in input order; the default loops over embed().
  virtual MatrixF embed_all(std::span<const std::string> texts);
};

/// Pseudo-random unit vector seeded by the FNV-1a hash of the text.
class MockEmbedder final : public TextEmbedder {
 public:
  explicit MockEmbedder(int dim, std::uint64_t seed = 0);
  int dim() const override { return dim_; }
  Eigen::VectorXf embed(const std::string& text) override;

 private:
  int dim_;
  std::uint64_t seed_;
};

/// POST {base_url}/embed with {"texts": [...]}, expects {"vectors": [[...]]}.
class RemoteEmbedder final : public TextEmbedder {
 public:
  RemoteEmbedder(std::string base_url, int dim);
  int dim() const override { return dim_; }
  Eigen::VectorXf embed(const std::string& text) override;
  MatrixF embed_all(std::span<const std::string> texts) override;

 private:
  std::string base_url_;
  int dim_;
};

/// JSON-lines cache ({"text": ..., "vector": [...]} per line). Misses go to
/// the fallback when one is given and are appended to the file; otherwise
/// they are an error.
class CacheEmbedder final : public TextEmbedder {
 public:
  CacheEmbedder(std::filesystem::path path, int dim, std::unique_ptr<TextEmbedder> fallback = nullptr);
  int dim() const override { return dim_; }
  Eigen::VectorXf embed(const std::string& text) override;
  std::size_t size() const;

 private:
  std::filesystem::path path_;
  int dim_;
  std::unique_ptr<TextEmbedder> fallback_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, Eigen::VectorXf> entries_;
};

/// kind is "mock", "cache" or "remote". Remote reads FIND3D_EMBEDDER_URL; cache
/// uses cache_path and falls back to remote when that variable is set.
std::unique_ptr<TextEmbedder> make_embedder(const std::string& kind, int dim, std::uint64_t seed = 0,
                                            const std::filesystem::path& cache_path = {});

struct QueryResult {
  std::vector<std::string> queries;
  MatrixF scores;                        // N x Q cosine similarities
  std::vector<std::int32_t> assignment;  // query index or kNoLabel
  std::vector<float> max_score;          // row maximum (-1 when Q = 0 never happens)
};

/// Cosine similarity of every feature row with every query row. Zero rows on
/// either side score 0.
MatrixF score(const MatrixF& features, const MatrixF& queries);

/// Row argmax when the maximum is positive, else kNoLabel. Ties go to the
/// lowest index.
std::vector<std::int32_t> assign(const MatrixF& scores);

/// Replaces {part} and {object}. Any other {name} placeholder is an error.
std::string render_prompt(const std::string& templ, const std::string& part, const std::string& object);

/// Per-point features at full resolution: normalize, forward on kept points,
/// then copy each dropped point's nearest kept feature.
MatrixF point_features(const PointCloud& cloud, const net::ModelState& state);

QueryResult segment(const PointCloud& cloud, const net::ModelState& state, const std::vector<std::string>& queries,
                    TextEmbedder& embedder);
QueryResult query_features(const MatrixF& features, const std::vector<std::string>& queries, TextEmbedder& embedder);

/// {"queries", "scores", "assignment", "max_score"} with fixed member order.
std::string to_json(const QueryResult& result);

/// Coordinate ascent over per-part candidate prompts. `objective` maps a full
/// choice (one prompt per part) to a score to maximize. Returns the chosen
/// candidate index per part; ties keep the lowest index.
std::vector<std::size_t> topk_prompt_search(
    const std::vector<std::vector<std::string>>& candidates,
    const std::function<double(const std::vector<std::string>& chosen)>& objective, int passes = 2);

}  // namespace find3d::query
