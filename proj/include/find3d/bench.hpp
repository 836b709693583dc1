#pragma once

#include "find3d/cloud.hpp"
#include "find3d/net.hpp"
#include "find3d/query.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace find3d::bench {

struct BenchmarkObject {
  std::string id;
  std::string category;
  PointCloud cloud;
  std::vector<std::string> part_names;
  std::vector<std::int32_t> gt;  // per point: part index or kUnlabeled

  /// Throws std::invalid_argument on size or range violations.
  void validate() const;
};

/// IoU of one part over labeled points only. Returns NaN when the part is
/// absent from both prediction and ground truth.
double part_iou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, std::int32_t part);

struct ObjectScore {
  std::string id;
  std::string category;
  std::vector<std::string> parts;  // parts present in the ground truth
  std::vector<double> ious;        // parallel to parts
  double miou = 0.0;
};

/// Mean IoU over the parts that occur in gt.
ObjectScore score_object(const BenchmarkObject& object, std::span<const std::int32_t> pred);

/// Objects -> category mean -> mean over categories.
double class_miou(const std::vector<ObjectScore>& objects, std::map<std::string, double>* per_category = nullptr);

enum class RotationMode { Canonical, Rotated };
const char* to_string(RotationMode mode);
RotationMode parse_rotation_mode(const std::string& text);

struct EvalConfig {
  std::string prompt_template = "{part} of a {object}";
  RotationMode rotation = RotationMode::Canonical;
  std::uint64_t seed = 0;
  /// Optional per-part prompt overrides (part name -> prompt).
  std::map<std::string, std::string> prompt_overrides;
};

struct EvalReport {
  std::vector<ObjectScore> objects;
  std::map<std::string, double> per_category;
  double overall = 0.0;
  EvalConfig config;
  std::string model;
};

/// Full-resolution per-point features for an object whose cloud may already
/// be rotated. Rows must match the cloud's point count.
using FeatureFn = std::function<MatrixF(const PointCloud& cloud, const BenchmarkObject& object)>;

FeatureFn model_features(const net::ModelState& state);
/// Each point gets the embedding of its own ground-truth part prompt; unlabeled
/// points get zeros.
FeatureFn oracle_features(query::TextEmbedder& embedder, const std::string& prompt_template);
/// Every point gets the same vector.
FeatureFn constant_features(const Eigen::VectorXf& value);

/// The rotation applied to an object in rotated mode.
Mat3 eval_rotation(std::uint64_t seed, const std::string& object_id);

std::vector<std::string> object_prompts(const BenchmarkObject& object, const EvalConfig& config);

EvalReport evaluate(const FeatureFn& features, const std::vector<BenchmarkObject>& dataset, const EvalConfig& config,
                    query::TextEmbedder& embedder);

/// Uniformly random part per point (seeded per object).
EvalReport random_baseline(const std::vector<BenchmarkObject>& dataset, std::uint64_t seed);

std::string report_json(const EvalReport& report);
/// category,object,part,iou
std::string report_csv(const EvalReport& report);

struct SynthConfig {
  std::size_t n_objects = 200;
  int min_parts = 2;
  int max_parts = 5;
  std::size_t points_per_part = 200;
  std::uint64_t seed = 0;
};

/// Procedural multi-part objects built from boxes, cylinders and spheres.
std::vector<BenchmarkObject> synth_dataset(const SynthConfig& config);

/// Vocabulary of categories and their part names used by the generator.
const std::map<std::string, std::vector<std::string>>& synth_categories();

struct Split {
  std::vector<BenchmarkObject> train;
  std::vector<BenchmarkObject> test;
};

/// Seeded split by object; test receives round(test_fraction * n) objects.
Split split_by_object(const std::vector<BenchmarkObject>& dataset, double test_fraction, std::uint64_t seed);

/// Prompt search over the given dataset: candidates[p] lists the prompts tried
/// for part name part_names[p]. Returns the chosen prompt per part.
std::map<std::string, std::string> search_prompts(const FeatureFn& features,
                                                  const std::vector<BenchmarkObject>& dataset,
                                                  const std::vector<std::string>& part_names,
                                                  const std::vector<std::vector<std::string>>& candidates,
                                                  query::TextEmbedder& embedder, const EvalConfig& base, int passes = 2);

}  // namespace find3d::bench
