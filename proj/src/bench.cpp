#include "find3d/bench.hpp"

#include "find3d/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace find3d::bench {

void BenchmarkObject::validate() const {
  if (gt.size() != cloud.size()) {
    throw std::invalid_argument("object '" + id + "': " + std::to_string(gt.size()) + " labels for " +
                                std::to_string(cloud.size()) + " points");
  }
  for (auto g : gt) {
    if (g != kUnlabeled && (g < 0 || static_cast<std::size_t>(g) >= part_names.size())) {
      throw std::invalid_argument("object '" + id + "': part id " + std::to_string(g) + " out of range");
    }
  }
}

double part_iou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, std::int32_t part) {
  if (pred.size() != gt.size()) throw std::invalid_argument("part_iou: prediction and ground truth differ in length");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == kUnlabeled) continue;
    const bool p = pred[i] == part, g = gt[i] == part;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(inter) / static_cast<double>(uni);
}

ObjectScore score_object(const BenchmarkObject& object, std::span<const std::int32_t> pred) {
  ObjectScore s;
  s.id = object.id;
  s.category = object.category;
  std::vector<bool> present(object.part_names.size(), false);
  for (auto g : object.gt) {
    if (g != kUnlabeled) present[static_cast<std::size_t>(g)] = true;
  }
  for (std::size_t p = 0; p < present.size(); ++p) {
    if (!present[p]) continue;
    s.parts.push_back(object.part_names[p]);
    s.ious.push_back(part_iou(pred, object.gt, static_cast<std::int32_t>(p)));
  }
  if (s.ious.empty()) throw std::invalid_argument("object '" + object.id + "' has no labeled points");
  s.miou = std::accumulate(s.ious.begin(), s.ious.end(), 0.0) / static_cast<double>(s.ious.size());
  return s;
}

double class_miou(const std::vector<ObjectScore>& objects, std::map<std::string, double>* per_category) {
  if (objects.empty()) throw std::invalid_argument("class_miou: no objects");
  std::map<std::string, std::pair<double, std::size_t>> sums;
  for (const auto& o : objects) {
    auto& [sum, n] = sums[o.category];
    sum += o.miou;
    ++n;
  }
  double total = 0.0;
  if (per_category) per_category->clear();
  for (const auto& [cat, sn] : sums) {
    const double mean = sn.first / static_cast<double>(sn.second);
    if (per_category) (*per_category)[cat] = mean;
    total += mean;
  }
  return total / static_cast<double>(sums.size());
}

const char* to_string(RotationMode mode) { return mode == RotationMode::Canonical ? "canonical" : "rotated"; }

RotationMode parse_rotation_mode(const std::string& text) {
  if (text == "canonical") return RotationMode::Canonical;
  if (text == "rotated") return RotationMode::Rotated;
  throw std::invalid_argument("unknown rotation mode '" + text + "' (expected canonical or rotated)");
}

FeatureFn model_features(const net::ModelState& state) {
  return [&state](const PointCloud& cloud, const BenchmarkObject&) { return query::point_features(cloud, state); };
}

FeatureFn oracle_features(query::TextEmbedder& embedder, const std::string& prompt_template) {
  return [&embedder, prompt_template](const PointCloud& cloud, const BenchmarkObject& object) {
    MatrixF out = MatrixF::Zero(static_cast<Eigen::Index>(cloud.size()), embedder.dim());
    std::vector<Eigen::VectorXf> part_vec;
    for (const auto& name : object.part_names) {
      part_vec.push_back(embedder.embed(query::render_prompt(prompt_template, name, object.category)));
    }
    for (std::size_t i = 0; i < object.gt.size(); ++i) {
      if (object.gt[i] != kUnlabeled) {
        out.row(static_cast<Eigen::Index>(i)) = part_vec[static_cast<std::size_t>(object.gt[i])].transpose();
      }
    }
    return out;
  };
}

FeatureFn constant_features(const Eigen::VectorXf& value) {
  return [value](const PointCloud& cloud, const BenchmarkObject&) {
    MatrixF out(static_cast<Eigen::Index>(cloud.size()), value.size());
    out.rowwise() = value.transpose();
    return out;
  };
}

Mat3 eval_rotation(std::uint64_t seed, const std::string& object_id) {
  return random_rotation(derive_seed(seed, fnv1a64(object_id))).rotation;
}

std::vector<std::string> object_prompts(const BenchmarkObject& object, const EvalConfig& config) {
  std::vector<std::string> out;
  for (const auto& part : object.part_names) {
    auto it = config.prompt_overrides.find(part);
    const std::string& templ = it != config.prompt_overrides.end() ? it->second : config.prompt_template;
    out.push_back(query::render_prompt(templ, part, object.category));
  }
  return out;
}

namespace {

std::vector<MatrixF> compute_features(const FeatureFn& features, const std::vector<BenchmarkObject>& dataset,
                                      const EvalConfig& config) {
  std::vector<MatrixF> out;
  out.reserve(dataset.size());
  for (const auto& object : dataset) {
    object.validate();
    PointCloud cloud = object.cloud;
    if (config.rotation == RotationMode::Rotated) {
      RigidTransform t;
      t.rotation = eval_rotation(config.seed, object.id);
      cloud = transform_cloud(cloud, t);
    }
    MatrixF f = features(cloud, object);
    if (static_cast<std::size_t>(f.rows()) != cloud.size()) {
      throw std::runtime_error("features for object '" + object.id + "' have the wrong number of rows");
    }
    out.push_back(std::move(f));
  }
  return out;
}

EvalReport evaluate_features(const std::vector<MatrixF>& features, const std::vector<BenchmarkObject>& dataset,
                             const EvalConfig& config, query::TextEmbedder& embedder) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalReport report;
  report.config = config;
  std::map<std::string, Eigen::VectorXf> cache;
  for (std::size_t k = 0; k < dataset.size(); ++k) {
    const auto& object = dataset[k];
    const auto prompts = object_prompts(object, config);
    MatrixF q(static_cast<Eigen::Index>(prompts.size()), embedder.dim());
    for (std::size_t p = 0; p < prompts.size(); ++p) {
      auto it = cache.find(prompts[p]);
      if (it == cache.end()) it = cache.emplace(prompts[p], embedder.embed(prompts[p])).first;
      q.row(static_cast<Eigen::Index>(p)) = it->second.transpose();
    }
    const auto pred = query::assign(query::score(features[k], q));
    report.objects.push_back(score_object(object, pred));
  }
  report.overall = class_miou(report.objects, &report.per_category);
  return report;
}

}  // namespace

EvalReport evaluate(const FeatureFn& features, const std::vector<BenchmarkObject>& dataset, const EvalConfig& config,
                    query::TextEmbedder& embedder) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  return evaluate_features(compute_features(features, dataset, config), dataset, config, embedder);
}

EvalReport random_baseline(const std::vector<BenchmarkObject>& dataset, std::uint64_t seed) {
  if (dataset.empty()) throw std::invalid_argument("random_baseline: empty dataset");
  EvalReport report;
  report.config.seed = seed;
  report.model = "uniform-random";
  for (const auto& object : dataset) {
    object.validate();
    Rng rng(derive_seed(seed, fnv1a64(object.id)));
    std::vector<std::int32_t> pred(object.cloud.size());
    for (auto& p : pred) p = static_cast<std::int32_t>(rng.below(object.part_names.size()));
    report.objects.push_back(score_object(object, pred));
  }
  report.overall = class_miou(report.objects, &report.per_category);
  return report;
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["model"] = report.model;
  j["config"] = {{"template", report.config.prompt_template},
                 {"rotation", to_string(report.config.rotation)},
                 {"seed", report.config.seed}};
  if (!report.config.prompt_overrides.empty()) j["config"]["prompt_overrides"] = report.config.prompt_overrides;
  j["overall_miou"] = report.overall;
  j["per_category"] = report.per_category;
  auto& objects = j["objects"] = nlohmann::ordered_json::array();
  for (const auto& o : report.objects) {
    nlohmann::ordered_json jo;
    jo["id"] = o.id;
    jo["category"] = o.category;
    jo["miou"] = o.miou;
    auto& parts = jo["parts"] = nlohmann::ordered_json::array();
    for (std::size_t p = 0; p < o.parts.size(); ++p) parts.push_back({{"name", o.parts[p]}, {"iou", o.ious[p]}});
    objects.push_back(std::move(jo));
  }
  return j.dump(2);
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "category,object,part,iou\n" << std::setprecision(17);
  for (const auto& o : report.objects) {
    for (std::size_t p = 0; p < o.parts.size(); ++p) out << o.category << ',' << o.id << ',' << o.parts[p] << ',' << o.ious[p] << '\n';
  }
  return out.str();
}

Split split_by_object(const std::vector<BenchmarkObject>& dataset, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw std::invalid_argument("test fraction must be in [0, 1]");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x7e57));
  rng.shuffle(order.begin(), order.end());
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(dataset.size())));
  std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test_idx.begin(), test_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  Split s;
  for (auto i : train_idx) s.train.push_back(dataset[i]);
  for (auto i : test_idx) s.test.push_back(dataset[i]);
  return s;
}

std::map<std::string, std::string> search_prompts(const FeatureFn& features,
                                                  const std::vector<BenchmarkObject>& dataset,
                                                  const std::vector<std::string>& part_names,
                                                  const std::vector<std::vector<std::string>>& candidates,
                                                  query::TextEmbedder& embedder, const EvalConfig& base, int passes) {
  if (part_names.size() != candidates.size()) throw std::invalid_argument("search_prompts: one candidate list per part");
  const auto cached = compute_features(features, dataset, base);
  const auto to_overrides = [&](const std::vector<std::string>& chosen) {
    std::map<std::string, std::string> out;
    for (std::size_t p = 0; p < part_names.size(); ++p) out[part_names[p]] = chosen[p];
    return out;
  };
  const auto choice = query::topk_prompt_search(
      candidates,
      [&](const std::vector<std::string>& chosen) {
        EvalConfig c = base;
        c.prompt_overrides = to_overrides(chosen);
        return evaluate_features(cached, dataset, c, embedder).overall;
      },
      passes);
  std::vector<std::string> chosen;
  for (std::size_t p = 0; p < part_names.size(); ++p) chosen.push_back(candidates[p][choice[p]]);
  return to_overrides(chosen);
}

// ---------------------------------------------------------------------------
// Synthetic objects

namespace {

enum class Shape { Box, Cylinder, Sphere };

struct Primitive {
  Shape shape;
  Vec3 center;
  Vec3 size;     // box: half extents; cylinder: (radius, half length, -); sphere: (radius, -, -)
  int axis = 2;  // cylinder axis
  bool caps = true;
};

struct PartTemplate {
  std::string name;
  int material;
  std::vector<Primitive> prims;
};

struct CategoryTemplate {
  std::string name;
  std::vector<Vec3> materials;
  std::vector<PartTemplate> parts;
};

Primitive box(Vec3 c, Vec3 h) { return {Shape::Box, c, h}; }
Primitive cyl(Vec3 c, double r, double half, int axis = 2, bool caps = true) {
  return {Shape::Cylinder, c, Vec3(r, half, 0.0), axis, caps};
}
Primitive sphere(Vec3 c, double r) { return {Shape::Sphere, c, Vec3(r, 0.0, 0.0)}; }

std::vector<Primitive> four(double x, double y, double r, double z0, double z1) {
  std::vector<Primitive> out;
  for (double sx : {-1.0, 1.0})
    for (double sy : {-1.0, 1.0}) out.push_back(cyl({sx * x, sy * y, 0.5 * (z0 + z1)}, r, 0.5 * (z1 - z0)));
  return out;
}

// Five well-separated colors; each category assigns them to its parts in a
// rotated order, so a color names different parts in different categories.
const std::vector<Vec3> kPalette = {
    {0.80, 0.20, 0.20}, {0.20, 0.70, 0.30}, {0.20, 0.30, 0.80}, {0.85, 0.80, 0.20}, {0.60, 0.30, 0.70}};

const std::vector<CategoryTemplate>& templates() {
  static const std::vector<CategoryTemplate> t = [] {
    std::vector<CategoryTemplate> c;
    c.push_back({"chair",
                 kPalette,
                 {{"seat", 0, {box({0, 0, 0.45}, {0.25, 0.25, 0.03})}},
                  {"back", 1, {box({0, -0.23, 0.76}, {0.25, 0.03, 0.28})}},
                  {"leg", 2, four(0.21, 0.21, 0.025, 0.0, 0.42)},
                  {"arm", 3, {box({-0.28, 0, 0.62}, {0.03, 0.22, 0.03}), box({0.28, 0, 0.62}, {0.03, 0.22, 0.03})}},
                  {"headrest", 4, {box({0, -0.2, 1.1}, {0.15, 0.05, 0.06})}}}});
    c.push_back({"table",
                 kPalette,
                 {{"top", 1, {box({0, 0, 0.75}, {0.5, 0.3, 0.03})}},
                  {"leg", 2, four(0.44, 0.24, 0.03, 0.0, 0.72)},
                  {"shelf", 3, {box({0, 0, 0.25}, {0.42, 0.22, 0.02})}},
                  {"drawer", 4, {box({0, 0.1, 0.63}, {0.2, 0.15, 0.06})}},
                  {"vase", 0, {sphere({0.25, 0, 0.9}, 0.12)}}}});
    c.push_back({"lamp",
                 kPalette,
                 {{"base", 2, {cyl({0, 0, 0.02}, 0.2, 0.02)}},
                  {"pole", 3, {cyl({0, 0, 0.42}, 0.02, 0.38)}},
                  {"shade", 4, {cyl({0, 0, 0.9}, 0.25, 0.12, 2, false)}},
                  {"bulb", 0, {sphere({0, 0, 0.7}, 0.06)}},
                  {"switch", 1, {box({0.17, 0, 0.07}, {0.07, 0.05, 0.04})}}}});
    c.push_back({"mug",
                 kPalette,
                 {{"body", 3, {cyl({0, 0, 0.35}, 0.3, 0.35, 2, false)}},
                  {"handle", 4, {box({0.37, 0, 0.35}, {0.06, 0.04, 0.2})}},
                  {"lid", 0, {cyl({0, 0, 0.72}, 0.31, 0.02)}},
                  {"saucer", 1, {cyl({0, 0, -0.02}, 0.5, 0.02)}},
                  {"spoon", 2, {box({-0.1, 0, 0.95}, {0.02, 0.02, 0.2})}}}});
    c.push_back({"car",
                 kPalette,
                 {{"body", 4, {box({0, 0, 0.35}, {0.9, 0.4, 0.18})}},
                  {"wheel", 0, {cyl({0.55, 0.42, 0.17}, 0.17, 0.06, 1), cyl({-0.55, 0.42, 0.17}, 0.17, 0.06, 1),
                                cyl({0.55, -0.42, 0.17}, 0.17, 0.06, 1), cyl({-0.55, -0.42, 0.17}, 0.17, 0.06, 1)}},
                  {"roof", 1, {box({-0.1, 0, 0.65}, {0.45, 0.35, 0.12})}},
                  {"headlight", 2, {sphere({0.9, 0.25, 0.4}, 0.07), sphere({0.9, -0.25, 0.4}, 0.07)}},
                  {"spoiler", 3, {box({-0.85, 0, 0.62}, {0.06, 0.38, 0.03})}}}});
    return c;
  }();
  return t;
}

double area(const Primitive& p) {
  switch (p.shape) {
    case Shape::Box: {
      const Vec3& h = p.size;
      return 8.0 * (h.x() * h.y() + h.y() * h.z() + h.x() * h.z());
    }
    case Shape::Cylinder: {
      const double r = p.size.x(), half = p.size.y();
      return 2.0 * std::numbers::pi * r * 2.0 * half + (p.caps ? 2.0 * std::numbers::pi * r * r : 0.0);
    }
    case Shape::Sphere: return 4.0 * std::numbers::pi * p.size.x() * p.size.x();
  }
  return 0.0;
}

// Uniform point on the primitive's surface with its outward normal.
std::pair<Vec3, Vec3> sample_surface(const Primitive& p, Rng& rng) {
  switch (p.shape) {
    case Shape::Box: {
      const Vec3& h = p.size;
      const double faces[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};
      double pick = rng.uniform(0.0, faces[0] + faces[1] + faces[2]);
      int axis = 0;
      while (axis < 2 && pick >= faces[axis]) pick -= faces[axis++];
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      Vec3 local(rng.uniform(-h.x(), h.x()), rng.uniform(-h.y(), h.y()), rng.uniform(-h.z(), h.z()));
      local[axis] = sign * h[axis];
      Vec3 n = Vec3::Zero();
      n[axis] = sign;
      return {p.center + local, n};
    }
    case Shape::Cylinder: {
      const double r = p.size.x(), half = p.size.y();
      const double side = 2.0 * std::numbers::pi * r * 2.0 * half;
      const double cap = p.caps ? std::numbers::pi * r * r : 0.0;
      const int a = p.axis, b = (a + 1) % 3, c = (a + 2) % 3;
      Vec3 local, n = Vec3::Zero();
      if (rng.uniform(0.0, side + 2.0 * cap) < side) {
        const double t = rng.uniform(0.0, 2.0 * std::numbers::pi);
        local[a] = rng.uniform(-half, half);
        local[b] = r * std::cos(t);
        local[c] = r * std::sin(t);
        n[b] = std::cos(t);
        n[c] = std::sin(t);
      } else {
        const double rr = r * std::sqrt(rng.uniform());
        const double t = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        local[a] = sign * half;
        local[b] = rr * std::cos(t);
        local[c] = rr * std::sin(t);
        n[a] = sign;
      }
      return {p.center + local, n};
    }
    case Shape::Sphere: {
      Vec3 d(rng.normal(), rng.normal(), rng.normal());
      while (d.norm() < 1e-12) d = Vec3(rng.normal(), rng.normal(), rng.normal());
      d.normalize();
      return {p.center + p.size.x() * d, d};
    }
  }
  return {};
}

Primitive jittered(Primitive p, double scale_xy, double scale_z, Rng& rng) {
  p.center.x() *= scale_xy;
  p.center.y() *= scale_xy;
  p.center.z() *= scale_z;
  const double s = rng.uniform(0.85, 1.15);
  p.size *= s;
  return p;
}

}  // namespace

const std::map<std::string, std::vector<std::string>>& synth_categories() {
  static const std::map<std::string, std::vector<std::string>> m = [] {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& c : templates()) {
      for (const auto& p : c.parts) out[c.name].push_back(p.name);
    }
    return out;
  }();
  return m;
}

std::vector<BenchmarkObject> synth_dataset(const SynthConfig& config) {
  if (config.min_parts < 2 || config.max_parts < config.min_parts || config.max_parts > 5) {
    throw std::invalid_argument("synth_dataset: parts range must satisfy 2 <= min <= max <= 5");
  }
  if (config.points_per_part < 30) throw std::invalid_argument("synth_dataset: need at least 30 points per part");
  const auto& cats = templates();
  std::vector<BenchmarkObject> out;
  out.reserve(config.n_objects);
  for (std::size_t k = 0; k < config.n_objects; ++k) {
    Rng rng(derive_seed(config.seed, k));
    const CategoryTemplate& cat = cats[k % cats.size()];
    const int n_parts = config.min_parts + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.max_parts - config.min_parts + 1)));

    std::vector<Vec3> materials;
    for (const Vec3& m : cat.materials) {
      Vec3 shifted = m;
      for (int c = 0; c < 3; ++c) shifted[c] = std::clamp(m[c] + rng.uniform(-0.1, 0.1), 0.0, 1.0);
      materials.push_back(shifted);
    }
    const double scale_xy = rng.uniform(0.85, 1.15), scale_z = rng.uniform(0.85, 1.15);
    const double yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
    RigidTransform pose;
    pose.rotation = rotation_from_angles(0.0, 0.0, yaw);

    BenchmarkObject obj;
    obj.id = cat.name + "_" + std::to_string(k);
    obj.category = cat.name;
    for (int p = 0; p < n_parts; ++p) {
      const PartTemplate& part = cat.parts[static_cast<std::size_t>(p)];
      obj.part_names.push_back(part.name);
      std::vector<Primitive> prims;
      std::vector<double> areas;
      for (const auto& prim : part.prims) {
        prims.push_back(jittered(prim, scale_xy, scale_z, rng));
        areas.push_back(area(prims.back()));
      }
      const double total_area = std::accumulate(areas.begin(), areas.end(), 0.0);
      for (std::size_t i = 0; i < config.points_per_part; ++i) {
        double pick = rng.uniform(0.0, total_area);
        std::size_t which = 0;
        while (which + 1 < prims.size() && pick >= areas[which]) pick -= areas[which++];
        auto [pos, normal] = sample_surface(prims[which], rng);
        Point pt;
        pt.position = pos;
        pt.normal = normal;
        const Vec3& base = materials[static_cast<std::size_t>(part.material)];
        for (int c = 0; c < 3; ++c) pt.color[c] = std::clamp(base[c] + rng.normal(0.0, 0.02), 0.0, 1.0);
        obj.cloud.points.push_back(pt);
        obj.gt.push_back(p);
      }
    }
    obj.cloud = normalize(transform_cloud(obj.cloud, pose)).first;

    std::vector<std::size_t> counts(obj.part_names.size(), 0);
    for (auto g : obj.gt) ++counts[static_cast<std::size_t>(g)];
    if (counts.size() < 2 || *std::min_element(counts.begin(), counts.end()) < 30) {
      throw std::logic_error("synth_dataset: generated object violates the part-size constraint");
    }
    out.push_back(std::move(obj));
  }
  return out;
}

}  // namespace find3d::bench
