#include "find3d/cloud.hpp"

#include "find3d/rng.hpp"
#include "find3d/spatial_grid.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

namespace find3d {

RigidTransform RigidTransform::compose(const RigidTransform& other) const {
  RigidTransform out;
  out.rotation = rotation * other.rotation;
  out.scale = scale * other.scale;
  out.translation = scale * (rotation * other.translation) + translation;
  return out;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  out.rotation = rotation.transpose();
  out.scale = 1.0 / scale;
  out.translation = -(out.scale * (out.rotation * translation));
  return out;
}

PointCloud transform_cloud(const PointCloud& cloud, const RigidTransform& t) {
  PointCloud out = cloud;
  for (auto& p : out.points) {
    p.position = t.apply(p.position);
    const Vec3 n = t.apply_normal(p.normal);
    const double len = n.norm();
    p.normal = len > 0.0 ? Vec3(n / len) : n;
  }
  return out;
}

namespace {

void require_finite(const PointCloud& cloud) {
  for (const auto& p : cloud.points) {
    if (!p.position.allFinite()) throw std::invalid_argument("point cloud has non-finite coordinates");
  }
}

}  // namespace

std::pair<PointCloud, RigidTransform> normalize(const PointCloud& cloud) {
  if (cloud.empty()) throw std::invalid_argument("cannot normalize an empty point cloud");
  require_finite(cloud);

  Vec3 lo = cloud.points.front().position;
  Vec3 hi = lo;
  for (const auto& p : cloud.points) {
    lo = lo.cwiseMin(p.position);
    hi = hi.cwiseMax(p.position);
  }
  const double extent = (hi - lo).maxCoeff();
  if (!(extent > 0.0)) throw std::invalid_argument("zero extent");

  RigidTransform t;
  t.scale = 1.0 / extent;
  t.translation = -t.scale * (0.5 * (lo + hi));
  return {transform_cloud(cloud, t), t};
}

std::uint64_t pack_voxel_key(const GridCoord& c) {
  constexpr std::uint64_t kMask = (1ULL << 21) - 1;
  return (c.x & kMask) | ((c.y & kMask) << 21) | ((c.z & kMask) << 42);
}

GridCoord unpack_voxel_key(std::uint64_t key) {
  constexpr std::uint64_t kMask = (1ULL << 21) - 1;
  return {static_cast<std::uint32_t>(key & kMask), static_cast<std::uint32_t>((key >> 21) & kMask),
          static_cast<std::uint32_t>((key >> 42) & kMask)};
}

bool SampleResult::is_kept(std::uint32_t index) const {
  return std::binary_search(kept.begin(), kept.end(), index);
}

SampleResult voxel_sample(const PointCloud& cloud, double voxel_size) {
  if (!(voxel_size > 0.0)) throw std::invalid_argument("voxel size must be positive");
  if (cloud.empty()) throw std::invalid_argument("cannot voxel-sample an empty point cloud");
  require_finite(cloud);

  const std::size_t n = cloud.size();
  std::vector<std::array<std::int64_t, 3>> cells(n);
  std::array<std::int64_t, 3> lo{};
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      cells[i][a] = static_cast<std::int64_t>(std::floor(cloud.points[i].position[a] / voxel_size));
      lo[a] = (i == 0) ? cells[i][a] : std::min(lo[a], cells[i][a]);
    }
  }

  std::vector<GridCoord> coords(n);
  std::vector<std::uint64_t> keys(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<std::int64_t, 3> rel{};
    for (int a = 0; a < 3; ++a) {
      rel[a] = cells[i][a] - lo[a];
      if (rel[a] >= (1LL << 21)) throw std::invalid_argument("point cloud extent exceeds the voxel grid range");
    }
    coords[i] = {static_cast<std::uint32_t>(rel[0]), static_cast<std::uint32_t>(rel[1]),
                 static_cast<std::uint32_t>(rel[2])};
    keys[i] = pack_voxel_key(coords[i]);
  }

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0U);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return keys[a] != keys[b] ? keys[a] < keys[b] : a < b;
  });

  SampleResult out;
  out.voxel_size = voxel_size;
  for (std::size_t k = 0; k < n; ++k) {
    if (k == 0 || keys[order[k]] != keys[order[k - 1]]) out.kept.push_back(order[k]);
  }
  std::sort(out.kept.begin(), out.kept.end());

  out.voxel_key.reserve(out.kept.size());
  out.grid.reserve(out.kept.size());
  std::vector<Vec3> kept_positions;
  kept_positions.reserve(out.kept.size());
  out.nearest_slot.assign(n, 0);
  std::vector<bool> is_kept(n, false);
  for (std::uint32_t slot = 0; slot < out.kept.size(); ++slot) {
    const std::uint32_t idx = out.kept[slot];
    out.voxel_key.push_back(keys[idx]);
    out.grid.push_back(coords[idx]);
    kept_positions.push_back(cloud.points[idx].position);
    out.nearest_slot[idx] = slot;
    is_kept[idx] = true;
  }

  const SpatialGrid index(kept_positions, voxel_size);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (is_kept[i]) continue;
    out.nearest_slot[i] = *index.nearest(cloud.points[i].position);
  }
  return out;
}

MatrixF nn_upsample(const MatrixF& kept_features, const SampleResult& sample) {
  if (static_cast<std::size_t>(kept_features.rows()) != sample.kept.size()) {
    throw std::invalid_argument("nn_upsample: feature rows (" + std::to_string(kept_features.rows()) +
                                ") do not match kept points (" + std::to_string(sample.kept.size()) + ")");
  }
  MatrixF out(static_cast<Eigen::Index>(sample.num_points()), kept_features.cols());
  for (std::size_t i = 0; i < sample.num_points(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = kept_features.row(sample.nearest_slot[i]);
  }
  return out;
}

Mat3 rotation_from_angles(double alpha, double beta, double gamma) {
  const Mat3 rx = Eigen::AngleAxisd(alpha, Vec3::UnitX()).toRotationMatrix();
  const Mat3 ry = Eigen::AngleAxisd(beta, Vec3::UnitY()).toRotationMatrix();
  const Mat3 rz = Eigen::AngleAxisd(gamma, Vec3::UnitZ()).toRotationMatrix();
  return rz * ry * rx;
}

RigidTransform random_rotation(std::uint64_t seed) {
  Rng rng(seed);
  const double alpha = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const double beta = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const double gamma = rng.uniform(-std::numbers::pi, std::numbers::pi);
  RigidTransform t;
  t.rotation = rotation_from_angles(alpha, beta, gamma);
  return t;
}

bool is_rotation(const Mat3& r, double tol) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.rotate = c.scale = c.flip = c.jitter = false;
  c.auto_contrast = c.chroma_translate = c.chroma_jitter = false;
  return c;
}

PointCloud augment(const PointCloud& cloud, const AugmentConfig& config, std::uint64_t seed) {
  PointCloud out = cloud;
  Rng rng(seed);

  if (config.rotate) out = transform_cloud(out, random_rotation(rng.next_u64()));

  if (config.scale) {
    const double s = rng.uniform(config.scale_min, config.scale_max);
    for (auto& p : out.points) p.position *= s;
  }

  if (config.flip) {
    for (int axis = 0; axis < 2; ++axis) {
      const bool enabled = axis == 0 ? config.flip_x : config.flip_y;
      if (!rng.bernoulli(config.flip_p) || !enabled) continue;
      for (auto& p : out.points) {
        p.position[axis] = -p.position[axis];
        p.normal[axis] = -p.normal[axis];
      }
    }
  }

  if (config.jitter) {
    for (auto& p : out.points) {
      for (int a = 0; a < 3; ++a) {
        const double d = std::clamp(rng.normal(0.0, config.jitter_sigma), -config.jitter_clip, config.jitter_clip);
        p.position[a] += d;
      }
    }
  }

  if (config.auto_contrast && rng.bernoulli(config.auto_contrast_p) && !out.empty()) {
    Vec3 lo = out.points.front().color;
    Vec3 hi = lo;
    for (const auto& p : out.points) {
      lo = lo.cwiseMin(p.color);
      hi = hi.cwiseMax(p.color);
    }
    for (auto& p : out.points) {
      for (int c = 0; c < 3; ++c) {
        const double range = hi[c] - lo[c];
        if (range <= 0.0) continue;
        const double stretched = (p.color[c] - lo[c]) / range;
        p.color[c] = (1.0 - config.auto_contrast_blend) * p.color[c] + config.auto_contrast_blend * stretched;
      }
    }
  }

  if (config.chroma_translate) {
    Vec3 shift;
    for (int c = 0; c < 3; ++c) shift[c] = rng.uniform(-config.chroma_translate_range, config.chroma_translate_range);
    for (auto& p : out.points) p.color += shift;
  }

  if (config.chroma_jitter) {
    for (auto& p : out.points) {
      for (int c = 0; c < 3; ++c) p.color[c] += rng.normal(0.0, config.chroma_jitter_sigma);
    }
  }

  for (auto& p : out.points) {
    p.color = p.color.cwiseMax(0.0).cwiseMin(1.0);
    const double len = p.normal.norm();
    if (len > 0.0) p.normal /= len;
  }
  return out;
}

MatrixF point_features(const PointCloud& cloud, std::span<const std::uint32_t> indices) {
  MatrixF out(static_cast<Eigen::Index>(indices.size()), 9);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Point& p = cloud.points[indices[r]];
    for (int a = 0; a < 3; ++a) {
      out(static_cast<Eigen::Index>(r), a) = static_cast<float>(p.position[a]);
      out(static_cast<Eigen::Index>(r), 3 + a) = static_cast<float>(p.normal[a]);
      out(static_cast<Eigen::Index>(r), 6 + a) = static_cast<float>(p.color[a]);
    }
  }
  return out;
}

}  // namespace find3d
