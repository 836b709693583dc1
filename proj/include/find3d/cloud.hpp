#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace find3d {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

inline constexpr std::int32_t kUnlabeled = -1;

struct Point {
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::Zero();
  Vec3 color = Vec3::Zero();  // each channel in [0,1]
};

struct PointCloud {
  std::vector<Point> points;
  // Optional ground-truth part id per point (kUnlabeled for none). Empty when
  // the cloud carries no annotation.
  std::vector<std::int32_t> part_ids;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_parts() const { return !part_ids.empty(); }
};

/// p -> scale * (rotation * p) + translation. Normals only see the rotation.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double scale = 1.0;

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
  Vec3 apply_normal(const Vec3& n) const { return rotation * n; }

  /// (this ∘ other)(p) == this->apply(other.apply(p))
  RigidTransform compose(const RigidTransform& other) const;
  RigidTransform inverse() const;
};

PointCloud transform_cloud(const PointCloud& cloud, const RigidTransform& t);

/// Centers the cloud on its axis-aligned bounding-box center and scales it so
/// the longest box edge is 1. Throws std::invalid_argument("zero extent") for
/// a cloud whose points all coincide.
std::pair<PointCloud, RigidTransform> normalize(const PointCloud& cloud);

struct GridCoord {
  std::uint32_t x = 0, y = 0, z = 0;
  friend bool operator==(const GridCoord&, const GridCoord&) = default;
};

/// 21 bits per axis: x | y << 21 | z << 42.
std::uint64_t pack_voxel_key(const GridCoord& c);
GridCoord unpack_voxel_key(std::uint64_t key);

struct SampleResult {
  std::vector<std::uint32_t> kept;       // ascending original indices
  std::vector<std::uint64_t> voxel_key;  // per kept point
  std::vector<GridCoord> grid;           // per kept point, non-negative
  // Slot into `kept` of the nearest kept point, for every original index.
  // Kept points map to their own slot.
  std::vector<std::uint32_t> nearest_slot;
  double voxel_size = 0.0;

  std::size_t num_points() const { return nearest_slot.size(); }
  bool is_kept(std::uint32_t index) const;
};

inline constexpr double kDefaultVoxelSize = 0.02;

SampleResult voxel_sample(const PointCloud& cloud, double voxel_size = kDefaultVoxelSize);

/// Broadcasts per-kept-point features back to every original point.
MatrixF nn_upsample(const MatrixF& kept_features, const SampleResult& sample);

/// Rz(gamma) * Ry(beta) * Rx(alpha): rotate about X, then Y, then Z.
Mat3 rotation_from_angles(double alpha, double beta, double gamma);

/// Angles drawn uniformly from [-pi, pi) per axis.
RigidTransform random_rotation(std::uint64_t seed);

bool is_rotation(const Mat3& r, double tol = 1e-6);

struct AugmentConfig {
  bool rotate = false;

  bool scale = true;
  double scale_min = 0.9;
  double scale_max = 1.1;

  bool flip = true;
  double flip_p = 0.5;  // drawn independently per enabled axis
  bool flip_x = true;
  bool flip_y = true;

  bool jitter = true;
  double jitter_sigma = 0.005;
  double jitter_clip = 0.02;

  bool auto_contrast = true;
  double auto_contrast_p = 0.2;
  double auto_contrast_blend = 0.5;

  bool chroma_translate = true;
  double chroma_translate_range = 0.05;

  bool chroma_jitter = true;
  double chroma_jitter_sigma = 0.05;

  static AugmentConfig none();
};

/// Applies the enabled augmentations in a fixed order: rotation, scaling,
/// flipping, jitter, auto contrast, chromatic translation, chromatic jitter.
PointCloud augment(const PointCloud& cloud, const AugmentConfig& config, std::uint64_t seed);

/// Row-major N x 9 matrix of (position, normal, color).
MatrixF point_features(const PointCloud& cloud, std::span<const std::uint32_t> indices);

}  // namespace find3d
