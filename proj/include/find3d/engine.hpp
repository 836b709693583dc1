#pragma once

#include "find3d/cloud.hpp"
#include "find3d/query.hpp"
#include "find3d/train.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace find3d::engine {

/// Pinhole camera: x right, y down, z forward in camera space.
struct Camera {
  RigidTransform extrinsics;  // world -> camera
  double focal = 500.0;
  double cx = 250.0;
  double cy = 250.0;
  int width = 500;
  int height = 500;

  void validate() const;
  std::size_t area() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
  /// Camera-space position of a world point.
  Vec3 to_camera(const Vec3& world) const { return extrinsics.apply(world); }
  /// Continuous pixel coordinates; nullopt behind the camera.
  std::optional<Eigen::Vector2d> project(const Vec3& world) const;
  /// World position of pixel (u, v) at the given camera-space depth.
  Vec3 unproject(double u, double v, double depth) const;
};

Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height);

struct RenderConfig {
  int n_views = 10;
  double camera_radius = 2.5;
  double elevation_deg = 30.0;  // rings at +elevation and -elevation
  double focal = 500.0;
  int width = 500;
  int height = 500;
  int splat_radius = 2;
};

/// Evenly spaced azimuths; even views on the upper ring, odd on the lower.
std::vector<Camera> ring_cameras(const RenderConfig& config);

inline constexpr std::int32_t kNoOwner = -1;

struct RenderedView {
  int view_id = 0;
  Camera camera;
  std::vector<std::int32_t> owner;  // per pixel, row-major; kNoOwner for background
  std::vector<float> depth;         // per pixel; +inf for background
  std::vector<std::array<std::uint8_t, 3>> rgb;

  std::size_t pixel(int x, int y) const { return static_cast<std::size_t>(y) * camera.width + x; }
  bool has_owner(std::size_t p) const { return owner[p] != kNoOwner; }
};

/// Z-buffered square splats. `subset` restricts which points are drawn
/// (empty = all); owner values are always indices into `cloud`.
RenderedView render(const PointCloud& cloud, const Camera& camera, int view_id, int splat_radius,
                    std::span<const std::uint32_t> subset = {});
std::vector<RenderedView> render_views(const PointCloud& cloud, const RenderConfig& config,
                                       std::span<const std::uint32_t> subset = {});

struct MaskRecord {
  int view_id = 0;
  std::vector<std::uint32_t> pixels;  // sorted linear pixel indices
  double confidence = 1.0;
  std::string label_text;
};

enum class FilterOutcome { Keep, TooSmall, TooLarge, LowConfidence };
const char* to_string(FilterOutcome outcome);

struct FilterConfig {
  double min_pixels = 350.0;  // at the reference area
  double max_fraction = 0.2;
  double min_confidence = 0.8;
  double reference_area = 250000.0;
};

FilterOutcome filter_mask(const MaskRecord& mask, std::size_t image_area, const FilterConfig& config = {});

/// Groups by (view_id, label_text), unions pixels, keeps the maximum
/// confidence. Output is sorted by view then label.
std::vector<MaskRecord> merge_masks(const std::vector<MaskRecord>& masks);

/// Sorted distinct owners of the mask's pixels.
std::vector<std::uint32_t> backproject(const MaskRecord& mask, const RenderedView& view);

/// Stand-in for the segmentation, naming and orientation models.
class AnnotationProvider {
 public:
  virtual ~AnnotationProvider() = default;
  virtual std::vector<MaskRecord> propose_masks(const RenderedView& view) = 0;
  virtual std::string name_mask(const RenderedView& view, const MaskRecord& mask) = 0;
  virtual bool orientation_vote(const RenderedView& view) = 0;
};

/// Uses ground-truth part membership: one mask per visible part, named by the
/// part, and an orientation vote that is yes when the depth image unprojects
/// onto the canonical point positions.
class OracleProvider final : public AnnotationProvider {
 public:
  OracleProvider(const PointCloud& canonical, std::vector<std::int32_t> part_ids, std::vector<std::string> part_names);
  std::vector<MaskRecord> propose_masks(const RenderedView& view) override;
  std::string name_mask(const RenderedView& view, const MaskRecord& mask) override;
  bool orientation_vote(const RenderedView& view) override;

 private:
  std::vector<Vec3> positions_;
  std::vector<std::int32_t> part_ids_;
  std::vector<std::string> part_names_;
};

/// HTTP client for an external annotator at base_url (FIND3D_ANNOTATOR_URL):
/// POST /masks   body PNG          -> {"masks":[{"rle":{"size":[h,w],"counts":[...]},"confidence":c}]}
/// POST /name    multipart image+mask -> {"text": "..."}
/// POST /orient  body PNG          -> "yes" | "no"
class RemoteProvider final : public AnnotationProvider {
 public:
  explicit RemoteProvider(std::string base_url);
  std::vector<MaskRecord> propose_masks(const RenderedView& view) override;
  std::string name_mask(const RenderedView& view, const MaskRecord& mask) override;
  bool orientation_vote(const RenderedView& view) override;

 private:
  std::string host_;
  std::string prefix_;
};

/// 8-bit RGB PNG of the view's color buffer.
std::string encode_png(const RenderedView& view);
/// Decodes an 8-bit RGB PNG into (width, height, rgb bytes).
struct DecodedImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};
DecodedImage decode_png(const std::string& bytes);

/// Run-length encoding over the row-major binary mask, starting with a run of
/// zeros.
struct Rle {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;
};
Rle encode_rle(const std::vector<std::uint32_t>& pixels, int width, int height);
std::vector<std::uint32_t> decode_rle(const Rle& rle);
std::string rle_to_json(const Rle& rle);
Rle rle_from_json(const std::string& text);

/// Highest share of yes votes over n_views renders of each rotated candidate;
/// ties keep the earliest candidate.
struct OrientationChoice {
  std::size_t index = 0;
  std::vector<double> yes_fraction;
};
OrientationChoice choose_orientation(const PointCloud& cloud, const std::vector<Mat3>& candidates,
                                     AnnotationProvider& provider, const RenderConfig& config = {});

struct LabelConfig {
  RenderConfig render;
  FilterConfig filter;
  double voxel_size = kDefaultVoxelSize;
  std::size_t min_labels = 2;
};

struct LabelStats {
  std::size_t proposed = 0;
  std::size_t too_small = 0;
  std::size_t too_large = 0;
  std::size_t low_confidence = 0;
  std::size_t unnamed = 0;
  std::size_t merged = 0;  // masks after merging
  std::size_t empty = 0;   // merged masks that back-projected to no point
};

struct LabelResult {
  std::vector<train::LabelRecord> records;  // sorted by view, then label text
  std::vector<int> record_views;            // view id of each record
  bool insufficient = false;                // fewer than min_labels records
  LabelStats stats;
};

/// Renders the voxel-kept points, asks the provider for masks, filters, names,
/// merges per view and back-projects. Indices in the records refer to `cloud`.
LabelResult build_labels(const std::string& object_id, const PointCloud& cloud, AnnotationProvider& provider,
                         query::TextEmbedder& embedder, const LabelConfig& config = {});

}  // namespace find3d::engine
