#include "find3d/engine.hpp"

#include <httplib.h>
#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>

namespace find3d::engine {

using nlohmann::json;

void Camera::validate() const {
  if (!(focal > 0.0)) throw std::invalid_argument("camera focal length must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera image size must be positive");
  if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
    throw std::invalid_argument("camera principal point must lie inside the image");
  }
}

std::optional<Eigen::Vector2d> Camera::project(const Vec3& world) const {
  const Vec3 c = to_camera(world);
  if (c.z() <= 1e-9) return std::nullopt;
  return Eigen::Vector2d(focal * c.x() / c.z() + cx, focal * c.y() / c.z() + cy);
}

Vec3 Camera::unproject(double u, double v, double depth) const {
  const Vec3 c((u - cx) * depth / focal, (v - cy) * depth / focal, depth);
  return extrinsics.inverse().apply(c);
}

Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-9) right = forward.cross(Vec3::UnitX());
  right.normalize();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.extrinsics.rotation.row(0) = right.transpose();
  cam.extrinsics.rotation.row(1) = down.transpose();
  cam.extrinsics.rotation.row(2) = forward.transpose();
  cam.extrinsics.translation = -(cam.extrinsics.rotation * eye);
  cam.focal = focal;
  cam.width = width;
  cam.height = height;
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.validate();
  return cam;
}

std::vector<Camera> ring_cameras(const RenderConfig& config) {
  if (config.n_views <= 0) throw std::invalid_argument("n_views must be positive");
  if (!(config.camera_radius > 0.0)) throw std::invalid_argument("camera radius must be positive");
  std::vector<Camera> out;
  const double elev = config.elevation_deg * std::numbers::pi / 180.0;
  for (int i = 0; i < config.n_views; ++i) {
    const double az = 2.0 * std::numbers::pi * i / config.n_views;
    const double e = i % 2 == 0 ? elev : -elev;
    const Vec3 eye = config.camera_radius * Vec3(std::cos(e) * std::cos(az), std::cos(e) * std::sin(az), std::sin(e));
    out.push_back(look_at(eye, Vec3::Zero(), Vec3::UnitZ(), config.focal, config.width, config.height));
  }
  return out;
}

RenderedView render(const PointCloud& cloud, const Camera& camera, int view_id, int splat_radius,
                    std::span<const std::uint32_t> subset) {
  if (cloud.empty()) throw std::invalid_argument("render: empty cloud");
  if (splat_radius < 0) throw std::invalid_argument("render: negative splat radius");
  camera.validate();
  RenderedView view;
  view.view_id = view_id;
  view.camera = camera;
  view.owner.assign(camera.area(), kNoOwner);
  view.depth.assign(camera.area(), std::numeric_limits<float>::infinity());
  view.rgb.assign(camera.area(), {255, 255, 255});

  const auto draw = [&](std::uint32_t i) {
    const Point& p = cloud.points[i];
    const Vec3 c = camera.to_camera(p.position);
    if (c.z() <= 1e-9) return;
    const double u = camera.focal * c.x() / c.z() + camera.cx;
    const double v = camera.focal * c.y() / c.z() + camera.cy;
    if (!std::isfinite(u) || !std::isfinite(v)) return;
    const auto px = static_cast<long>(std::floor(u)), py = static_cast<long>(std::floor(v));
    const auto z = static_cast<float>(c.z());
    std::array<std::uint8_t, 3> color;
    for (int k = 0; k < 3; ++k) color[k] = static_cast<std::uint8_t>(std::lround(std::clamp(p.color[k], 0.0, 1.0) * 255.0));
    for (long y = py - splat_radius; y <= py + splat_radius; ++y) {
      if (y < 0 || y >= camera.height) continue;
      for (long x = px - splat_radius; x <= px + splat_radius; ++x) {
        if (x < 0 || x >= camera.width) continue;
        const std::size_t pix = static_cast<std::size_t>(y) * camera.width + static_cast<std::size_t>(x);
        const auto idx = static_cast<std::int32_t>(i);
        if (z < view.depth[pix] || (z == view.depth[pix] && idx < view.owner[pix])) {
          view.depth[pix] = z;
          view.owner[pix] = idx;
          view.rgb[pix] = color;
        }
      }
    }
  };
  if (subset.empty()) {
    for (std::uint32_t i = 0; i < cloud.size(); ++i) draw(i);
  } else {
    for (std::uint32_t i : subset) {
      if (i >= cloud.size()) throw std::out_of_range("render: subset index out of range");
      draw(i);
    }
  }
  return view;
}

std::vector<RenderedView> render_views(const PointCloud& cloud, const RenderConfig& config,
                                       std::span<const std::uint32_t> subset) {
  std::vector<RenderedView> out;
  int id = 0;
  for (const Camera& cam : ring_cameras(config)) out.push_back(render(cloud, cam, id++, config.splat_radius, subset));
  return out;
}

const char* to_string(FilterOutcome outcome) {
  switch (outcome) {
    case FilterOutcome::Keep: return "keep";
    case FilterOutcome::TooSmall: return "too_small";
    case FilterOutcome::TooLarge: return "too_large";
    case FilterOutcome::LowConfidence: return "low_confidence";
  }
  return "unknown";
}

FilterOutcome filter_mask(const MaskRecord& mask, std::size_t image_area, const FilterConfig& config) {
  const auto n = static_cast<double>(mask.pixels.size());
  const auto area = static_cast<double>(image_area);
  if (n < config.min_pixels * (area / config.reference_area)) return FilterOutcome::TooSmall;
  if (n > config.max_fraction * area) return FilterOutcome::TooLarge;
  if (mask.confidence < config.min_confidence) return FilterOutcome::LowConfidence;
  return FilterOutcome::Keep;
}

std::vector<MaskRecord> merge_masks(const std::vector<MaskRecord>& masks) {
  std::map<std::pair<int, std::string>, MaskRecord> groups;
  for (const auto& m : masks) {
    auto [it, inserted] = groups.try_emplace({m.view_id, m.label_text}, m);
    if (inserted) continue;
    MaskRecord& g = it->second;
    g.pixels.insert(g.pixels.end(), m.pixels.begin(), m.pixels.end());
    g.confidence = std::max(g.confidence, m.confidence);
  }
  std::vector<MaskRecord> out;
  out.reserve(groups.size());
  for (auto& [key, m] : groups) {
    std::sort(m.pixels.begin(), m.pixels.end());
    m.pixels.erase(std::unique(m.pixels.begin(), m.pixels.end()), m.pixels.end());
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<std::uint32_t> backproject(const MaskRecord& mask, const RenderedView& view) {
  std::vector<std::uint32_t> out;
  for (std::uint32_t p : mask.pixels) {
    if (p >= view.owner.size()) throw std::out_of_range("mask pixel outside the image");
    if (view.owner[p] != kNoOwner) out.push_back(static_cast<std::uint32_t>(view.owner[p]));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

OracleProvider::OracleProvider(const PointCloud& canonical, std::vector<std::int32_t> part_ids,
                               std::vector<std::string> part_names)
    : part_ids_(std::move(part_ids)), part_names_(std::move(part_names)) {
  if (part_ids_.size() != canonical.size()) throw std::invalid_argument("oracle: one part id per point required");
  for (auto id : part_ids_) {
    if (id != kUnlabeled && (id < 0 || static_cast<std::size_t>(id) >= part_names_.size())) {
      throw std::invalid_argument("oracle: part id out of range");
    }
  }
  positions_.reserve(canonical.size());
  for (const auto& p : canonical.points) positions_.push_back(p.position);
}

std::vector<MaskRecord> OracleProvider::propose_masks(const RenderedView& view) {
  std::vector<MaskRecord> masks(part_names_.size());
  for (std::size_t p = 0; p < view.owner.size(); ++p) {
    const std::int32_t o = view.owner[p];
    if (o == kNoOwner || static_cast<std::size_t>(o) >= part_ids_.size()) continue;
    const std::int32_t part = part_ids_[static_cast<std::size_t>(o)];
    if (part != kUnlabeled) masks[static_cast<std::size_t>(part)].pixels.push_back(static_cast<std::uint32_t>(p));
  }
  std::vector<MaskRecord> out;
  for (auto& m : masks) {
    if (m.pixels.empty()) continue;
    m.view_id = view.view_id;
    m.confidence = 1.0;
    out.push_back(std::move(m));
  }
  return out;
}

std::string OracleProvider::name_mask(const RenderedView& view, const MaskRecord& mask) {
  std::vector<std::size_t> votes(part_names_.size(), 0);
  for (std::uint32_t p : mask.pixels) {
    const std::int32_t o = view.owner.at(p);
    if (o == kNoOwner || static_cast<std::size_t>(o) >= part_ids_.size()) continue;
    const std::int32_t part = part_ids_[static_cast<std::size_t>(o)];
    if (part != kUnlabeled) ++votes[static_cast<std::size_t>(part)];
  }
  const auto best = std::max_element(votes.begin(), votes.end());
  if (best == votes.end() || *best == 0) return {};
  return part_names_[static_cast<std::size_t>(best - votes.begin())];
}

bool OracleProvider::orientation_vote(const RenderedView& view) {
  const Camera& cam = view.camera;
  std::size_t owned = 0, matched = 0;
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const std::size_t p = view.pixel(x, y);
      const std::int32_t o = view.owner[p];
      if (o == kNoOwner || static_cast<std::size_t>(o) >= positions_.size()) continue;
      ++owned;
      const double d = view.depth[p];
      // Splats reach a few pixels past the projected center.
      const double tol = 8.0 * d / cam.focal;
      if ((cam.unproject(x + 0.5, y + 0.5, d) - positions_[static_cast<std::size_t>(o)]).norm() <= tol) ++matched;
    }
  }
  return owned > 0 && matched * 10 >= owned * 9;
}

// ---------------------------------------------------------------------------
// PNG and RLE

std::string encode_png(const RenderedView& view) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(view.camera.width);
  image.height = static_cast<png_uint_32>(view.camera.height);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer;
  buffer.reserve(view.rgb.size() * 3);
  for (const auto& c : view.rgb) buffer.insert(buffer.end(), c.begin(), c.end());
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, buffer.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, buffer.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

DecodedImage decode_png(const std::string& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw std::runtime_error(std::string("png decode: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  DecodedImage out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.rgb.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png decode: ") + image.message);
  }
  return out;
}

Rle encode_rle(const std::vector<std::uint32_t>& pixels, int width, int height) {
  Rle rle{height, width, {}};
  const auto total = static_cast<std::uint64_t>(width) * static_cast<std::uint64_t>(height);
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < pixels.size();) {
    if (pixels[i] >= total || (i > 0 && pixels[i] <= pixels[i - 1])) {
      throw std::invalid_argument("rle: pixels must be sorted, distinct and inside the image");
    }
    rle.counts.push_back(static_cast<std::uint32_t>(pixels[i] - pos));
    std::size_t j = i + 1;
    while (j < pixels.size() && pixels[j] == pixels[j - 1] + 1) ++j;
    rle.counts.push_back(static_cast<std::uint32_t>(j - i));
    pos = pixels[j - 1] + 1ULL;
    i = j;
  }
  if (pos < total) rle.counts.push_back(static_cast<std::uint32_t>(total - pos));
  return rle;
}

std::vector<std::uint32_t> decode_rle(const Rle& rle) {
  const auto total = static_cast<std::uint64_t>(rle.width) * static_cast<std::uint64_t>(rle.height);
  std::vector<std::uint32_t> out;
  std::uint64_t pos = 0;
  for (std::size_t k = 0; k < rle.counts.size(); ++k) {
    const std::uint64_t next = pos + rle.counts[k];
    if (next > total) throw std::invalid_argument("rle: runs exceed the image size");
    if (k % 2 == 1) {
      for (std::uint64_t p = pos; p < next; ++p) out.push_back(static_cast<std::uint32_t>(p));
    }
    pos = next;
  }
  return out;
}

std::string rle_to_json(const Rle& rle) {
  return json{{"size", {rle.height, rle.width}}, {"counts", rle.counts}}.dump();
}

namespace {

Rle rle_from(const json& j) {
  Rle rle;
  const auto& size = j.at("size");
  rle.height = size.at(0).get<int>();
  rle.width = size.at(1).get<int>();
  rle.counts = j.at("counts").get<std::vector<std::uint32_t>>();
  return rle;
}

std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto path_start = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) return {url, ""};
  std::string prefix = url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, path_start), prefix};
}

httplib::Result checked(httplib::Result res, const std::string& what) {
  if (!res) throw std::runtime_error(what + ": request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw std::runtime_error(what + ": HTTP " + std::to_string(res->status) + ": " + res->body);
  }
  return res;
}

}  // namespace

Rle rle_from_json(const std::string& text) { return rle_from(json::parse(text)); }

RemoteProvider::RemoteProvider(std::string base_url) {
  if (base_url.empty()) throw std::invalid_argument("remote annotator: empty base URL");
  std::tie(host_, prefix_) = split_url(base_url);
}

std::vector<MaskRecord> RemoteProvider::propose_masks(const RenderedView& view) {
  httplib::Client client(host_);
  client.set_read_timeout(120, 0);
  const auto res = checked(client.Post(prefix_ + "/masks", encode_png(view), "image/png"), "/masks");
  const json reply = json::parse(res->body);
  std::vector<MaskRecord> out;
  for (const auto& m : reply.at("masks")) {
    const Rle rle = rle_from(m.at("rle"));
    if (rle.width != view.camera.width || rle.height != view.camera.height) {
      throw std::runtime_error("/masks: mask size does not match the image");
    }
    MaskRecord rec;
    rec.view_id = view.view_id;
    rec.pixels = decode_rle(rle);
    rec.confidence = m.at("confidence").get<double>();
    out.push_back(std::move(rec));
  }
  return out;
}

std::string RemoteProvider::name_mask(const RenderedView& view, const MaskRecord& mask) {
  httplib::Client client(host_);
  client.set_read_timeout(120, 0);
  const httplib::MultipartFormDataItems items = {
      {"image", encode_png(view), "view.png", "image/png"},
      {"mask", rle_to_json(encode_rle(mask.pixels, view.camera.width, view.camera.height)), "mask.json",
       "application/json"},
  };
  const auto res = checked(client.Post(prefix_ + "/name", items), "/name");
  return json::parse(res->body).at("text").get<std::string>();
}

bool RemoteProvider::orientation_vote(const RenderedView& view) {
  httplib::Client client(host_);
  client.set_read_timeout(120, 0);
  const auto res = checked(client.Post(prefix_ + "/orient", encode_png(view), "image/png"), "/orient");
  std::string answer;
  for (char c : res->body) {
    if (!std::isspace(static_cast<unsigned char>(c))) answer += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  if (answer == "yes") return true;
  if (answer == "no") return false;
  throw std::runtime_error("/orient: expected yes or no, got '" + res->body + "'");
}

// ---------------------------------------------------------------------------

OrientationChoice choose_orientation(const PointCloud& cloud, const std::vector<Mat3>& candidates,
                                     AnnotationProvider& provider, const RenderConfig& config) {
  if (candidates.empty()) throw std::invalid_argument("choose_orientation: no candidate rotations");
  OrientationChoice out;
  double best = -1.0;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    RigidTransform t;
    t.rotation = candidates[c];
    const auto views = render_views(transform_cloud(cloud, t), config);
    std::size_t yes = 0;
    for (const auto& v : views) yes += provider.orientation_vote(v) ? 1 : 0;
    const double fraction = static_cast<double>(yes) / static_cast<double>(views.size());
    out.yes_fraction.push_back(fraction);
    if (fraction > best) {
      best = fraction;
      out.index = c;
    }
  }
  return out;
}

LabelResult build_labels(const std::string& object_id, const PointCloud& cloud, AnnotationProvider& provider,
                         query::TextEmbedder& embedder, const LabelConfig& config) {
  if (cloud.empty()) throw std::invalid_argument("build_labels: object '" + object_id + "' has no points");
  const PointCloud norm = normalize(cloud).first;
  const SampleResult sample = voxel_sample(norm, config.voxel_size);
  const auto views = render_views(norm, config.render, sample.kept);

  LabelResult result;
  std::vector<MaskRecord> named;
  for (const auto& view : views) {
    std::vector<MaskRecord> masks;
    try {
      masks = provider.propose_masks(view);
    } catch (const std::exception& e) {
      throw std::runtime_error("object '" + object_id + "' view " + std::to_string(view.view_id) +
                               ": mask proposal failed: " + e.what());
    }
    result.stats.proposed += masks.size();
    for (std::size_t k = 0; k < masks.size(); ++k) {
      MaskRecord& m = masks[k];
      m.view_id = view.view_id;
      std::sort(m.pixels.begin(), m.pixels.end());
      m.pixels.erase(std::unique(m.pixels.begin(), m.pixels.end()), m.pixels.end());
      if (!m.pixels.empty() && m.pixels.back() >= view.owner.size()) {
        throw std::runtime_error("object '" + object_id + "' view " + std::to_string(view.view_id) + " mask " +
                                 std::to_string(k) + ": pixel outside the image");
      }
      switch (filter_mask(m, view.camera.area(), config.filter)) {
        case FilterOutcome::TooSmall: ++result.stats.too_small; continue;
        case FilterOutcome::TooLarge: ++result.stats.too_large; continue;
        case FilterOutcome::LowConfidence: ++result.stats.low_confidence; continue;
        case FilterOutcome::Keep: break;
      }
      try {
        m.label_text = provider.name_mask(view, m);
      } catch (const std::exception& e) {
        throw std::runtime_error("object '" + object_id + "' view " + std::to_string(view.view_id) + " mask " +
                                 std::to_string(k) + ": naming failed: " + e.what());
      }
      if (m.label_text.empty()) {
        ++result.stats.unnamed;
        continue;
      }
      named.push_back(std::move(m));
    }
  }

  const auto merged = merge_masks(named);
  result.stats.merged = merged.size();
  std::map<std::string, Eigen::VectorXf> embedded;
  for (const auto& m : merged) {
    auto indices = backproject(m, views[static_cast<std::size_t>(m.view_id)]);
    if (indices.empty()) {
      ++result.stats.empty;
      continue;
    }
    auto it = embedded.find(m.label_text);
    if (it == embedded.end()) {
      try {
        it = embedded.emplace(m.label_text, embedder.embed(m.label_text)).first;
      } catch (const std::exception& e) {
        throw std::runtime_error("object '" + object_id + "' view " + std::to_string(m.view_id) + " label '" +
                                 m.label_text + "': embedding failed: " + e.what());
      }
    }
    train::LabelRecord rec;
    rec.object_id = object_id;
    rec.point_indices = std::move(indices);
    rec.label_text = m.label_text;
    rec.embedding = it->second;
    result.records.push_back(std::move(rec));
    result.record_views.push_back(m.view_id);
  }
  result.insufficient = result.records.size() < config.min_labels;
  return result;
}

}  // namespace find3d::engine
