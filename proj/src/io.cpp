#include "find3d/io.hpp"

#include "find3d/ply.hpp"

#include <json.hpp>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace find3d::io {

using json = nlohmann::ordered_json;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path.string() + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

// ---------------------------------------------------------------------------
// Configs

namespace {

json model_json(const net::ModelConfig& c) {
  std::vector<std::string> schemes;
  for (auto s : c.scheme_cycle) schemes.emplace_back(sfc::to_string(s));
  json j;
  j["widths"] = c.widths;
  j["heads"] = c.heads;
  j["enc_depth"] = c.enc_depth;
  j["dec_depth"] = c.dec_depth;
  j["block_size"] = c.block_size;
  j["scheme_cycle"] = schemes;
  j["pool_stride"] = c.pool_stride;
  j["ffn_ratio"] = c.ffn_ratio;
  j["head_hidden"] = c.head_hidden;
  j["out_dim"] = c.out_dim;
  j["voxel_size"] = c.voxel_size;
  j["init_seed"] = c.init_seed;
  return j;
}

// Reads j[key] into out when present and records the key as consumed.
template <typename T>
void take(const json& j, const char* key, T& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!seen.count(it.key())) throw std::invalid_argument("unknown key '" + it.key() + "' in " + where);
  }
}

net::ModelConfig model_from(const json& j) {
  net::ModelConfig c;
  std::set<std::string> seen;
  take(j, "widths", c.widths, seen);
  take(j, "heads", c.heads, seen);
  take(j, "enc_depth", c.enc_depth, seen);
  take(j, "dec_depth", c.dec_depth, seen);
  take(j, "block_size", c.block_size, seen);
  std::vector<std::string> schemes;
  take(j, "scheme_cycle", schemes, seen);
  if (!schemes.empty()) {
    c.scheme_cycle.clear();
    for (const auto& s : schemes) c.scheme_cycle.push_back(sfc::parse_scheme(s));
  }
  take(j, "pool_stride", c.pool_stride, seen);
  take(j, "ffn_ratio", c.ffn_ratio, seen);
  take(j, "head_hidden", c.head_hidden, seen);
  take(j, "out_dim", c.out_dim, seen);
  take(j, "voxel_size", c.voxel_size, seen);
  take(j, "init_seed", c.init_seed, seen);
  reject_unknown(j, seen, "model config");
  c.validate();
  return c;
}

json augment_json(const AugmentConfig& a) {
  json j;
  j["rotate"] = a.rotate;
  j["scale"] = a.scale;
  j["scale_min"] = a.scale_min;
  j["scale_max"] = a.scale_max;
  j["flip"] = a.flip;
  j["flip_p"] = a.flip_p;
  j["flip_x"] = a.flip_x;
  j["flip_y"] = a.flip_y;
  j["jitter"] = a.jitter;
  j["jitter_sigma"] = a.jitter_sigma;
  j["jitter_clip"] = a.jitter_clip;
  j["auto_contrast"] = a.auto_contrast;
  j["auto_contrast_p"] = a.auto_contrast_p;
  j["auto_contrast_blend"] = a.auto_contrast_blend;
  j["chroma_translate"] = a.chroma_translate;
  j["chroma_translate_range"] = a.chroma_translate_range;
  j["chroma_jitter"] = a.chroma_jitter;
  j["chroma_jitter_sigma"] = a.chroma_jitter_sigma;
  return j;
}

AugmentConfig augment_from(const json& j, AugmentConfig a) {
  std::set<std::string> seen;
  take(j, "rotate", a.rotate, seen);
  take(j, "scale", a.scale, seen);
  take(j, "scale_min", a.scale_min, seen);
  take(j, "scale_max", a.scale_max, seen);
  take(j, "flip", a.flip, seen);
  take(j, "flip_p", a.flip_p, seen);
  take(j, "flip_x", a.flip_x, seen);
  take(j, "flip_y", a.flip_y, seen);
  take(j, "jitter", a.jitter, seen);
  take(j, "jitter_sigma", a.jitter_sigma, seen);
  take(j, "jitter_clip", a.jitter_clip, seen);
  take(j, "auto_contrast", a.auto_contrast, seen);
  take(j, "auto_contrast_p", a.auto_contrast_p, seen);
  take(j, "auto_contrast_blend", a.auto_contrast_blend, seen);
  take(j, "chroma_translate", a.chroma_translate, seen);
  take(j, "chroma_translate_range", a.chroma_translate_range, seen);
  take(j, "chroma_jitter", a.chroma_jitter, seen);
  take(j, "chroma_jitter_sigma", a.chroma_jitter_sigma, seen);
  reject_unknown(j, seen, "augment config");
  return a;
}

}  // namespace

std::string model_config_to_json(const net::ModelConfig& config) { return model_json(config).dump(); }

net::ModelConfig model_config_from_json(const std::string& text) { return model_from(json::parse(text)); }

std::string train_config_to_json(const train::TrainConfig& c) {
  json j;
  j["batch_objects"] = c.batch_objects;
  j["epochs"] = c.epochs;
  j["lr_start"] = c.lr_start;
  j["lr_end"] = c.lr_end;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["split_ratio"] = c.split_ratio;
  j["temperature"] = c.temperature;
  j["seed"] = c.seed;
  j["augment"] = augment_json(c.augment);
  return j.dump(2);
}

train::TrainConfig train_config_from_json(const std::string& text, const train::TrainConfig& defaults) {
  const json j = json::parse(text);
  train::TrainConfig c = defaults;
  std::set<std::string> seen{"model"};
  take(j, "batch_objects", c.batch_objects, seen);
  take(j, "epochs", c.epochs, seen);
  take(j, "lr_start", c.lr_start, seen);
  take(j, "lr_end", c.lr_end, seen);
  take(j, "beta1", c.beta1, seen);
  take(j, "beta2", c.beta2, seen);
  take(j, "adam_eps", c.adam_eps, seen);
  take(j, "split_ratio", c.split_ratio, seen);
  take(j, "temperature", c.temperature, seen);
  take(j, "seed", c.seed, seen);
  seen.insert("augment");
  if (auto it = j.find("augment"); it != j.end()) c.augment = augment_from(*it, c.augment);
  reject_unknown(j, seen, "train config");
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Binary helpers

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, std::string what) : bytes_(bytes), end_(end), what_(std::move(what)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw std::runtime_error(what_ + ": truncated data");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::uint32_t crc_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::string encode_checkpoint(const net::ModelState& state) {
  std::string out = "FND3";
  put_u32(out, kCheckpointVersion);
  const std::string config = model_config_to_json(state.config);
  put_u32(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  put_u32(out, static_cast<std::uint32_t>(state.params.size()));
  for (const auto& [name, tensor] : state.params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(tensor.shape.dims.size()));
    for (auto d : tensor.shape.dims) put_u32(out, static_cast<std::uint32_t>(d));
    const float* data = tensor.value.data();
    for (Eigen::Index i = 0; i < tensor.value.size(); ++i) put_f32(out, data[i]);
  }
  put_u32(out, crc_of(out.data(), out.size()));
  return out;
}

net::ModelState decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 4, "FND3") != 0) throw std::runtime_error("checkpoint: bad magic");
  const std::size_t body = bytes.size() - 4;
  Reader crc_reader(bytes, bytes.size(), "checkpoint");
  crc_reader.str(body);
  if (crc_reader.u32() != crc_of(bytes.data(), body)) throw std::runtime_error("checkpoint: CRC mismatch");

  Reader r(bytes, body, "checkpoint");
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  net::ModelState state;
  state.config = model_config_from_json(r.str(r.u32()));
  const auto expected = net::parameter_shapes(state.config);
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.str(r.u32());
    net::Shape shape;
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t d = 0; d < ndim; ++d) shape.dims.push_back(r.u32());
    auto it = expected.find(name);
    if (it == expected.end()) throw std::runtime_error("checkpoint: unexpected parameter '" + name + "'");
    if (!(it->second == shape)) throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    const Eigen::Index rows = shape.dims.size() == 2 ? static_cast<Eigen::Index>(shape.dims[0]) : 1;
    const Eigen::Index cols = static_cast<Eigen::Index>(shape.dims.back());
    MatrixF value(rows, cols);
    for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = r.f32();
    state.params.emplace(name, net::Tensor{std::move(shape), std::move(value)});
  }
  if (r.remaining() != 0) throw std::runtime_error("checkpoint: trailing bytes");
  if (state.params.size() != expected.size()) throw std::runtime_error("checkpoint: missing parameters");
  return state;
}

void save_checkpoint(const fs::path& path, const net::ModelState& state) { write_file(path, encode_checkpoint(state)); }

net::ModelState load_checkpoint(const fs::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_embeddings(const fs::path& path, const MatrixF& rows) {
  std::string out = "FNDE";
  put_u32(out, static_cast<std::uint32_t>(rows.rows()));
  put_u32(out, static_cast<std::uint32_t>(rows.cols()));
  for (Eigen::Index i = 0; i < rows.size(); ++i) put_f32(out, rows.data()[i]);
  write_file(path, out);
}

MatrixF read_embeddings(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 12 || bytes.compare(0, 4, "FNDE") != 0) throw std::runtime_error(path.string() + ": bad magic");
  Reader r(bytes, bytes.size(), path.string());
  r.str(4);
  const std::uint32_t rows = r.u32(), dim = r.u32();
  if (r.remaining() != static_cast<std::size_t>(rows) * dim * 4) throw std::runtime_error(path.string() + ": size mismatch");
  MatrixF m(rows, dim);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32();
  return m;
}

// ---------------------------------------------------------------------------
// Annotations

void write_annotations(const fs::path& path, const std::vector<train::LabelRecord>& records) {
  fs::path sidecar = path;
  sidecar += ".fnde";
  const int dim = records.empty() ? 0 : static_cast<int>(records.front().embedding.size());
  MatrixF emb(static_cast<Eigen::Index>(records.size()), dim);
  std::string lines;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.embedding.size() != dim) throw std::invalid_argument("annotations: embeddings differ in dimension");
    emb.row(static_cast<Eigen::Index>(i)) = r.embedding.transpose();
    json j;
    j["object_id"] = r.object_id;
    j["label_text"] = r.label_text;
    j["point_indices"] = r.point_indices;
    j["embedding_ref"] = {{"file", sidecar.filename().string()}, {"row", i}};
    lines += j.dump() + '\n';
  }
  write_file(path, lines);
  write_embeddings(sidecar, emb);
}

std::vector<train::LabelRecord> read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open for reading");
  std::map<std::string, MatrixF> sidecars;
  std::vector<train::LabelRecord> out;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      train::LabelRecord r;
      r.object_id = j.at("object_id").get<std::string>();
      r.label_text = j.at("label_text").get<std::string>();
      r.point_indices = j.at("point_indices").get<std::vector<std::uint32_t>>();
      if (r.point_indices.empty()) throw std::runtime_error("empty point_indices");
      const auto& ref = j.at("embedding_ref");
      const auto file = ref.at("file").get<std::string>();
      const auto row = ref.at("row").get<std::size_t>();
      auto it = sidecars.find(file);
      if (it == sidecars.end()) it = sidecars.emplace(file, read_embeddings(path.parent_path() / file)).first;
      if (row >= static_cast<std::size_t>(it->second.rows())) throw std::runtime_error("embedding row out of range");
      r.embedding = it->second.row(static_cast<Eigen::Index>(row)).transpose();
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

Manifest read_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  Manifest m;
  m.name = j.value("name", std::string{});
  const fs::path base = path.parent_path();
  for (const auto& o : j.at("objects")) {
    bench::BenchmarkObject obj;
    obj.id = o.at("id").get<std::string>();
    obj.category = o.at("category").get<std::string>();
    obj.cloud = read_ply(base / o.at("cloud").get<std::string>());
    const fs::path labels_path = base / o.at("labels").get<std::string>();
    try {
      const json labels = json::parse(read_file(labels_path));
      obj.part_names = labels.at("part_names").get<std::vector<std::string>>();
      obj.gt = labels.at("gt").get<std::vector<std::int32_t>>();
      obj.validate();
    } catch (const std::exception& e) {
      throw std::runtime_error(labels_path.string() + ": " + e.what());
    }
    m.objects.push_back(std::move(obj));
  }
  return m;
}

fs::path write_manifest(const fs::path& dir, const std::string& name, const std::vector<bench::BenchmarkObject>& objects,
                        const std::string& filename) {
  fs::create_directories(dir);
  json j;
  j["name"] = name;
  j["objects"] = json::array();
  for (const auto& o : objects) {
    o.validate();
    const std::string cloud = o.id + ".ply", labels = o.id + ".labels.json";
    write_ply(dir / cloud, o.cloud);
    json l;
    l["part_names"] = o.part_names;
    l["gt"] = o.gt;
    write_file(dir / labels, l.dump());
    j["objects"].push_back({{"id", o.id}, {"category", o.category}, {"cloud", cloud}, {"labels", labels}});
  }
  const fs::path path = dir / filename;
  write_file(path, j.dump(2));
  return path;
}

}  // namespace find3d::io
