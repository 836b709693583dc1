#include "find3d/ply.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace find3d {
namespace {

static_assert(std::endian::native == std::endian::little, "binary PLY I/O assumes a little-endian host");

enum class ScalarType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

ScalarType parse_type(const std::string& name) {
  static const std::map<std::string, ScalarType> kTypes = {
      {"char", ScalarType::Int8},     {"int8", ScalarType::Int8},       {"uchar", ScalarType::UInt8},
      {"uint8", ScalarType::UInt8},   {"short", ScalarType::Int16},     {"int16", ScalarType::Int16},
      {"ushort", ScalarType::UInt16}, {"uint16", ScalarType::UInt16},   {"int", ScalarType::Int32},
      {"int32", ScalarType::Int32},   {"uint", ScalarType::UInt32},     {"uint32", ScalarType::UInt32},
      {"float", ScalarType::Float32}, {"float32", ScalarType::Float32}, {"double", ScalarType::Float64},
      {"float64", ScalarType::Float64}};
  auto it = kTypes.find(name);
  if (it == kTypes.end()) throw std::runtime_error("ply: unsupported property type '" + name + "'");
  return it->second;
}

std::size_t type_size(ScalarType t) {
  switch (t) {
    case ScalarType::Int8:
    case ScalarType::UInt8: return 1;
    case ScalarType::Int16:
    case ScalarType::UInt16: return 2;
    case ScalarType::Int32:
    case ScalarType::UInt32:
    case ScalarType::Float32: return 4;
    case ScalarType::Float64: return 8;
  }
  return 0;
}

bool is_integer(ScalarType t) { return t != ScalarType::Float32 && t != ScalarType::Float64; }

template <typename T>
T load(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

double decode(ScalarType t, const char* p) {
  switch (t) {
    case ScalarType::Int8: return load<std::int8_t>(p);
    case ScalarType::UInt8: return load<std::uint8_t>(p);
    case ScalarType::Int16: return load<std::int16_t>(p);
    case ScalarType::UInt16: return load<std::uint16_t>(p);
    case ScalarType::Int32: return load<std::int32_t>(p);
    case ScalarType::UInt32: return load<std::uint32_t>(p);
    case ScalarType::Float32: return load<float>(p);
    case ScalarType::Float64: return load<double>(p);
  }
  return 0.0;
}

struct Property {
  std::string name;
  ScalarType type;
};

struct Header {
  bool binary = false;
  std::size_t vertex_count = 0;
  std::vector<Property> vertex_props;
};

Header read_header(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.substr(0, 3) != "ply") throw std::runtime_error("ply: missing magic");
  Header h;
  bool have_format = false;
  bool in_vertex = false;
  bool seen_vertex = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word.empty() || word == "comment" || word == "obj_info") continue;
    if (word == "end_header") {
      if (!have_format) throw std::runtime_error("ply: missing format line");
      if (!seen_vertex) throw std::runtime_error("ply: no vertex element");
      return h;
    }
    if (word == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt == "ascii") {
        h.binary = false;
      } else if (fmt == "binary_little_endian") {
        h.binary = true;
      } else {
        throw std::runtime_error("ply: unsupported format '" + fmt + "'");
      }
      have_format = true;
    } else if (word == "element") {
      std::string name;
      std::size_t count = 0;
      ss >> name >> count;
      if (name == "vertex") {
        if (seen_vertex) throw std::runtime_error("ply: duplicate vertex element");
        h.vertex_count = count;
        in_vertex = seen_vertex = true;
      } else {
        if (!seen_vertex) throw std::runtime_error("ply: element '" + name + "' precedes vertex");
        in_vertex = false;
      }
    } else if (word == "property") {
      if (!in_vertex) continue;
      std::string type;
      ss >> type;
      if (type == "list") throw std::runtime_error("ply: list properties on vertices are not supported");
      std::string name;
      ss >> name;
      h.vertex_props.push_back({name, parse_type(type)});
    } else {
      throw std::runtime_error("ply: unexpected header line '" + line + "'");
    }
  }
  throw std::runtime_error("ply: truncated header");
}

}  // namespace

PointCloud read_ply(std::istream& in) {
  const Header h = read_header(in);

  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < h.vertex_props.size(); ++i) slot[h.vertex_props[i].name] = i;
  const auto find = [&](const char* name) -> std::optional<std::size_t> {
    auto it = slot.find(name);
    if (it == slot.end()) return std::nullopt;
    return it->second;
  };
  const auto x = find("x"), y = find("y"), z = find("z");
  if (!x || !y || !z) throw std::runtime_error("ply: vertex element lacks x/y/z");
  const auto nx = find("nx"), ny = find("ny"), nz = find("nz");
  const auto r = find("red"), g = find("green"), b = find("blue");
  const bool has_normals = nx && ny && nz;
  const bool has_colors = r && g && b;

  std::vector<double> values(h.vertex_props.size());
  std::vector<std::size_t> offsets(h.vertex_props.size());
  std::size_t stride = 0;
  for (std::size_t i = 0; i < h.vertex_props.size(); ++i) {
    offsets[i] = stride;
    stride += type_size(h.vertex_props[i].type);
  }
  std::vector<char> record(stride);

  const auto color_scale = [&](std::size_t s) { return is_integer(h.vertex_props[s].type) ? 1.0 / 255.0 : 1.0; };

  PointCloud cloud;
  cloud.points.resize(h.vertex_count);
  for (std::size_t v = 0; v < h.vertex_count; ++v) {
    if (h.binary) {
      if (!in.read(record.data(), static_cast<std::streamsize>(stride))) {
        throw std::runtime_error("ply: truncated binary data at vertex " + std::to_string(v));
      }
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = decode(h.vertex_props[i].type, record.data() + offsets[i]);
    } else {
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (!(in >> values[i])) throw std::runtime_error("ply: truncated ascii data at vertex " + std::to_string(v));
        if (h.vertex_props[i].type == ScalarType::Float32) values[i] = static_cast<float>(values[i]);
      }
    }
    Point& p = cloud.points[v];
    p.position = {values[*x], values[*y], values[*z]};
    if (has_normals) p.normal = {values[*nx], values[*ny], values[*nz]};
    if (has_colors) {
      p.color = {values[*r] * color_scale(*r), values[*g] * color_scale(*g), values[*b] * color_scale(*b)};
      p.color = p.color.cwiseMax(0.0).cwiseMin(1.0);
    }
  }
  return cloud;
}

PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_ply(in);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

namespace {

std::uint8_t to_u8(double c) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0));
}

}  // namespace

void write_ply(std::ostream& out, const PointCloud& cloud, PlyFormat format) {
  out << "ply\n"
      << "format " << (format == PlyFormat::Ascii ? "ascii" : "binary_little_endian") << " 1.0\n"
      << "element vertex " << cloud.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n"
      << "property float nx\nproperty float ny\nproperty float nz\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "end_header\n";
  if (format == PlyFormat::Ascii) {
    std::ostringstream line;
    line.precision(9);
    for (const auto& p : cloud.points) {
      line.str("");
      line << static_cast<float>(p.position.x()) << ' ' << static_cast<float>(p.position.y()) << ' '
           << static_cast<float>(p.position.z()) << ' ' << static_cast<float>(p.normal.x()) << ' '
           << static_cast<float>(p.normal.y()) << ' ' << static_cast<float>(p.normal.z()) << ' '
           << int{to_u8(p.color.x())} << ' ' << int{to_u8(p.color.y())} << ' ' << int{to_u8(p.color.z())} << '\n';
      out << line.str();
    }
    return;
  }
  std::vector<char> record(6 * sizeof(float) + 3);
  for (const auto& p : cloud.points) {
    const float f[6] = {static_cast<float>(p.position.x()), static_cast<float>(p.position.y()),
                        static_cast<float>(p.position.z()), static_cast<float>(p.normal.x()),
                        static_cast<float>(p.normal.y()),   static_cast<float>(p.normal.z())};
    std::memcpy(record.data(), f, sizeof(f));
    record[24] = static_cast<char>(to_u8(p.color.x()));
    record[25] = static_cast<char>(to_u8(p.color.y()));
    record[26] = static_cast<char>(to_u8(p.color.z()));
    out.write(record.data(), static_cast<std::streamsize>(record.size()));
  }
}

void write_ply(const std::filesystem::path& path, const PointCloud& cloud, PlyFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_ply(out, cloud, format);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace find3d
