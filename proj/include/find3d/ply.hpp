#pragma once

#include "find3d/cloud.hpp"

#include <filesystem>
#include <iosfwd>

namespace find3d {

enum class PlyFormat { Ascii, BinaryLittleEndian };

// Vertex properties x,y,z are required; nx,ny,nz and red,green,blue are
// optional (zero-filled when absent). 8-bit colors map to [0,1] by /255.
// Elements other than `vertex` must follow it and are ignored.
PointCloud read_ply(std::istream& in);
PointCloud read_ply(const std::filesystem::path& path);

void write_ply(std::ostream& out, const PointCloud& cloud, PlyFormat format = PlyFormat::BinaryLittleEndian);
void write_ply(const std::filesystem::path& path, const PointCloud& cloud,
               PlyFormat format = PlyFormat::BinaryLittleEndian);

}  // namespace find3d
