#pragma once

// On-disk formats: checkpoints, config files, dataset manifests, annotations.

#include "find3d/bench.hpp"
#include "find3d/net.hpp"
#include "find3d/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace find3d::io {

namespace fs = std::filesystem;

std::string model_config_to_json(const net::ModelConfig& config);
net::ModelConfig model_config_from_json(const std::string& text);

std::string train_config_to_json(const train::TrainConfig& config);
/// Missing keys keep the values of `defaults`; unknown keys are an error.
train::TrainConfig train_config_from_json(const std::string& text, const train::TrainConfig& defaults = {});

/// Binary checkpoint:
///   "FND3" | u32 version | u32 len + model config JSON | u32 param count |
///   per param: u32 name len, name, u32 ndim, u32 dims..., f32 data |
///   u32 CRC-32 of all preceding bytes. Integers and floats little-endian.
std::string encode_checkpoint(const net::ModelState& state);
net::ModelState decode_checkpoint(const std::string& bytes);
void save_checkpoint(const fs::path& path, const net::ModelState& state);
net::ModelState load_checkpoint(const fs::path& path);

/// Embedding matrix sidecar: "FNDE" | u32 rows | u32 dim | f32 row-major data.
void write_embeddings(const fs::path& path, const MatrixF& rows);
MatrixF read_embeddings(const fs::path& path);

/// JSON lines {object_id, label_text, point_indices, embedding_ref:{file,row}}
/// plus the sidecar `<path>.fnde` holding the embeddings.
void write_annotations(const fs::path& path, const std::vector<train::LabelRecord>& records);
std::vector<train::LabelRecord> read_annotations(const fs::path& path);

struct Manifest {
  std::string name;
  std::vector<bench::BenchmarkObject> objects;
};

/// {name, objects:[{id, category, cloud, labels}]}; paths relative to the
/// manifest's directory. Labels files hold {part_names, gt}.
Manifest read_manifest(const fs::path& path);
/// Writes <dir>/<filename> plus one PLY and one labels file per object.
fs::path write_manifest(const fs::path& dir, const std::string& name, const std::vector<bench::BenchmarkObject>& objects,
                        const std::string& filename = "manifest.json");

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, const std::string& bytes);

}  // namespace find3d::io
