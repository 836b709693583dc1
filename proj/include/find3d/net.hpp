#pragma once

#include "find3d/autodiff.hpp"
#include "find3d/cloud.hpp"
#include "find3d/sfc.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace find3d::net {

struct ModelConfig {
  std::vector<int> widths{32, 32, 32};  // one per grid level; level l+1 is pooled from level l
  std::vector<int> heads{2, 2, 2};
  int enc_depth = 1;  // transformer layers per encoder stage
  int dec_depth = 1;  // transformer layers per decoder stage
  std::size_t block_size = 128;
  std::vector<sfc::Scheme> scheme_cycle{sfc::Scheme::Z, sfc::Scheme::TransZ, sfc::Scheme::Hilbert,
                                        sfc::Scheme::TransHilbert};
  int pool_stride = 2;
  int ffn_ratio = 2;
  int head_hidden = 32;
  int out_dim = 32;
  double voxel_size = kDefaultVoxelSize;
  std::uint64_t init_seed = 0;

  std::size_t levels() const { return widths.size(); }
  /// Throws std::invalid_argument describing the first inconsistency.
  void validate() const;

  /// Roughly the published full-scale layout, used for size reporting only.
  static ModelConfig paper_scale();
};

struct Shape {
  std::vector<std::size_t> dims;
  std::size_t numel() const;
  friend bool operator==(const Shape&, const Shape&) = default;
};

struct Tensor {
  Shape shape;
  MatrixF value;  // vectors are stored as 1 x n rows
};

using ParamMap = std::map<std::string, Tensor>;

struct ModelState {
  ModelConfig config;
  ParamMap params;

  std::size_t parameter_count() const;
  bool all_finite() const;
};

struct LayerSpec {
  std::size_t level;
  sfc::Scheme scheme;
  std::string prefix;
};

/// Transformer layers in execution order: encoder stages then decoder stages.
/// Layer i serializes with scheme_cycle[i % cycle length].
std::vector<LayerSpec> layer_plan(const ModelConfig& config);

/// Name -> shape of every parameter the architecture needs.
std::map<std::string, Shape> parameter_shapes(const ModelConfig& config);

/// Seeded initialization: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases
/// zero, norms (1, 0), and the last head layer shrunk by 0.01.
ModelState init_model(const ModelConfig& config);

/// One line per parameter group plus a total, for `describe`.
std::string describe(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Geometry shared by every layer: per-level grids, pooling traces,
// neighborhoods and serialization orders. It depends only on point positions,
// never on parameters, so one instance serves forward and backward.

struct PoolTrace {
  std::vector<std::uint32_t> parent;  // fine row -> coarse row
  std::vector<Vec3> coarse_positions; // mean of children
  std::vector<std::uint64_t> coarse_keys;
  std::vector<GridCoord> coarse_grid;
};

struct Level {
  std::vector<GridCoord> grid;
  std::vector<Vec3> positions;
  unsigned bits = 1;
  std::map<sfc::Scheme, std::shared_ptr<const sfc::SerialOrder>> orders;
};

struct Geometry {
  SampleResult sample;
  // Level-0 rows are kept points sorted by voxel key; row_slot maps a row to
  // its slot in sample.kept and slot_row is the inverse.
  std::vector<std::uint32_t> row_slot;
  std::vector<std::uint32_t> slot_row;
  std::vector<Level> levels;
  std::vector<PoolTrace> traces;  // traces[l]: level l -> l + 1
  std::vector<std::shared_ptr<const ad::SparseRows>> pool_maps;    // coarse x fine means
  std::vector<std::shared_ptr<const ad::SparseRows>> unpool_maps;  // fine x coarse gathers
  std::shared_ptr<const ad::SparseRows> cpe_map;                  // level-0 3x3x3 neighbor means
  std::shared_ptr<const std::vector<std::uint32_t>> to_slot_order;  // gather rows into kept order
  MatrixF inputs;  // level-0 rows x 9

  std::size_t kept() const { return row_slot.size(); }
};

/// Voxel-samples a normalized cloud and builds every level's structure.
Geometry build_geometry(const PointCloud& cloud, const ModelConfig& config);

/// Coarsens a level: children sharing floor(grid / stride) merge into one row,
/// ordered by coarse key.
PoolTrace pool_trace(std::span<const GridCoord> grid, std::span<const Vec3> positions, int stride);

/// Mean over each row's occupied 3x3x3 neighborhood, self included.
ad::SparseRows neighborhood_mean(std::span<const GridCoord> grid);

// ---------------------------------------------------------------------------
// Differentiable pieces. Each takes parameter leaves bound on the tape.

using ParamVars = std::map<std::string, ad::Var>;

template <typename T>
ParamVars bind_params(ad::Tape<T>& tape, const ParamMap& params, bool requires_grad);

template <typename T>
ad::Var embed_points(ad::Tape<T>& tape, ad::Var points9, const ParamVars& p);

template <typename T>
ad::Var cond_pos_encode(ad::Tape<T>& tape, ad::Var features, const Geometry& geo, const ParamVars& p);

/// Pre-norm transformer layer: x + proj(attn(LN x)), then + FFN(LN .).
template <typename T>
ad::Var transformer_layer(ad::Tape<T>& tape, ad::Var x, std::shared_ptr<const sfc::SerialOrder> order, int heads,
                          const std::string& prefix, const ParamVars& p);

template <typename T>
ad::Var grid_pool(ad::Tape<T>& tape, ad::Var fine, std::shared_ptr<const ad::SparseRows> pool_map,
                  const std::string& prefix, const ParamVars& p);

template <typename T>
ad::Var grid_unpool(ad::Tape<T>& tape, ad::Var coarse, ad::Var skip, std::shared_ptr<const ad::SparseRows> unpool_map,
                    const std::string& prefix, const ParamVars& p);

/// Full network. Returns level-0 rows (voxel-key order) x out_dim.
template <typename T>
ad::Var forward_graph(ad::Tape<T>& tape, const Geometry& geo, const ModelConfig& config, const ParamVars& p);

/// Inference on a normalized cloud: features for kept points in sample.kept
/// order. Throws if nothing survives sampling.
MatrixF forward(const PointCloud& cloud, const ModelState& state, Geometry* geometry_out = nullptr);

}  // namespace find3d::net
