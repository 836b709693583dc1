#include "find3d/net.hpp"

#include "find3d/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace find3d::net {

void ModelConfig::validate() const {
  if (widths.empty()) throw std::invalid_argument("model config: at least one level is required");
  if (heads.size() != widths.size()) throw std::invalid_argument("model config: heads must list one entry per level");
  for (std::size_t l = 0; l < widths.size(); ++l) {
    if (widths[l] <= 0 || heads[l] <= 0) throw std::invalid_argument("model config: widths and heads must be positive");
    if (widths[l] % heads[l] != 0) {
      throw std::invalid_argument("model config: width " + std::to_string(widths[l]) + " at level " +
                                  std::to_string(l) + " is not divisible by " + std::to_string(heads[l]) + " heads");
    }
  }
  if (enc_depth < 0 || dec_depth < 0) throw std::invalid_argument("model config: negative depth");
  if (block_size == 0) throw std::invalid_argument("model config: block size must be at least 1");
  if (scheme_cycle.empty()) throw std::invalid_argument("model config: scheme cycle is empty");
  if (pool_stride < 1) throw std::invalid_argument("model config: pool stride must be at least 1");
  if (ffn_ratio < 1 || head_hidden < 1 || out_dim < 1) throw std::invalid_argument("model config: non-positive size");
  if (!(voxel_size > 0.0)) throw std::invalid_argument("model config: voxel size must be positive");
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.widths = {32, 64, 128, 256, 512};
  c.heads = {2, 4, 8, 16, 32};
  c.enc_depth = 2;
  c.dec_depth = 2;
  c.block_size = sfc::kDefaultBlockSize;
  c.head_hidden = 768;
  c.out_dim = 768;
  return c;
}

std::size_t Shape::numel() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.shape.numel();
  return n;
}

bool ModelState::all_finite() const {
  return std::all_of(params.begin(), params.end(), [](const auto& kv) { return kv.second.value.allFinite(); });
}

std::vector<LayerSpec> layer_plan(const ModelConfig& config) {
  std::vector<LayerSpec> plan;
  const auto scheme = [&](std::size_t i) { return config.scheme_cycle[i % config.scheme_cycle.size()]; };
  for (std::size_t l = 0; l < config.levels(); ++l) {
    for (int k = 0; k < config.enc_depth; ++k) {
      plan.push_back({l, scheme(plan.size()), "enc" + std::to_string(l) + ".layer" + std::to_string(k)});
    }
  }
  for (std::size_t l = config.levels() - 1; l >= 1; --l) {
    for (int k = 0; k < config.dec_depth; ++k) {
      plan.push_back({l - 1, scheme(plan.size()), "dec" + std::to_string(l - 1) + ".layer" + std::to_string(k)});
    }
  }
  return plan;
}

namespace {

void add_linear(std::map<std::string, Shape>& shapes, const std::string& prefix, std::size_t in, std::size_t out) {
  shapes[prefix + ".weight"] = Shape{{in, out}};
  shapes[prefix + ".bias"] = Shape{{out}};
}

void add_norm(std::map<std::string, Shape>& shapes, const std::string& prefix, std::size_t width) {
  shapes[prefix + ".gamma"] = Shape{{width}};
  shapes[prefix + ".beta"] = Shape{{width}};
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

constexpr const char* kFinalHeadLayer = "head.fc4";

}  // namespace

std::map<std::string, Shape> parameter_shapes(const ModelConfig& config) {
  config.validate();
  std::map<std::string, Shape> shapes;
  const auto w = [&](std::size_t l) { return static_cast<std::size_t>(config.widths[l]); };
  const auto r = static_cast<std::size_t>(config.ffn_ratio);

  add_linear(shapes, "embed", 9, w(0));
  add_linear(shapes, "cpe", w(0), w(0));
  for (const auto& layer : layer_plan(config)) {
    const std::size_t width = w(layer.level);
    add_norm(shapes, layer.prefix + ".ln1", width);
    add_linear(shapes, layer.prefix + ".attn.qkv", width, 3 * width);
    add_linear(shapes, layer.prefix + ".attn.proj", width, width);
    add_norm(shapes, layer.prefix + ".ln2", width);
    add_linear(shapes, layer.prefix + ".ffn.fc1", width, r * width);
    add_linear(shapes, layer.prefix + ".ffn.fc2", r * width, width);
  }
  for (std::size_t l = 1; l < config.levels(); ++l) {
    add_linear(shapes, "pool" + std::to_string(l), w(l - 1), w(l));
    add_linear(shapes, "unpool" + std::to_string(l) + ".up", w(l), w(l - 1));
    add_linear(shapes, "unpool" + std::to_string(l) + ".skip", w(l - 1), w(l - 1));
  }
  const auto hidden = static_cast<std::size_t>(config.head_hidden);
  add_norm(shapes, "head.norm", w(0));
  add_linear(shapes, "head.fc1", w(0), hidden);
  add_linear(shapes, "head.fc2", hidden, hidden);
  add_linear(shapes, "head.fc3", hidden, hidden);
  add_linear(shapes, kFinalHeadLayer, hidden, static_cast<std::size_t>(config.out_dim));
  return shapes;
}

ModelState init_model(const ModelConfig& config) {
  ModelState state;
  state.config = config;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    Tensor t;
    t.shape = shape;
    const auto rows = shape.dims.size() == 2 ? static_cast<Eigen::Index>(shape.dims[0]) : 1;
    const auto cols = static_cast<Eigen::Index>(shape.dims.back());
    t.value = MatrixF::Zero(rows, cols);
    if (ends_with(name, ".gamma")) {
      t.value.setOnes();
    } else if (ends_with(name, ".weight")) {
      Rng rng(derive_seed(config.init_seed, fnv1a64(name)));
      const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
      const double shrink = name.rfind(kFinalHeadLayer, 0) == 0 ? 0.01 : 1.0;
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) t.value(i, j) = static_cast<float>(shrink * rng.uniform(-bound, bound));
    }
    state.params.emplace(name, std::move(t));
  }
  return state;
}

std::string describe(const ModelConfig& config) {
  std::map<std::string, std::size_t> groups;
  std::size_t total = 0;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    groups[name.substr(0, name.find('.'))] += shape.numel();
    total += shape.numel();
  }
  std::ostringstream out;
  out << "levels " << config.levels() << ", widths";
  for (int w : config.widths) out << ' ' << w;
  out << ", transformer layers " << layer_plan(config).size() << ", out_dim " << config.out_dim << '\n';
  for (const auto& [group, n] : groups) out << "  " << group << ": " << n << '\n';
  out << "total parameters: " << total << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------

PoolTrace pool_trace(std::span<const GridCoord> grid, std::span<const Vec3> positions, int stride) {
  if (stride < 1) throw std::invalid_argument("pool stride must be at least 1");
  if (grid.size() != positions.size()) throw std::invalid_argument("pool_trace: grid/position size mismatch");
  const auto s = static_cast<std::uint32_t>(stride);
  std::vector<std::uint64_t> keys(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) keys[i] = pack_voxel_key({grid[i].x / s, grid[i].y / s, grid[i].z / s});

  PoolTrace t;
  t.coarse_keys = keys;
  std::sort(t.coarse_keys.begin(), t.coarse_keys.end());
  t.coarse_keys.erase(std::unique(t.coarse_keys.begin(), t.coarse_keys.end()), t.coarse_keys.end());

  t.parent.resize(grid.size());
  std::vector<std::size_t> counts(t.coarse_keys.size(), 0);
  t.coarse_positions.assign(t.coarse_keys.size(), Vec3::Zero());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto it = std::lower_bound(t.coarse_keys.begin(), t.coarse_keys.end(), keys[i]);
    const auto c = static_cast<std::uint32_t>(it - t.coarse_keys.begin());
    t.parent[i] = c;
    t.coarse_positions[c] += positions[i];
    ++counts[c];
  }
  t.coarse_grid.reserve(t.coarse_keys.size());
  for (std::size_t c = 0; c < t.coarse_keys.size(); ++c) {
    t.coarse_positions[c] /= static_cast<double>(counts[c]);
    t.coarse_grid.push_back(unpack_voxel_key(t.coarse_keys[c]));
  }
  return t;
}

ad::SparseRows neighborhood_mean(std::span<const GridCoord> grid) {
  std::unordered_map<std::uint64_t, std::uint32_t> row_of;
  row_of.reserve(grid.size() * 2);
  for (std::uint32_t i = 0; i < grid.size(); ++i) row_of.emplace(pack_voxel_key(grid[i]), i);

  ad::SparseRows map;
  map.cols = grid.size();
  std::vector<std::uint32_t> members;
  for (const auto& g : grid) {
    members.clear();
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const std::int64_t x = std::int64_t{g.x} + dx, y = std::int64_t{g.y} + dy, z = std::int64_t{g.z} + dz;
          if (x < 0 || y < 0 || z < 0) continue;
          const auto it = row_of.find(pack_voxel_key(
              {static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(z)}));
          if (it != row_of.end()) members.push_back(it->second);
        }
    map.add_mean_row(members);
  }
  return map;
}

Geometry build_geometry(const PointCloud& cloud, const ModelConfig& config) {
  config.validate();
  Geometry geo;
  geo.sample = voxel_sample(cloud, config.voxel_size);
  const std::size_t n = geo.sample.kept.size();
  if (n == 0) throw std::invalid_argument("no points survive voxel sampling");

  geo.row_slot.resize(n);
  std::iota(geo.row_slot.begin(), geo.row_slot.end(), 0U);
  std::sort(geo.row_slot.begin(), geo.row_slot.end(),
            [&](std::uint32_t a, std::uint32_t b) { return geo.sample.voxel_key[a] < geo.sample.voxel_key[b]; });
  geo.slot_row.resize(n);
  for (std::uint32_t r = 0; r < n; ++r) geo.slot_row[geo.row_slot[r]] = r;

  std::vector<std::uint32_t> kept_rows(n);
  Level level0;
  for (std::uint32_t r = 0; r < n; ++r) {
    const std::uint32_t slot = geo.row_slot[r];
    kept_rows[r] = geo.sample.kept[slot];
    level0.grid.push_back(geo.sample.grid[slot]);
    level0.positions.push_back(cloud.points[kept_rows[r]].position);
  }
  geo.inputs = point_features(cloud, kept_rows);
  geo.levels.push_back(std::move(level0));

  for (std::size_t l = 0; l + 1 < config.levels(); ++l) {
    const Level& fine = geo.levels[l];
    PoolTrace trace = pool_trace(fine.grid, fine.positions, config.pool_stride);

    ad::SparseRows pool;
    pool.cols = fine.grid.size();
    std::vector<std::vector<std::uint32_t>> children(trace.coarse_keys.size());
    for (std::uint32_t i = 0; i < trace.parent.size(); ++i) children[trace.parent[i]].push_back(i);
    for (const auto& c : children) pool.add_mean_row(c);
    geo.pool_maps.push_back(std::make_shared<const ad::SparseRows>(std::move(pool)));
    geo.unpool_maps.push_back(
        std::make_shared<const ad::SparseRows>(ad::SparseRows::gather(trace.parent, trace.coarse_keys.size())));

    Level coarse;
    coarse.grid = trace.coarse_grid;
    coarse.positions = trace.coarse_positions;
    geo.levels.push_back(std::move(coarse));
    geo.traces.push_back(std::move(trace));
  }

  double edge = config.voxel_size;
  for (auto& level : geo.levels) {
    level.bits = sfc::bits_for_grid(level.grid, sfc::bits_for_voxel_size(edge));
    edge *= config.pool_stride;
  }
  for (const auto& layer : layer_plan(config)) {
    Level& level = geo.levels[layer.level];
    if (level.orders.count(layer.scheme)) continue;
    level.orders[layer.scheme] = std::make_shared<const sfc::SerialOrder>(
        sfc::serialize_grid(level.grid, layer.scheme, level.bits, config.block_size));
  }

  geo.cpe_map = std::make_shared<const ad::SparseRows>(neighborhood_mean(geo.levels[0].grid));
  geo.to_slot_order = std::make_shared<const std::vector<std::uint32_t>>(geo.slot_row);
  return geo;
}

// ---------------------------------------------------------------------------

namespace {

ad::Var param(const ParamVars& p, const std::string& name) {
  const auto it = p.find(name);
  if (it == p.end()) throw std::invalid_argument("missing parameter '" + name + "'");
  return it->second;
}

template <typename T>
ad::Var linear_named(ad::Tape<T>& tape, ad::Var x, const ParamVars& p, const std::string& prefix) {
  return ad::linear(tape, x, param(p, prefix + ".weight"), param(p, prefix + ".bias"));
}

template <typename T>
ad::Var norm_named(ad::Tape<T>& tape, ad::Var x, const ParamVars& p, const std::string& prefix) {
  return ad::layer_norm(tape, x, param(p, prefix + ".gamma"), param(p, prefix + ".beta"));
}

}  // namespace

template <typename T>
ParamVars bind_params(ad::Tape<T>& tape, const ParamMap& params, bool requires_grad) {
  ParamVars out;
  for (const auto& [name, t] : params) out.emplace(name, tape.leaf(t.value.template cast<T>(), requires_grad));
  return out;
}

template <typename T>
ad::Var embed_points(ad::Tape<T>& tape, ad::Var points9, const ParamVars& p) {
  return linear_named(tape, points9, p, "embed");
}

template <typename T>
ad::Var cond_pos_encode(ad::Tape<T>& tape, ad::Var features, const Geometry& geo, const ParamVars& p) {
  const ad::Var neighbors = ad::sparse_mix(tape, features, geo.cpe_map);
  return ad::add(tape, features, linear_named(tape, neighbors, p, "cpe"));
}

template <typename T>
ad::Var transformer_layer(ad::Tape<T>& tape, ad::Var x, std::shared_ptr<const sfc::SerialOrder> order, int heads,
                          const std::string& prefix, const ParamVars& p) {
  ad::Var h = norm_named(tape, x, p, prefix + ".ln1");
  h = linear_named(tape, h, p, prefix + ".attn.qkv");
  h = ad::block_attention(tape, h, std::move(order), heads);
  h = linear_named(tape, h, p, prefix + ".attn.proj");
  const ad::Var y = ad::add(tape, x, h);

  ad::Var f = norm_named(tape, y, p, prefix + ".ln2");
  f = linear_named(tape, f, p, prefix + ".ffn.fc1");
  f = ad::gelu(tape, f);
  f = linear_named(tape, f, p, prefix + ".ffn.fc2");
  return ad::add(tape, y, f);
}

template <typename T>
ad::Var grid_pool(ad::Tape<T>& tape, ad::Var fine, std::shared_ptr<const ad::SparseRows> pool_map,
                  const std::string& prefix, const ParamVars& p) {
  return linear_named(tape, ad::sparse_mix(tape, fine, std::move(pool_map)), p, prefix);
}

template <typename T>
ad::Var grid_unpool(ad::Tape<T>& tape, ad::Var coarse, ad::Var skip, std::shared_ptr<const ad::SparseRows> unpool_map,
                    const std::string& prefix, const ParamVars& p) {
  const ad::Var up = linear_named(tape, ad::sparse_mix(tape, coarse, std::move(unpool_map)), p, prefix + ".up");
  return ad::add(tape, up, linear_named(tape, skip, p, prefix + ".skip"));
}

template <typename T>
ad::Var forward_graph(ad::Tape<T>& tape, const Geometry& geo, const ModelConfig& config, const ParamVars& p) {
  const auto plan = layer_plan(config);
  std::size_t next_layer = 0;
  const auto run_layer = [&](ad::Var h) {
    const LayerSpec& spec = plan[next_layer++];
    const Level& level = geo.levels[spec.level];
    return transformer_layer(tape, h, level.orders.at(spec.scheme), config.heads[spec.level], spec.prefix, p);
  };

  ad::Var h = embed_points(tape, tape.constant(geo.inputs.template cast<T>()), p);
  h = cond_pos_encode(tape, h, geo, p);

  std::vector<ad::Var> skips;
  for (std::size_t l = 0; l < config.levels(); ++l) {
    if (l > 0) h = grid_pool(tape, h, geo.pool_maps[l - 1], "pool" + std::to_string(l), p);
    for (int k = 0; k < config.enc_depth; ++k) h = run_layer(h);
    skips.push_back(h);
  }
  for (std::size_t l = config.levels() - 1; l >= 1; --l) {
    h = grid_unpool(tape, h, skips[l - 1], geo.unpool_maps[l - 1], "unpool" + std::to_string(l), p);
    for (int k = 0; k < config.dec_depth; ++k) h = run_layer(h);
  }

  h = norm_named(tape, h, p, "head.norm");
  h = ad::gelu(tape, linear_named(tape, h, p, "head.fc1"));
  h = ad::gelu(tape, linear_named(tape, h, p, "head.fc2"));
  h = ad::gelu(tape, linear_named(tape, h, p, "head.fc3"));
  return linear_named(tape, h, p, kFinalHeadLayer);
}

MatrixF forward(const PointCloud& cloud, const ModelState& state, Geometry* geometry_out) {
  Geometry geo = build_geometry(cloud, state.config);
  ad::Tape<float> tape;
  const ParamVars p = bind_params(tape, state.params, false);
  const ad::Var rows = forward_graph(tape, geo, state.config, p);
  MatrixF out = tape.value(ad::gather_rows(tape, rows, geo.to_slot_order));
  if (!out.allFinite()) throw std::runtime_error("forward produced non-finite features");
  if (geometry_out) *geometry_out = std::move(geo);
  return out;
}

#define FIND3D_INSTANTIATE(T)                                                                                    \
  template ParamVars bind_params<T>(ad::Tape<T>&, const ParamMap&, bool);                                        \
  template ad::Var embed_points<T>(ad::Tape<T>&, ad::Var, const ParamVars&);                                     \
  template ad::Var cond_pos_encode<T>(ad::Tape<T>&, ad::Var, const Geometry&, const ParamVars&);                 \
  template ad::Var transformer_layer<T>(ad::Tape<T>&, ad::Var, std::shared_ptr<const sfc::SerialOrder>, int,     \
                                        const std::string&, const ParamVars&);                                   \
  template ad::Var grid_pool<T>(ad::Tape<T>&, ad::Var, std::shared_ptr<const ad::SparseRows>, const std::string&, \
                                const ParamVars&);                                                               \
  template ad::Var grid_unpool<T>(ad::Tape<T>&, ad::Var, ad::Var, std::shared_ptr<const ad::SparseRows>,         \
                                  const std::string&, const ParamVars&);                                         \
  template ad::Var forward_graph<T>(ad::Tape<T>&, const Geometry&, const ModelConfig&, const ParamVars&);

FIND3D_INSTANTIATE(float)
FIND3D_INSTANTIATE(double)

#undef FIND3D_INSTANTIATE

}  // namespace find3d::net
