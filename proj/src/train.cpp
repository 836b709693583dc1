#include "find3d/train.hpp"

#include "find3d/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace find3d::train {

void TrainConfig::validate() const {
  if (batch_objects == 0) throw std::invalid_argument("train config: batch_objects must be at least 1");
  if (epochs < 0) throw std::invalid_argument("train config: epochs must be non-negative");
  if (!(lr_end > 0.0) || !(lr_end <= lr_start)) throw std::invalid_argument("train config: need 0 < lr_end <= lr_start");
  if (!(split_ratio > 0.0) || !(split_ratio < 1.0)) throw std::invalid_argument("train config: need 0 < split_ratio < 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("train config: temperature must be positive");
}

TrainConfig TrainConfig::toy() {
  TrainConfig t;
  t.batch_objects = 8;
  t.epochs = 30;
  t.lr_start = 3e-3;
  t.lr_end = 5e-4;
  t.temperature = 0.1;
  return t;
}

Eigen::VectorXd pool_label_feature(const MatrixD& features, std::span<const std::uint32_t> indices) {
  if (indices.empty()) throw std::invalid_argument("pool_label_feature: empty index set");
  std::vector<std::uint32_t> sorted(indices.begin(), indices.end());
  std::sort(sorted.begin(), sorted.end());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(features.cols());
  for (std::uint32_t i : sorted) {
    if (i >= features.rows()) throw std::out_of_range("pool_label_feature: index out of range");
    mean += features.row(i).transpose();
  }
  mean /= static_cast<double>(sorted.size());
  const double n = mean.norm();
  return n > 0.0 ? Eigen::VectorXd(mean / n) : mean;
}

double contrastive_loss(const MatrixD& pooled, const MatrixD& labels, double temperature) {
  ad::Tape<double> tape;
  const ad::Var v = ad::contrastive_loss(tape, tape.constant(pooled), std::make_shared<const MatrixD>(labels),
                                         temperature);
  return tape.value(v)(0, 0);
}

double cosine_lr(double epoch, const TrainConfig& config) {
  if (config.epochs <= 0) return config.lr_start;
  const double t = std::clamp(epoch / static_cast<double>(config.epochs), 0.0, 1.0);
  return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + std::cos(std::numbers::pi * t));
}

void adam_step(net::ParamMap& params, const Gradients& grads, OptimizerState& state, double lr,
               const TrainConfig& config) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("adam_step: gradient for unknown parameter '" + name + "'");
    MatrixF& p = it->second.value;
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw std::invalid_argument("adam_step: shape mismatch for " + name);
    auto [m_it, m_new] = state.first_moment.try_emplace(name, MatrixF::Zero(p.rows(), p.cols()));
    auto [v_it, v_new] = state.second_moment.try_emplace(name, MatrixF::Zero(p.rows(), p.cols()));
    MatrixF& m = m_it->second;
    MatrixF& v = v_it->second;
    const auto b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto eps = static_cast<float>(config.adam_eps);
    p.array() -= step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
  }
}

PointCloud augment_for_training(const PointCloud& cloud, const AugmentConfig& augment, std::uint64_t seed) {
  Rng rng(seed);
  PointCloud out = cloud;
  if (augment.rotate) {
    AugmentConfig rotation_only = AugmentConfig::none();
    rotation_only.rotate = true;
    out = normalize(find3d::augment(out, rotation_only, rng.next_u64())).first;
  } else {
    rng.next_u64();
  }
  AugmentConfig rest = augment;
  rest.rotate = false;
  return find3d::augment(out, rest, rng.next_u64());
}

PreparedObject prepare_object(const PointCloud& cloud, std::span<const LabelRecord> labels,
                              const net::ModelConfig& config) {
  PreparedObject out;
  out.geometry = net::build_geometry(cloud, config);
  const SampleResult& s = out.geometry.sample;
  for (const auto& label : labels) {
    if (label.embedding.size() != config.out_dim) {
      throw std::invalid_argument("label '" + label.label_text + "' has embedding dimension " +
                                  std::to_string(label.embedding.size()) + ", model expects " +
                                  std::to_string(config.out_dim));
    }
    std::vector<std::uint32_t> rows;
    for (std::uint32_t i : label.point_indices) {
      if (i >= cloud.size()) {
        throw std::out_of_range("label '" + label.label_text + "' of object '" + label.object_id +
                                "' references point " + std::to_string(i) + " of " + std::to_string(cloud.size()));
      }
      const std::uint32_t slot = s.nearest_slot[i];
      if (s.kept[slot] == i) rows.push_back(out.geometry.slot_row[slot]);
    }
    if (rows.empty()) {
      ++out.skipped_labels;
      continue;
    }
    std::sort(rows.begin(), rows.end());
    out.label_rows.push_back(std::move(rows));
    out.label_embeddings.push_back(label.embedding.normalized());
  }
  return out;
}

template <typename T>
BatchResult<T> batch_loss(std::span<const PreparedObject* const> batch, const net::ModelConfig& config,
                          const std::map<std::string, Matrix<T>>& params, double temperature, bool with_grad) {
  BatchResult<T> result;
  ad::Tape<T> tape;
  net::ParamVars vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.leaf(value, with_grad));

  std::vector<ad::Var> pooled;
  std::vector<const Eigen::VectorXf*> targets;
  for (const PreparedObject* obj : batch) {
    if (obj->label_rows.empty()) continue;
    const ad::Var features = net::forward_graph(tape, obj->geometry, config, vars);
    auto map = std::make_shared<ad::SparseRows>();
    map->cols = obj->geometry.kept();
    for (const auto& rows : obj->label_rows) map->add_mean_row(rows);
    pooled.push_back(ad::normalize_rows(tape, ad::sparse_mix(tape, features, std::move(map))));
    for (const auto& e : obj->label_embeddings) targets.push_back(&e);
  }
  result.labels = targets.size();
  if (targets.empty()) return result;

  auto target_matrix = std::make_shared<Matrix<T>>(static_cast<Eigen::Index>(targets.size()), config.out_dim);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    target_matrix->row(static_cast<Eigen::Index>(i)) = targets[i]->template cast<T>().transpose();
  }
  const ad::Var all = ad::concat_rows(tape, std::span<const ad::Var>(pooled));
  const ad::Var loss = ad::contrastive_loss(tape, all, std::shared_ptr<const Matrix<T>>(target_matrix),
                                            static_cast<T>(temperature));
  result.loss = tape.value(loss)(0, 0);
  if (!with_grad) return result;

  tape.backward(loss);
  for (const auto& [name, var] : vars) {
    Matrix<T> g = tape.grad(var);
    if (!g.allFinite()) throw std::runtime_error("non-finite gradient for parameter '" + name + "'");
    result.grads.emplace(name, std::move(g));
  }
  return result;
}

template <typename T>
BatchResult<T> batch_loss(std::span<const PreparedObject* const> batch, const net::ModelState& state,
                          double temperature, bool with_grad) {
  std::map<std::string, Matrix<T>> params;
  for (const auto& [name, t] : state.params) params.emplace(name, t.value.template cast<T>());
  return batch_loss<T>(batch, state.config, params, temperature, with_grad);
}

template BatchResult<float> batch_loss<float>(std::span<const PreparedObject* const>, const net::ModelConfig&,
                                              const std::map<std::string, Matrix<float>>&, double, bool);
template BatchResult<double> batch_loss<double>(std::span<const PreparedObject* const>, const net::ModelConfig&,
                                                const std::map<std::string, Matrix<double>>&, double, bool);
template BatchResult<float> batch_loss<float>(std::span<const PreparedObject* const>, const net::ModelState&, double,
                                              bool);
template BatchResult<double> batch_loss<double>(std::span<const PreparedObject* const>, const net::ModelState&, double,
                                                bool);

namespace {

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& objects, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < objects.size(); i += batch_size) {
    out.emplace_back(objects.begin() + static_cast<std::ptrdiff_t>(i),
                     objects.begin() + static_cast<std::ptrdiff_t>(std::min(objects.size(), i + batch_size)));
  }
  return out;
}

}  // namespace

FitResult fit(const std::vector<TrainingObject>& dataset, const TrainConfig& config, const net::ModelState& initial,
              const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("fit: empty dataset");
  for (const auto& obj : dataset) {
    for (const auto& label : obj.labels) {
      for (std::uint32_t i : label.point_indices) {
        if (i >= obj.cloud.size()) {
          throw std::out_of_range("fit: label '" + label.label_text + "' of object '" + obj.id +
                                  "' references point " + std::to_string(i) + " of " +
                                  std::to_string(obj.cloud.size()));
        }
      }
    }
  }

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(derive_seed(config.seed, 0x5b1170));
  split_rng.shuffle(order.begin(), order.end());
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(config.split_ratio * static_cast<double>(dataset.size()))), 1,
      dataset.size());
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> val_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());

  FitResult result;
  result.last = initial;
  result.best = initial;
  for (auto i : train_idx) result.train_ids.push_back(dataset[i].id);
  for (auto i : val_idx) result.val_ids.push_back(dataset[i].id);
  if (config.epochs == 0) return result;

  const net::ModelConfig& model_config = initial.config;
  std::vector<PreparedObject> val_prepared;
  for (auto i : val_idx) val_prepared.push_back(prepare_object(dataset[i].cloud, dataset[i].labels, model_config));

  double best_val = std::numeric_limits<double>::infinity();
  Rng epoch_rng(derive_seed(config.seed, 0xe90c));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = cosine_lr(epoch, config);

    std::vector<std::size_t> shuffled = train_idx;
    epoch_rng.shuffle(shuffled.begin(), shuffled.end());

    double loss_sum = 0.0;
    std::size_t loss_batches = 0;
    for (const auto& batch_idx : make_batches(shuffled, config.batch_objects)) {
      std::vector<PreparedObject> prepared;
      prepared.reserve(batch_idx.size());
      for (auto i : batch_idx) {
        const auto seed = derive_seed(config.seed, mix64(static_cast<std::uint64_t>(epoch)) ^ fnv1a64(dataset[i].id));
        const PointCloud cloud = augment_for_training(dataset[i].cloud, config.augment, seed);
        prepared.push_back(prepare_object(cloud, dataset[i].labels, model_config));
        stats.skipped_labels += prepared.back().skipped_labels;
      }
      std::vector<const PreparedObject*> ptrs;
      for (const auto& p : prepared) ptrs.push_back(&p);
      BatchResult<float> br = batch_loss<float>(ptrs, result.last, config.temperature, true);
      if (br.labels == 0) continue;
      adam_step(result.last.params, br.grads, result.optimizer, stats.lr, config);
      loss_sum += br.loss;
      ++loss_batches;
    }
    stats.train_loss = loss_batches ? loss_sum / static_cast<double>(loss_batches)
                                    : std::numeric_limits<double>::quiet_NaN();

    stats.val_loss = std::numeric_limits<double>::quiet_NaN();
    if (!val_prepared.empty()) {
      double val_sum = 0.0;
      std::size_t val_batches = 0;
      for (std::size_t i = 0; i < val_prepared.size(); i += config.batch_objects) {
        std::vector<const PreparedObject*> ptrs;
        for (std::size_t j = i; j < std::min(val_prepared.size(), i + config.batch_objects); ++j) {
          ptrs.push_back(&val_prepared[j]);
        }
        BatchResult<float> br = batch_loss<float>(ptrs, result.last, config.temperature, false);
        if (br.labels == 0) continue;
        val_sum += br.loss;
        ++val_batches;
      }
      if (val_batches) stats.val_loss = val_sum / static_cast<double>(val_batches);
    }

    if (val_prepared.empty() || (std::isfinite(stats.val_loss) && stats.val_loss < best_val)) {
      best_val = stats.val_loss;
      result.best = result.last;
    }
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return result;
}

std::string history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream out;
  out << "epoch,lr,train_loss,val_loss,skipped_labels\n";
  out << std::setprecision(9);
  for (const auto& s : history) {
    out << s.epoch << ',' << s.lr << ',' << s.train_loss << ',' << s.val_loss << ',' << s.skipped_labels << '\n';
  }
  return out.str();
}

}  // namespace find3d::train
