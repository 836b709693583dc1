#pragma once

#include "find3d/autodiff.hpp"
#include "find3d/cloud.hpp"
#include "find3d/net.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace find3d::train {

/// A text label attached to a subset of an object's points.
struct LabelRecord {
  std::string object_id;
  std::vector<std::uint32_t> point_indices;  // into the object's full point cloud
  std::string label_text;
  Eigen::VectorXf embedding;
};

struct TrainingObject {
  std::string id;
  PointCloud cloud;  // normalized
  std::vector<LabelRecord> labels;
};

struct TrainConfig {
  std::size_t batch_objects = 64;
  int epochs = 80;
  double lr_start = 3e-4;
  double lr_end = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double split_ratio = 0.9;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  AugmentConfig augment;

  void validate() const;
  /// Desk-scale schedule used for synthetic runs: 30 epochs, batches of 8,
  /// lr 3e-3 -> 5e-4, temperature 0.1.
  static TrainConfig toy();
};

struct OptimizerState {
  std::map<std::string, MatrixF> first_moment;
  std::map<std::string, MatrixF> second_moment;
  std::int64_t step = 0;
};

using Gradients = std::map<std::string, MatrixF>;

/// Mean of the selected rows, L2-normalized. Order of indices is irrelevant.
Eigen::VectorXd pool_label_feature(const MatrixD& features, std::span<const std::uint32_t> indices);

/// Contrastive loss over unit-norm pooled predictions and label embeddings
/// (row i of each forms the positive pair).
double contrastive_loss(const MatrixD& pooled, const MatrixD& labels, double temperature = 1.0);

/// end + 0.5 (start - end) (1 + cos(pi t / T)), with T = config.epochs.
double cosine_lr(double epoch, const TrainConfig& config);

/// Bias-corrected Adam. Parameters without a gradient entry are untouched.
void adam_step(net::ParamMap& params, const Gradients& grads, OptimizerState& state, double lr,
               const TrainConfig& config);

/// Geometry plus label rows for one (possibly augmented) object.
struct PreparedObject {
  net::Geometry geometry;
  std::vector<std::vector<std::uint32_t>> label_rows;  // level-0 rows per surviving label
  std::vector<Eigen::VectorXf> label_embeddings;       // parallel to label_rows
  std::size_t skipped_labels = 0;                      // labels with no kept point
};

PreparedObject prepare_object(const PointCloud& cloud, std::span<const LabelRecord> labels,
                              const net::ModelConfig& config);

/// Augmentation stream for one object in one epoch; independent of batch
/// composition.
PointCloud augment_for_training(const PointCloud& cloud, const AugmentConfig& augment, std::uint64_t seed);

template <typename T>
struct BatchResult {
  T loss = 0;
  std::size_t labels = 0;
  std::map<std::string, Matrix<T>> grads;  // empty unless requested
};

/// Forward over every object, pool per label, one contrastive loss across all
/// labels of the batch, and optionally backward.
template <typename T>
BatchResult<T> batch_loss(std::span<const PreparedObject* const> batch, const net::ModelState& state,
                          double temperature, bool with_grad);

/// Same as batch_loss but with explicit parameter values (used by gradient checks).
template <typename T>
BatchResult<T> batch_loss(std::span<const PreparedObject* const> batch, const net::ModelConfig& config,
                          const std::map<std::string, Matrix<T>>& params, double temperature, bool with_grad);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN without a validation split
  std::size_t skipped_labels = 0;
};

struct FitResult {
  net::ModelState last;
  net::ModelState best;  // lowest validation loss; equals last without validation
  OptimizerState optimizer;
  std::vector<EpochStats> history;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
};

using EpochCallback = std::function<void(const EpochStats&)>;

FitResult fit(const std::vector<TrainingObject>& dataset, const TrainConfig& config, const net::ModelState& initial,
              const EpochCallback& on_epoch = {});

/// CSV with header epoch,lr,train_loss,val_loss,skipped_labels.
std::string history_csv(const std::vector<EpochStats>& history);

}  // namespace find3d::train
