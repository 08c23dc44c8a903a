#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtml/dataset.hpp"
#include "mtml/metric.hpp"
#include "mtml/miner.hpp"
#include "mtml/stiefel.hpp"

namespace mtml {

struct TrainConfig {
  int epochs = 30;
  std::size_t embedding_dim = 128;  // clamped to d-1 when the data is narrower
  std::size_t triplets_per_batch = 0;  // cap per batch, 0 = keep every mined triplet
  double lr = 0.05;
  double lr_decay = 1.0;  // per-epoch multiplier; 1 keeps the rate constant
  OptimizerMethod method = OptimizerMethod::rsgd;
  LossConfig loss;        // empty heads -> default_head_assignment
  MinerConfig miner;      // miner.seed is ignored; streams derive from `seed`
  bool constrain_r = true;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  double train_fraction = 0.8;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

/// Per-task affine scaling of regression targets (z-scores on the training
/// split). Heads regress scaled targets; predictions map back with inverse().
struct TargetScaler {
  std::map<std::size_t, std::pair<double, double>> tasks;  // task -> (mean, scale)

  static TargetScaler fit(const Dataset& dataset, const HeadAssignment& heads);
  double forward(std::size_t task, double y) const;
  double inverse(std::size_t task, double z) const;
};

struct Model {
  MetricParams params;
  Standardizer standardizer;
  TargetScaler targets;
  LossConfig loss;  // heads resolved
  std::string schema_hash;

  /// Standardized features times L, one row per record.
  Eigen::MatrixXd embed_dataset(const Dataset& dataset) const;
  /// Prediction of a head task in label units.
  double predict(std::size_t task, const Eigen::VectorXd& embedding) const;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double total = 0.0;
  double metric = 0.0;
  double mse = 0.0;
  std::size_t triplets = 0;
  std::size_t admissible_pairs = 0;
  double ortho_residual_L = 0.0;
  double ortho_residual_R = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;

  /// Equality of every field except wall time.
  bool same_trajectory(const TrainHistory& other) const;
};

nlohmann::json to_json(const EpochStats& e);

/// Everything needed to continue a run: the model, optimizer states for both
/// manifolds, and the history so far.
struct TrainState {
  TrainConfig config;
  Model model;
  OptimizerState opt_L;
  OptimizerState opt_R;
  TrainHistory history;
  int epochs_done = 0;
  std::vector<std::string> test_individuals;
};

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no periodic checkpoints
  std::function<void(const EpochStats&)> on_epoch;
};

/// Fits the standardizer/target scaler on `dataset`, draws the initial
/// orthonormal L and R, and resolves head assignment. Throws
/// NTooStrictError when the dataset has no admissible pair at config n.
TrainState initialize_training(const Dataset& dataset, const TrainConfig& config);

/// Runs epochs until `state.epochs_done == state.config.epochs`. Throws
/// DivergenceError on a non-finite loss, gradient or parameter.
void continue_training(TrainState& state, const Dataset& dataset, const TrainOptions& options = {});

/// initialize_training + continue_training.
TrainState train(const Dataset& dataset, const TrainConfig& config, const TrainOptions& options = {});

/// Head samples for `records` whose head-task labels are present.
std::vector<HeadSample> head_samples(const Dataset& dataset, std::span<const std::size_t> records,
                                     const Model& model);

nlohmann::json checkpoint_to_json(const TrainState& state);
TrainState checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Throws LoadError (with the byte offset for malformed JSON).
TrainState load_checkpoint(const std::filesystem::path& path);

struct GradientAudit {
  double max_rel_error_L = 0.0;
  double max_rel_error_R = 0.0;
  double max_rel_error() const { return std::max(max_rel_error_L, max_rel_error_R); }
};

/// Compares grad_total_loss with central differences (step `h`) entry by
/// entry. An entry's error is |analytic - numeric| divided by the larger of
/// the two magnitudes, floored at 1e-3 of the gradient's largest entry;
/// identically zero gradients give 0.
GradientAudit finite_diff_audit(const MetricParams& params, const LossBatch& batch,
                                const LossConfig& config, double h = 1e-5);

}  // namespace mtml
