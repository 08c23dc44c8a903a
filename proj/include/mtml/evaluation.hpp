#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mtml/dataset.hpp"
#include "mtml/synthgen.hpp"
#include "mtml/trainer.hpp"

namespace mtml {

/// Mean fraction of each record's k nearest neighbours (Euclidean distance in
/// embedding space, self excluded, ties to the lower index) whose labels match
/// the query's on at least n tasks. Throws ConfigError if k >= record count.
double knn_precision(const Eigen::MatrixXd& embeddings, std::span<const LabelMatrix> labels,
                     const Schema& schema, std::size_t k, int n);
double knn_precision(const Eigen::MatrixXd& embeddings, const Dataset& dataset, std::size_t k, int n);

struct HeadMetrics {
  std::size_t task = 0;
  std::string name;
  std::size_t dim = 0;
  std::size_t count = 0;
  std::optional<double> mse;  // absent when no record has a target
  std::optional<double> mae;
};

/// Per-head regression error in label units. Expert tasks are scored against
/// `truth` when given (matched by individual and timestamp), otherwise against
/// present labels.
std::vector<HeadMetrics> score_regression_eval(const Model& model, const Dataset& test,
                                               const GroundTruth* truth = nullptr);

struct ChangeMetrics {
  std::size_t pairs = 0;
  double mse = 0.0;
  double sign_agreement = 0.0;  // over pairs with a non-zero true change
};

/// Predicted change between consecutive records of one individual, read off
/// the head of `task`: predict(x_j) - predict(x_i).
double predicted_change(const Model& model, std::size_t task, const Eigen::VectorXd& xi,
                        const Eigen::VectorXd& xj);

/// Throws ConfigError when the test set has no consecutive same-individual
/// pair with a target. `only_drifted` restricts to drifted individuals (needs
/// `truth`).
ChangeMetrics change_eval(const Model& model, const Dataset& test, std::size_t task,
                          const GroundTruth* truth = nullptr, bool only_drifted = false);

struct EvalOptions {
  std::vector<std::size_t> ks{1, 5, 10};
  std::optional<int> n;  // defaults to the model's training n
  std::uint64_t seed = 7;
  const GroundTruth* truth = nullptr;
};

struct EvalReport {
  std::map<std::size_t, double> precision_at_k;
  std::vector<HeadMetrics> heads;
  std::optional<ChangeMetrics> change;
  std::optional<double> triplet_satisfaction;
  std::optional<double> mean_test_loss;
  std::size_t test_records = 0;
  std::size_t test_triplets = 0;
  nlohmann::json config;

  nlohmann::json to_json() const;
};

EvalReport evaluate(const TrainState& state, const Dataset& test, const EvalOptions& options = {});

struct SweepGrid {
  std::vector<int> n{2, 3, 4, 5, 6, 7};
  std::vector<double> alpha{35, 40, 45, 50, 55, 60};
};

SweepGrid sweep_grid_from_json(const nlohmann::json& j);

struct SweepCell {
  std::string table;  // "n" or "alpha"
  std::string row;
  double column = 0.0;
  std::string status;  // "ok", "n too strict", "diverged"
  std::optional<double> test_loss;
  std::optional<double> precision_at_5;
  std::optional<TrainState> state;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // grid order: n cells, then alpha rows
  std::vector<std::size_t> admissible_pairs;  // per n in grid order, on the training split
  std::string n_table;
  std::string n_precision_table;
  std::string alpha_table;
  std::string alpha_precision_table;
};

struct SweepOptions {
  unsigned jobs = 1;
};

/// Trains one model per grid cell on the training split (shared seed) and
/// tabulates test loss and precision@5. Cell failures are recorded in-table.
SweepResult sweep(const Dataset& dataset, const TrainConfig& base, const SweepGrid& grid,
                  const SweepOptions& options = {});

void write_sweep(const SweepResult& result, const std::filesystem::path& out_dir);

}  // namespace mtml
