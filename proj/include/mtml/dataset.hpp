#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace mtml {

enum class TaskKind { automated, expert, gradient_forward, gradient_backward };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

inline bool is_gradient(TaskKind k) {
  return k == TaskKind::gradient_forward || k == TaskKind::gradient_backward;
}

/// Per-task metadata. `resolution` is the match tolerance used by the miner;
/// gradient tasks name the expert task they differentiate.
struct TaskSchema {
  std::string name;
  TaskKind kind = TaskKind::automated;
  double resolution = 0.0;
  std::optional<std::size_t> source_task;
  bool include_in_match = true;
};

using Schema = std::vector<TaskSchema>;

/// 3 automated + 2 expert + 4 gradient tasks (forward/backward per expert).
Schema default_schema();

/// Throws ConfigError when gradient tasks don't reference an expert task,
/// non-gradient tasks carry a source, or a resolution is negative.
void validate_schema(const Schema& schema);

nlohmann::json schema_to_json(const Schema& schema);
Schema schema_from_json(const nlohmann::json& j);
Schema load_schema(const std::filesystem::path& path);
void save_schema(const Schema& schema, const std::filesystem::path& path);

/// Stable 64-bit FNV-1a hash of the canonical schema JSON, as 16 hex digits.
std::string schema_hash(const Schema& schema);

struct LabelMatrix {
  std::vector<double> values;
  std::vector<bool> present;   // currently usable (after imputation/derivation)
  std::vector<bool> observed;  // present in the source file

  LabelMatrix() = default;
  explicit LabelMatrix(std::size_t tasks)
      : values(tasks, 0.0), present(tasks, false), observed(tasks, false) {}

  std::size_t size() const { return values.size(); }

  void set(std::size_t t, double v) {
    values[t] = v;
    present[t] = true;
    observed[t] = true;
  }
};

struct ObservationRecord {
  std::string individual_id;
  std::int64_t timestamp = 0;  // days since epoch
  Eigen::VectorXd features;
  LabelMatrix labels;
};

/// Immutable collection of records sorted by (individual_id, timestamp).
class Dataset {
 public:
  Dataset() = default;
  /// Sorts the records and validates dimensions, finiteness and uniqueness of
  /// (individual, timestamp). Throws LoadError.
  Dataset(Schema schema, std::vector<ObservationRecord> records);

  const Schema& schema() const { return schema_; }
  std::span<const ObservationRecord> records() const { return records_; }
  const ObservationRecord& operator[](std::size_t i) const { return records_[i]; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t dim() const { return dim_; }
  std::size_t task_count() const { return schema_.size(); }

  /// Half-open [begin, end) record ranges, one per individual, in record order.
  const std::vector<std::pair<std::size_t, std::size_t>>& individuals() const {
    return groups_;
  }

  /// N x d matrix of raw features.
  Eigen::MatrixXd feature_matrix() const;

  /// Subset of records belonging to the listed individuals.
  Dataset select_individuals(std::span<const std::string> ids) const;

 private:
  Schema schema_;
  std::vector<ObservationRecord> records_;
  std::vector<std::pair<std::size_t, std::size_t>> groups_;
  std::size_t dim_ = 0;
};

/// Reads the CSV layout: individual_id, timestamp, f_0..f_{d-1}, one column
/// per task (named as in the schema). Empty label cell = missing.
Dataset load_dataset(const std::filesystem::path& csv_path, const Schema& schema);

/// Writes observed labels only, so that load -> save -> load reproduces the
/// source file. Values are written with 17 significant digits.
void save_dataset(const Dataset& dataset, const std::filesystem::path& csv_path);

/// Fills each missing expert slot from the temporally nearest observed value
/// of the same individual; equidistant neighbours resolve to the earlier one.
Dataset impute_nearest(const Dataset& dataset);

/// Forward/backward finite-difference rates (per day) of the expert scores,
/// written to the gradient slots. Boundary records get 0.
Dataset compute_gradient_labels(const Dataset& dataset);

/// Per-column z-scoring with statistics from a fitting set. Columns with zero
/// variance get unit scale.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  static Standardizer fit(const Eigen::MatrixXd& features);
  static Standardizer identity(std::size_t d);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& features) const;
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
};

struct Split {
  Dataset train;
  Dataset test;
  std::vector<std::string> train_individuals;
  std::vector<std::string> test_individuals;
};

/// Partitions by individual: round(fraction * count) individuals (at least one
/// on each side when there are two or more) go to the training split.
Split split_by_individual(const Dataset& dataset, double train_fraction, std::uint64_t seed);

}  // namespace mtml
