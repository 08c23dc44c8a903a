#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mtml/dataset.hpp"

namespace mtml {

enum class MiningStrategy { random, semi_hard, hard };

std::string to_string(MiningStrategy s);
MiningStrategy mining_strategy_from_string(const std::string& name);

/// Record indices into a Dataset plus the match counts that admitted them.
struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
  int match_pos = 0;
  int match_neg = 0;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

struct MinerConfig {
  int n = 5;
  MiningStrategy strategy = MiningStrategy::random;
  std::size_t batch_size = 64;
  std::size_t triplets_per_anchor = 1;
  std::uint64_t seed = 0;
  // Records of the anchor's own individual may serve as positives.
  bool allow_same_individual = true;

  /// n > T is accepted here and surfaces as NTooStrictError when mining.
  void validate() const;
};

nlohmann::json to_json(const MinerConfig& c);
MinerConfig miner_config_from_json(const nlohmann::json& j, MinerConfig defaults = {});

/// Number of tasks (among those included in matching) whose slots are present
/// on both sides and agree within the task resolution.
int match_count(const LabelMatrix& a, const LabelMatrix& b, const Schema& schema);

enum class PairClass { positive, negative };

PairClass classify_pair(const LabelMatrix& a, const LabelMatrix& b, const Schema& schema, int n);

/// Unordered record pairs with match_count >= n (brute force).
std::size_t admissible_pair_count(const Dataset& dataset, int n, bool allow_same_individual = true);

/// Mines triplets whose three records all come from `pool`. `embeddings` holds
/// one row per dataset record (the learned projection of its features); it is
/// required by the semi_hard and hard strategies and ignored by random.
/// `stream` selects an independent random stream under the configured seed.
std::vector<Triplet> sample_triplets_in_pool(const Dataset& dataset,
                                             std::span<const std::size_t> pool,
                                             const Eigen::MatrixXd* embeddings,
                                             const MinerConfig& config,
                                             std::uint64_t stream = 0);

/// Shuffles the whole dataset into batches of `config.batch_size` and mines
/// each batch. Throws NTooStrictError when no admissible pair exists.
std::vector<Triplet> sample_triplets(const Dataset& dataset, const Eigen::MatrixXd* embeddings,
                                     const MinerConfig& config);

nlohmann::json to_json(const Triplet& t);
void write_triplets_jsonl(std::span<const Triplet> triplets, const std::filesystem::path& path);

}  // namespace mtml
