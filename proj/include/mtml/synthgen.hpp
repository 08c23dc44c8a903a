#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtml/dataset.hpp"

namespace mtml {

struct SynthConfig {
  std::size_t individuals = 40;
  std::size_t steps = 20;
  std::int64_t step_days = 1;
  std::size_t feature_dim = 16;
  std::size_t latent_dim = 4;
  std::int64_t expert_period_days = 21;
  double observer_noise_sd = 0.1;
  double feature_noise_sd = 0.05;
  double drift_fraction = 0.25;
  std::uint64_t seed = 1;

  // Shape of the latent process and readouts.
  double walk_sd = 0.05;         // per-step latent increment
  double latent_bound = 1.0;     // reflection boundary per latent coordinate
  double drift_rate = 0.02;      // latent units per day along the drift direction
  double offset_sd = 1.0;        // individual offset, orthogonal to the signal subspace
  double score_center = 3.0;
  double score_scale = 0.75;
  double score_step = 0.25;      // expert grade quantization

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);

/// Noise-free expert scores and their per-day forward change, one entry per
/// record of the generated dataset (same order).
struct GroundTruth {
  std::vector<std::string> tasks;  // expert task names
  std::vector<std::string> individual_id;
  std::vector<std::int64_t> timestamp;
  std::vector<std::vector<double>> score;   // [record][expert task]
  std::vector<std::vector<double>> change;  // [record][expert task]
  std::vector<bool> drifted;                // [record] individual has a drift segment

  nlohmann::json to_json() const;
  static GroundTruth from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static GroundTruth load(const std::filesystem::path& path);
};

struct SynthOutput {
  Dataset dataset;
  GroundTruth truth;
};

/// Generates a dataset on the default schema. Deterministic in `config.seed`.
/// Gradient slots are left missing.
SynthOutput generate(const SynthConfig& config);

}  // namespace mtml
