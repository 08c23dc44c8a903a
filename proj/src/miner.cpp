#include "mtml/miner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "mtml/error.hpp"
#include "mtml/rng.hpp"

namespace mtml {

std::string to_string(MiningStrategy s) {
  switch (s) {
    case MiningStrategy::random: return "random";
    case MiningStrategy::semi_hard: return "semi_hard";
    case MiningStrategy::hard: return "hard";
  }
  return "unknown";
}

MiningStrategy mining_strategy_from_string(const std::string& name) {
  if (name == "random") return MiningStrategy::random;
  if (name == "semi_hard") return MiningStrategy::semi_hard;
  if (name == "hard") return MiningStrategy::hard;
  throw ConfigError("unknown mining strategy '" + name + "'");
}

void MinerConfig::validate() const {
  if (n < 0) throw ConfigError("miner: n must be non-negative");
  if (batch_size < 3) throw ConfigError("miner: batch_size must be at least 3");
  if (triplets_per_anchor == 0) throw ConfigError("miner: triplets_per_anchor must be positive");
}

nlohmann::json to_json(const MinerConfig& c) {
  return {{"n", c.n},
          {"strategy", to_string(c.strategy)},
          {"batch_size", c.batch_size},
          {"triplets_per_anchor", c.triplets_per_anchor},
          {"seed", c.seed},
          {"allow_same_individual", c.allow_same_individual}};
}

MinerConfig miner_config_from_json(const nlohmann::json& j, MinerConfig c) {
  try {
    c.n = j.value("n", c.n);
    if (j.contains("strategy")) c.strategy = mining_strategy_from_string(j["strategy"].get<std::string>());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.triplets_per_anchor = j.value("triplets_per_anchor", c.triplets_per_anchor);
    c.seed = j.value("seed", c.seed);
    c.allow_same_individual = j.value("allow_same_individual", c.allow_same_individual);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("miner config: ") + e.what());
  }
  c.validate();
  return c;
}

int match_count(const LabelMatrix& a, const LabelMatrix& b, const Schema& schema) {
  int count = 0;
  for (std::size_t t = 0; t < schema.size(); ++t) {
    if (!schema[t].include_in_match) continue;
    if (!a.present[t] || !b.present[t]) continue;
    if (std::abs(a.values[t] - b.values[t]) <= schema[t].resolution) ++count;
  }
  return count;
}

PairClass classify_pair(const LabelMatrix& a, const LabelMatrix& b, const Schema& schema, int n) {
  return match_count(a, b, schema) >= n ? PairClass::positive : PairClass::negative;
}

std::size_t admissible_pair_count(const Dataset& dataset, int n, bool allow_same_individual) {
  std::size_t count = 0;
  const auto& schema = dataset.schema();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (std::size_t j = i + 1; j < dataset.size(); ++j) {
      if (!allow_same_individual && dataset[i].individual_id == dataset[j].individual_id) continue;
      if (match_count(dataset[i].labels, dataset[j].labels, schema) >= n) ++count;
    }
  }
  return count;
}

namespace {

double sq_dist(const Eigen::MatrixXd& emb, std::size_t i, std::size_t j) {
  return (emb.row(static_cast<Eigen::Index>(i)) - emb.row(static_cast<Eigen::Index>(j))).squaredNorm();
}

struct Candidates {
  std::size_t anchor;
  std::vector<std::size_t> positives;  // pool-local positions
  std::vector<std::size_t> negatives;
};

}  // namespace

std::vector<Triplet> sample_triplets_in_pool(const Dataset& dataset,
                                             std::span<const std::size_t> pool,
                                             const Eigen::MatrixXd* embeddings,
                                             const MinerConfig& config, std::uint64_t stream) {
  config.validate();
  if (config.strategy != MiningStrategy::random && embeddings == nullptr) {
    throw ConfigError("miner: " + to_string(config.strategy) + " mining needs current embeddings");
  }
  const auto& schema = dataset.schema();
  const std::size_t m = pool.size();

  std::vector<int> matches(m * m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const int c = match_count(dataset[pool[i]].labels, dataset[pool[j]].labels, schema);
      matches[i * m + j] = matches[j * m + i] = c;
    }
  }

  std::vector<Candidates> anchors;
  for (std::size_t i = 0; i < m; ++i) {
    Candidates c{i, {}, {}};
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i || pool[j] == pool[i]) continue;
      if (matches[i * m + j] >= config.n) {
        if (config.allow_same_individual ||
            dataset[pool[i]].individual_id != dataset[pool[j]].individual_id) {
          c.positives.push_back(j);
        }
      } else {
        c.negatives.push_back(j);
      }
    }
    if (!c.positives.empty() && !c.negatives.empty()) anchors.push_back(std::move(c));
  }

  std::vector<Triplet> out;
  if (anchors.empty()) return out;
  Rng rng(mix_seed(config.seed, stream));

  auto make = [&](std::size_t a, std::size_t p, std::size_t n) {
    return Triplet{pool[a], pool[p], pool[n], matches[a * m + p], matches[a * m + n]};
  };

  switch (config.strategy) {
    case MiningStrategy::random: {
      const std::size_t draws = anchors.size() * config.triplets_per_anchor;
      for (std::size_t k = 0; k < draws; ++k) {
        const auto& c = anchors[rng.index(anchors.size())];
        const std::size_t p = c.positives[rng.index(c.positives.size())];
        const std::size_t n = c.negatives[rng.index(c.negatives.size())];
        out.push_back(make(c.anchor, p, n));
      }
      break;
    }
    case MiningStrategy::semi_hard: {
      for (auto& c : anchors) {
        rng.shuffle(c.positives);
        const std::size_t take = std::min(config.triplets_per_anchor, c.positives.size());
        for (std::size_t k = 0; k < take; ++k) {
          const std::size_t p = c.positives[k];
          const double d_ap = sq_dist(*embeddings, pool[c.anchor], pool[p]);
          std::size_t best = m, farthest = m;
          double best_d = std::numeric_limits<double>::infinity();
          double far_d = -1.0;
          for (std::size_t n : c.negatives) {
            const double d_an = sq_dist(*embeddings, pool[c.anchor], pool[n]);
            if (d_an > d_ap && d_an < best_d) {
              best = n;
              best_d = d_an;
            }
            if (d_an > far_d) {
              farthest = n;
              far_d = d_an;
            }
          }
          out.push_back(make(c.anchor, p, best != m ? best : farthest));
        }
      }
      break;
    }
    case MiningStrategy::hard: {
      for (auto& c : anchors) {
        auto dist = [&](std::size_t j) { return sq_dist(*embeddings, pool[c.anchor], pool[j]); };
        std::vector<std::pair<double, std::size_t>> pos;
        for (std::size_t p : c.positives) pos.emplace_back(-dist(p), pool[p]);
        std::vector<std::size_t> pos_order(c.positives.size());
        std::iota(pos_order.begin(), pos_order.end(), std::size_t{0});
        std::sort(pos_order.begin(), pos_order.end(), [&](std::size_t x, std::size_t y) {
          return pos[x] < pos[y];  // farthest first, then lower record index
        });
        std::size_t nearest = c.negatives.front();
        double near_d = dist(nearest);
        for (std::size_t n : c.negatives) {
          const double dn = dist(n);
          if (dn < near_d || (dn == near_d && pool[n] < pool[nearest])) {
            nearest = n;
            near_d = dn;
          }
        }
        const std::size_t take = std::min(config.triplets_per_anchor, c.positives.size());
        for (std::size_t k = 0; k < take; ++k) {
          out.push_back(make(c.anchor, c.positives[pos_order[k]], nearest));
        }
      }
      break;
    }
  }
  return out;
}

std::vector<Triplet> sample_triplets(const Dataset& dataset, const Eigen::MatrixXd* embeddings,
                                     const MinerConfig& config) {
  config.validate();
  const std::size_t admissible = admissible_pair_count(dataset, config.n, config.allow_same_individual);
  if (admissible == 0) throw NTooStrictError(config.n, admissible);

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(config.seed, 0xba7c4));
  rng.shuffle(order);

  std::vector<Triplet> out;
  std::uint64_t batch = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size, ++batch) {
    const std::size_t end = std::min(order.size(), begin + config.batch_size);
    std::span<const std::size_t> pool(order.data() + begin, end - begin);
    auto part = sample_triplets_in_pool(dataset, pool, embeddings, config, batch + 1);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

nlohmann::json to_json(const Triplet& t) {
  return {{"anchor", t.anchor},
          {"positive", t.positive},
          {"negative", t.negative},
          {"match_pos", t.match_pos},
          {"match_neg", t.match_neg}};
}

void write_triplets_jsonl(std::span<const Triplet> triplets, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  for (const auto& t : triplets) out << to_json(t).dump() << '\n';
}

}  // namespace mtml
