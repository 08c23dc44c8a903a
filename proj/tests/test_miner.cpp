#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <tuple>

#include "mtml/error.hpp"
#include "mtml/miner.hpp"
#include "mtml/rng.hpp"
#include "test_util.hpp"

using namespace mtml;
using namespace mtml::testing;

namespace {

LabelMatrix labels(const std::vector<double>& values, const std::vector<bool>& present = {}) {
  LabelMatrix m(values.size());
  for (std::size_t t = 0; t < values.size(); ++t) {
    if (present.empty() || present[t]) m.set(t, values[t]);
  }
  return m;
}

// Independent recount written directly from the matching rule.
int recount(const ObservationRecord& a, const ObservationRecord& b, const Schema& schema) {
  int c = 0;
  for (std::size_t t = 0; t < schema.size(); ++t) {
    const bool both = a.labels.present[t] && b.labels.present[t];
    if (schema[t].include_in_match && both &&
        std::fabs(a.labels.values[t] - b.labels.values[t]) <= schema[t].resolution) {
      c += 1;
    }
  }
  return c;
}

std::size_t brute_pairs(const Dataset& ds, int n) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) c += recount(ds[i], ds[j], ds.schema()) >= n ? 1 : 0;
  }
  return c;
}

// 1-D points in one individual, timestamps in input order so indices are kept.
Dataset line(const std::vector<double>& xs, const std::vector<double>& label) {
  std::vector<ObservationRecord> recs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Eigen::VectorXd x(1);
    x[0] = xs[i];
    recs.push_back(make_record("a", static_cast<std::int64_t>(i), x, {label[i]}));
  }
  return Dataset(flat_schema(1), recs);
}

std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> v(ds.size());
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

Dataset random_dataset(Rng& rng, std::size_t tasks) {
  const std::size_t records = 5 + rng.index(46);
  std::vector<ObservationRecord> recs;
  for (std::size_t i = 0; i < records; ++i) {
    std::vector<double> y(tasks);
    std::vector<bool> present(tasks);
    for (std::size_t t = 0; t < tasks; ++t) {
      y[t] = 0.5 * static_cast<double>(rng.index(3));
      present[t] = rng.uniform() < 0.85;
    }
    Eigen::VectorXd x(3);
    for (int k = 0; k < 3; ++k) x[k] = rng.normal();
    recs.push_back(make_record("i" + std::to_string(rng.index(6)), static_cast<std::int64_t>(i), x, y, present));
  }
  return Dataset(flat_schema(tasks, 0.25), recs);
}

}  // namespace

TEST_CASE("match_count examples") {
  const Schema two = flat_schema(2, 0.1);
  CHECK(match_count(labels({3.0, 3.25}), labels({3.0, 3.75}), two) == 1);

  const Schema nine = flat_schema(9, 0.1);
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9};
  CHECK(match_count(labels(v), labels(v), nine) == 9);
  std::vector<bool> one_missing(9, true);
  one_missing[4] = false;
  CHECK(match_count(labels(v), labels(v, one_missing), nine) == 8);
  CHECK(match_count(labels(v, one_missing), labels(v), nine) == 8);

  SUBCASE("resolution boundary is inclusive") {
    const Schema s = flat_schema(1, 0.25);
    CHECK(match_count(labels({1.0}), labels({1.25}), s) == 1);
    CHECK(match_count(labels({1.0}), labels({1.3}), s) == 0);
  }
  SUBCASE("tasks excluded from matching never count") {
    Schema s = flat_schema(2, 0.1);
    s[1].include_in_match = false;
    CHECK(match_count(labels({1.0, 2.0}), labels({1.0, 2.0}), s) == 1);
  }
}

TEST_CASE("classify_pair boundaries") {
  const Schema s = flat_schema(9, 0.0);
  const std::vector<double> a{0, 0, 0, 0, 0, 0, 0, 0, 0};
  CHECK(classify_pair(labels(a), labels({0, 0, 0, 0, 0, 1, 1, 1, 1}), s, 5) == PairClass::positive);
  CHECK(classify_pair(labels(a), labels({0, 0, 0, 0, 1, 1, 1, 1, 1}), s, 5) == PairClass::negative);
  for (int n = 0; n <= 9; ++n) CHECK(classify_pair(labels(a), labels(a), s, n) == PairClass::positive);
}

TEST_CASE("match_count is symmetric and bounded") {
  Rng rng(21);
  const Schema s = flat_schema(6, 0.3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> va(6), vb(6);
    std::vector<bool> pa(6), pb(6);
    for (int t = 0; t < 6; ++t) {
      va[t] = rng.uniform(0, 1);
      vb[t] = rng.uniform(0, 1);
      pa[t] = rng.uniform() < 0.8;
      pb[t] = rng.uniform() < 0.8;
    }
    const int ab = match_count(labels(va, pa), labels(vb, pb), s);
    CHECK(ab == match_count(labels(vb, pb), labels(va, pa), s));
    CHECK(ab >= 0);
    CHECK(ab <= 6);
  }
}

TEST_CASE("admissible_pair_count examples") {
  std::vector<ObservationRecord> recs;
  for (int i = 0; i < 4; ++i) recs.push_back(make_record("a", i, Eigen::Vector2d(i, 0), {1.0, 2.0}));
  const Dataset same(flat_schema(2), recs);
  CHECK(admissible_pair_count(same, 2) == 6);

  const Dataset line7 = line({0, 1, 2, 3, 4, 5, 6}, {0, 1, 2, 3, 4, 5, 6});
  CHECK(admissible_pair_count(line7, 0) == 21);
  CHECK(admissible_pair_count(line7, 1) == 0);

  // planted 5-record set: labels (task0, task1)
  std::vector<ObservationRecord> planted;
  const std::vector<std::vector<double>> ys{{1, 1}, {1, 2}, {2, 2}, {1, 1}, {3, 3}};
  for (std::size_t i = 0; i < ys.size(); ++i) {
    planted.push_back(make_record("p", static_cast<std::int64_t>(i), Eigen::Vector2d(0, 0), ys[i]));
  }
  const Dataset five(flat_schema(2), planted);
  CHECK(admissible_pair_count(five, 1) == brute_pairs(five, 1));
  CHECK(admissible_pair_count(five, 2) == brute_pairs(five, 2));
  // pairs sharing a task: (0,1)(0,3)(1,2)(1,3) share one; (0,3) shares both
  CHECK(admissible_pair_count(five, 1) == 4);
  CHECK(admissible_pair_count(five, 2) == 1);
}

TEST_CASE("three records: the triplet is unique up to anchor/positive swap") {
  std::vector<ObservationRecord> recs;
  recs.push_back(make_record("a", 0, Eigen::Vector2d(0, 0), {1.0, 1.0}));
  recs.push_back(make_record("a", 1, Eigen::Vector2d(1, 0), {1.0, 1.0}));
  recs.push_back(make_record("a", 2, Eigen::Vector2d(0, 1), {5.0, 5.0}));
  const Dataset ds(flat_schema(2), recs);

  // brute-force enumeration of every ordered index triple
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> valid;
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t p = 0; p < 3; ++p) {
      for (std::size_t q = 0; q < 3; ++q) {
        if (a == p || a == q || p == q) continue;
        if (recount(ds[a], ds[p], ds.schema()) >= 1 && recount(ds[a], ds[q], ds.schema()) < 1) valid.insert({a, p, q});
      }
    }
  }
  CHECK(valid.size() == 2);

  MinerConfig cfg;
  cfg.n = 1;
  cfg.batch_size = 3;
  cfg.triplets_per_anchor = 4;
  const auto out = sample_triplets(ds, nullptr, cfg);
  REQUIRE_FALSE(out.empty());
  for (const auto& t : out) CHECK(valid.count({t.anchor, t.positive, t.negative}) == 1);
}

TEST_CASE("n above the task count is too strict") {
  const Dataset ds = line({0, 1, 2}, {1, 1, 1});
  MinerConfig cfg;
  cfg.n = 2;  // T = 1
  try {
    sample_triplets(ds, nullptr, cfg);
    FAIL("expected NTooStrictError");
  } catch (const NTooStrictError& e) {
    CHECK(e.n() == 2);
    CHECK(e.admissible_pairs() == 0);
    CHECK(std::string(e.what()).find("n too strict") != std::string::npos);
  }
}

TEST_CASE("semi_hard picks the closest negative beyond the positive distance") {
  // records 0,1 share a label; 2,3,4 are negatives at x = 0.5, 2, 3
  const Dataset ds = line({0, 1, 0.5, 2, 3}, {0, 0, 5, 7, 9});
  const Eigen::MatrixXd emb = ds.feature_matrix();  // L = identity
  MinerConfig cfg;
  cfg.n = 1;
  cfg.strategy = MiningStrategy::semi_hard;
  const auto pool = all_indices(ds);
  const auto out = sample_triplets_in_pool(ds, pool, &emb, cfg);
  REQUIRE(out.size() == 2);
  // anchor 0: d(0,1)=1, negatives at 0.25, 4, 9 -> record 3
  CHECK(out[0] == Triplet{0, 1, 3, 1, 0});
  // anchor 1: d(1,0)=1, negatives at 0.25, 1, 4; 1 is not strictly beyond -> record 4
  CHECK(out[1] == Triplet{1, 0, 4, 1, 0});
}

TEST_CASE("semi_hard falls back to the farthest negative") {
  const Dataset ds = line({0, 2, 0.5, 1}, {0, 0, 5, 7});
  const Eigen::MatrixXd emb = ds.feature_matrix();
  MinerConfig cfg;
  cfg.n = 1;
  cfg.strategy = MiningStrategy::semi_hard;
  const auto pool = all_indices(ds);
  const auto out = sample_triplets_in_pool(ds, pool, &emb, cfg);
  REQUIRE(out.size() == 2);
  CHECK(out[0].negative == 3);  // d(a,p)=4, negatives at 0.25 and 1
  CHECK(out[1].negative == 2);  // anchor at 2: negatives at 2.25 and 1
}

TEST_CASE("hard picks the farthest positive and nearest negative") {
  const Dataset ds = line({0, 1, 3, 2, -0.5}, {0, 0, 0, 1, 1});
  const Eigen::MatrixXd emb = ds.feature_matrix();
  MinerConfig cfg;
  cfg.n = 1;
  cfg.strategy = MiningStrategy::hard;
  const auto pool = all_indices(ds);
  const auto out = sample_triplets_in_pool(ds, pool, &emb, cfg);
  REQUIRE(out.size() == 5);
  CHECK(out[0] == Triplet{0, 2, 4, 1, 0});
  // anchor 3: only positive is 4; negatives 1 and 2 tie at distance 1 -> lower index
  CHECK(out[3] == Triplet{3, 4, 1, 1, 0});
}

TEST_CASE("strategies other than random require embeddings") {
  const Dataset ds = line({0, 1, 2}, {0, 0, 1});
  MinerConfig cfg;
  cfg.n = 1;
  cfg.strategy = MiningStrategy::hard;
  CHECK_THROWS_AS(sample_triplets(ds, nullptr, cfg), ConfigError);
}

TEST_CASE("mined triplets satisfy the match invariants on random datasets") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t tasks = 2 + rng.index(4);
    const Dataset ds = random_dataset(rng, tasks);
    const Eigen::MatrixXd emb = ds.feature_matrix();
    std::size_t previous = brute_pairs(ds, 0);
    for (int n = 1; n <= static_cast<int>(tasks); ++n) {
      const std::size_t count = admissible_pair_count(ds, n);
      CHECK(count == brute_pairs(ds, n));
      CHECK(count <= previous);
      previous = count;
      for (auto strategy : {MiningStrategy::random, MiningStrategy::semi_hard, MiningStrategy::hard}) {
        MinerConfig cfg;
        cfg.n = n;
        cfg.strategy = strategy;
        cfg.batch_size = 16;
        cfg.triplets_per_anchor = 2;
        cfg.seed = static_cast<std::uint64_t>(trial);
        if (count == 0) {
          CHECK_THROWS_AS(sample_triplets(ds, &emb, cfg), NTooStrictError);
          continue;
        }
        const auto out = sample_triplets(ds, &emb, cfg);
        for (const auto& t : out) {
          CHECK(t.anchor != t.positive);
          CHECK(t.anchor != t.negative);
          CHECK(t.positive != t.negative);
          CHECK(recount(ds[t.anchor], ds[t.positive], ds.schema()) >= n);
          CHECK(recount(ds[t.anchor], ds[t.negative], ds.schema()) < n);
          CHECK(t.match_pos == recount(ds[t.anchor], ds[t.positive], ds.schema()));
          CHECK(t.match_neg == recount(ds[t.anchor], ds[t.negative], ds.schema()));
        }
        CHECK(sample_triplets(ds, &emb, cfg) == out);
      }
    }
  }
}

TEST_CASE("forbidding same-individual positives") {
  Rng rng(5);
  const Dataset ds = random_dataset(rng, 3);
  MinerConfig cfg;
  cfg.n = 1;
  cfg.allow_same_individual = false;
  cfg.triplets_per_anchor = 3;
  std::size_t cross = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      cross += ds[i].individual_id != ds[j].individual_id && recount(ds[i], ds[j], ds.schema()) >= 1;
    }
  }
  CHECK(admissible_pair_count(ds, 1, false) == cross);
  REQUIRE(cross > 0);
  for (const auto& t : sample_triplets(ds, nullptr, cfg)) {
    CHECK(ds[t.anchor].individual_id != ds[t.positive].individual_id);
  }
}

TEST_CASE("different seeds give different random triplets") {
  Rng rng(8);
  const Dataset ds = random_dataset(rng, 3);
  MinerConfig a;
  a.n = 1;
  MinerConfig b = a;
  b.seed = 1234;
  CHECK(sample_triplets(ds, nullptr, a) != sample_triplets(ds, nullptr, b));
}

TEST_CASE("miner config validation and JSON lines dump") {
  MinerConfig c;
  c.batch_size = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MinerConfig{};
  c.n = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(miner_config_from_json({{"strategy", "greedy"}}), ConfigError);
  const MinerConfig back = miner_config_from_json(to_json(MinerConfig{3, MiningStrategy::hard, 32, 2, 9, false}));
  CHECK(back.n == 3);
  CHECK(back.strategy == MiningStrategy::hard);
  CHECK_FALSE(back.allow_same_individual);

  TempDir dir("miner");
  const std::vector<Triplet> ts{{0, 1, 2, 3, 1}, {4, 5, 6, 2, 0}};
  write_triplets_jsonl(ts, dir / "t.jsonl");
  const std::string text = read_file(dir / "t.jsonl");
  CHECK(std::count(text.begin(), text.end(), '\n') == 2);
  CHECK(nlohmann::json::parse(text.substr(0, text.find('\n')))["match_pos"] == 3);
}
