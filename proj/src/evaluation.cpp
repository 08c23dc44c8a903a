#include "mtml/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "mtml/error.hpp"
#include "mtml/rng.hpp"

namespace mtml {

double knn_precision(const Eigen::MatrixXd& embeddings, std::span<const LabelMatrix> labels,
                     const Schema& schema, std::size_t k, int n) {
  const std::size_t count = static_cast<std::size_t>(embeddings.rows());
  if (labels.size() != count) throw DimensionError("knn_precision: label count differs from embedding rows");
  if (k == 0 || k >= count) {
    throw ConfigError("knn_precision: k=" + std::to_string(k) + " needs at least k+1 records (have " +
                      std::to_string(count) + ")");
  }
  double sum = 0.0;
  std::vector<std::pair<double, std::size_t>> dist(count - 1);
  for (std::size_t q = 0; q < count; ++q) {
    std::size_t w = 0;
    for (std::size_t j = 0; j < count; ++j) {
      if (j == q) continue;
      dist[w++] = {(embeddings.row(static_cast<Eigen::Index>(q)) - embeddings.row(static_cast<Eigen::Index>(j)))
                       .squaredNorm(),
                   j};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (match_count(labels[q], labels[dist[i].second], schema) >= n) ++hits;
    }
    sum += static_cast<double>(hits) / static_cast<double>(k);
  }
  return sum / static_cast<double>(count);
}

double knn_precision(const Eigen::MatrixXd& embeddings, const Dataset& dataset, std::size_t k, int n) {
  std::vector<LabelMatrix> labels;
  labels.reserve(dataset.size());
  for (const auto& r : dataset.records()) labels.push_back(r.labels);
  return knn_precision(embeddings, labels, dataset.schema(), k, n);
}

namespace {

using TruthIndex = std::map<std::pair<std::string, std::int64_t>, std::size_t>;

TruthIndex index_truth(const GroundTruth& truth) {
  TruthIndex idx;
  for (std::size_t i = 0; i < truth.individual_id.size(); ++i) {
    idx[{truth.individual_id[i], truth.timestamp[i]}] = i;
  }
  return idx;
}

std::optional<std::size_t> truth_column(const GroundTruth& truth, const std::string& task) {
  for (std::size_t e = 0; e < truth.tasks.size(); ++e) {
    if (truth.tasks[e] == task) return e;
  }
  return std::nullopt;
}

std::optional<double> truth_score(const GroundTruth* truth, const TruthIndex& idx, const std::string& task,
                                  const ObservationRecord& r) {
  if (truth == nullptr) return std::nullopt;
  const auto col = truth_column(*truth, task);
  if (!col) return std::nullopt;
  auto it = idx.find({r.individual_id, r.timestamp});
  if (it == idx.end()) return std::nullopt;
  return truth->score[it->second][*col];
}

}  // namespace

std::vector<HeadMetrics> score_regression_eval(const Model& model, const Dataset& test, const GroundTruth* truth) {
  const Eigen::MatrixXd emb = model.embed_dataset(test);
  const TruthIndex idx = truth ? index_truth(*truth) : TruthIndex{};
  std::vector<HeadMetrics> out;
  for (const auto& [task, dim] : model.loss.heads) {
    HeadMetrics h;
    h.task = task;
    h.dim = dim;
    h.name = test.schema()[task].name;
    double se = 0.0, ae = 0.0;
    const bool use_truth = truth && test.schema()[task].kind == TaskKind::expert &&
                           truth_column(*truth, h.name).has_value();
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::optional<double> target;
      if (use_truth) {
        target = truth_score(truth, idx, h.name, test[i]);
      } else if (test[i].labels.present[task]) {
        target = test[i].labels.values[task];
      }
      if (!target) continue;
      const double pred = model.predict(task, emb.row(static_cast<Eigen::Index>(i)).transpose());
      const double e = pred - *target;
      se += e * e;
      ae += std::abs(e);
      ++h.count;
    }
    if (h.count > 0) {
      h.mse = se / static_cast<double>(h.count);
      h.mae = ae / static_cast<double>(h.count);
    }
    out.push_back(std::move(h));
  }
  return out;
}

double predicted_change(const Model& model, std::size_t task, const Eigen::VectorXd& xi, const Eigen::VectorXd& xj) {
  auto it = model.loss.heads.find(task);
  if (it == model.loss.heads.end()) throw ConfigError("task " + std::to_string(task) + " has no head");
  const auto k = static_cast<Eigen::Index>(it->second);
  const double scale = model.targets.tasks.count(task) ? model.targets.tasks.at(task).second : 1.0;
  const auto col = model.params.L.col(k);
  const double ei = col.dot(model.standardizer.apply(xi));
  const double ej = col.dot(model.standardizer.apply(xj));
  return scale * (ej - ei);
}

ChangeMetrics change_eval(const Model& model, const Dataset& test, std::size_t task, const GroundTruth* truth,
                          bool only_drifted) {
  const TruthIndex idx = truth ? index_truth(*truth) : TruthIndex{};
  const std::string& name = test.schema().at(task).name;
  ChangeMetrics m;
  double se = 0.0;
  std::size_t signed_pairs = 0, agree = 0;
  for (const auto& [begin, end] : test.individuals()) {
    if (only_drifted) {
      if (truth == nullptr) throw ConfigError("change_eval: drift filter needs ground truth");
      auto it = idx.find({test[begin].individual_id, test[begin].timestamp});
      if (it == idx.end() || !truth->drifted[it->second]) continue;
    }
    for (std::size_t i = begin; i + 1 < end; ++i) {
      const auto& a = test[i];
      const auto& b = test[i + 1];
      std::optional<double> target;
      const auto ta = truth_score(truth, idx, name, a);
      const auto tb = truth_score(truth, idx, name, b);
      if (ta && tb) {
        target = *tb - *ta;
      } else if (a.labels.present[task] && b.labels.present[task]) {
        target = b.labels.values[task] - a.labels.values[task];
      }
      if (!target) continue;
      const double pred = predicted_change(model, task, a.features, b.features);
      se += (pred - *target) * (pred - *target);
      ++m.pairs;
      if (*target != 0.0) {
        ++signed_pairs;
        if ((pred > 0.0) == (*target > 0.0) && pred != 0.0) ++agree;
      }
    }
  }
  if (m.pairs == 0) throw ConfigError("change_eval: no consecutive same-individual pairs with targets");
  m.mse = se / static_cast<double>(m.pairs);
  m.sign_agreement = signed_pairs > 0 ? static_cast<double>(agree) / static_cast<double>(signed_pairs) : 0.0;
  return m;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  nlohmann::json p = nlohmann::json::object();
  for (const auto& [k, v] : precision_at_k) p[std::to_string(k)] = v;
  j["precision_at_k"] = p;
  auto heads_j = nlohmann::json::array();
  for (const auto& h : heads) {
    heads_j.push_back({{"task", h.task},
                       {"name", h.name},
                       {"dim", h.dim},
                       {"count", h.count},
                       {"mse", h.mse ? nlohmann::json(*h.mse) : nlohmann::json(nullptr)},
                       {"mae", h.mae ? nlohmann::json(*h.mae) : nlohmann::json(nullptr)}});
  }
  j["heads"] = heads_j;
  j["change"] = change ? nlohmann::json{{"pairs", change->pairs},
                                        {"mse", change->mse},
                                        {"sign_agreement", change->sign_agreement}}
                       : nlohmann::json(nullptr);
  j["triplet_satisfaction"] = triplet_satisfaction ? nlohmann::json(*triplet_satisfaction) : nlohmann::json(nullptr);
  j["mean_test_loss"] = mean_test_loss ? nlohmann::json(*mean_test_loss) : nlohmann::json(nullptr);
  j["test_records"] = test_records;
  j["test_triplets"] = test_triplets;
  j["config"] = config;
  return j;
}

EvalReport evaluate(const TrainState& state, const Dataset& test, const EvalOptions& options) {
  const Model& model = state.model;
  if (schema_hash(test.schema()) != model.schema_hash) {
    throw ConfigError("schema hash mismatch: checkpoint " + model.schema_hash + ", dataset " +
                      schema_hash(test.schema()));
  }
  EvalReport report;
  report.test_records = test.size();
  report.config = to_json(state.config);
  const int n = options.n.value_or(state.config.miner.n);

  const Eigen::MatrixXd emb = model.embed_dataset(test);
  for (std::size_t k : options.ks) {
    if (k > 0 && k < test.size()) report.precision_at_k[k] = knn_precision(emb, test, k, n);
  }
  report.heads = score_regression_eval(model, test, options.truth);

  // Change is read off the first expert head.
  for (const auto& [task, dim] : model.loss.heads) {
    if (test.schema()[task].kind != TaskKind::expert) continue;
    try {
      report.change = change_eval(model, test, task, options.truth);
    } catch (const ConfigError&) {
    }
    break;
  }

  MinerConfig miner = state.config.miner;
  miner.strategy = MiningStrategy::random;
  miner.seed = options.seed;
  miner.n = n;
  std::vector<Triplet> triplets;
  try {
    triplets = sample_triplets(test, nullptr, miner);
  } catch (const NTooStrictError&) {
  }
  report.test_triplets = triplets.size();
  if (!triplets.empty()) {
    const Eigen::MatrixXd X = model.standardizer.apply(test.feature_matrix());
    std::vector<std::size_t> all(test.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto heads = head_samples(test, all, model);
    report.mean_test_loss = total_loss(model.params, LossBatch{X, triplets, heads}, model.loss).total;
    std::size_t satisfied = 0;
    for (const auto& t : triplets) {
      const double hinge =
          angular_hinge(model.params.L, X.row(static_cast<Eigen::Index>(t.anchor)).transpose(),
                        X.row(static_cast<Eigen::Index>(t.positive)).transpose(),
                        X.row(static_cast<Eigen::Index>(t.negative)).transpose(), model.loss.alpha_deg);
      if (hinge == 0.0) ++satisfied;
    }
    report.triplet_satisfaction = static_cast<double>(satisfied) / static_cast<double>(triplets.size());
  }
  return report;
}

SweepGrid sweep_grid_from_json(const nlohmann::json& j) {
  SweepGrid g;
  try {
    if (j.contains("n")) g.n = j["n"].get<std::vector<int>>();
    if (j.contains("alpha")) g.alpha = j["alpha"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sweep grid: ") + e.what());
  }
  return g;
}

namespace {

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string format_alpha(double a) {
  char buf[32];
  if (a == std::floor(a)) {
    std::snprintf(buf, sizeof buf, "%.0f\xC2\xB0", a);
  } else {
    std::snprintf(buf, sizeof buf, "%g\xC2\xB0", a);
  }
  return buf;
}

std::string cell_text(const SweepCell& c, bool precision) {
  if (c.status != "ok") return c.status;
  const auto& v = precision ? c.precision_at_5 : c.test_loss;
  return v ? format_value(*v) : "n/a";
}

struct CellSpec {
  std::string table;
  std::string row;
  double column;
  TrainConfig config;
};

SweepCell run_cell(const CellSpec& spec, const Split& split) {
  SweepCell cell;
  cell.table = spec.table;
  cell.row = spec.row;
  cell.column = spec.column;
  try {
    TrainState state = train(split.train, spec.config);
    state.test_individuals = split.test_individuals;
    EvalOptions opts;
    opts.ks = {5};
    opts.seed = mix_seed(spec.config.seed, 0x7e57);
    const EvalReport report = evaluate(state, split.test, opts);
    cell.test_loss = report.mean_test_loss;
    if (report.precision_at_k.count(5)) cell.precision_at_5 = report.precision_at_k.at(5);
    cell.status = "ok";
    cell.state = std::move(state);
  } catch (const NTooStrictError&) {
    cell.status = "n too strict";
  } catch (const DivergenceError&) {
    cell.status = "diverged";
  }
  return cell;
}

}  // namespace

SweepResult sweep(const Dataset& dataset, const TrainConfig& base, const SweepGrid& grid, const SweepOptions& options) {
  base.validate();
  const Split split = split_by_individual(dataset, base.train_fraction, base.seed);

  std::vector<CellSpec> specs;
  for (int n : grid.n) {
    TrainConfig c = base;
    c.loss.mode = LossMode::opml_nll;
    c.loss.lambda_mse = 0.0;
    c.miner.n = n;
    specs.push_back({"n", "OPML", static_cast<double>(n), c});
  }
  const double lambda_with_mse = base.loss.lambda_mse > 0.0 ? base.loss.lambda_mse : 0.1;
  for (const auto& [row, lambda] :
       {std::pair<std::string, double>{"Multi-task/ OPML", 0.0}, {"Multi-task/ OPML+MSE", lambda_with_mse}}) {
    for (double a : grid.alpha) {
      TrainConfig c = base;
      c.loss.mode = LossMode::opml_nll;
      c.loss.alpha_deg = a;
      c.loss.lambda_mse = lambda;
      specs.push_back({"alpha", row, a, c});
    }
  }

  SweepResult result;
  result.cells.resize(specs.size());
  const unsigned jobs = std::max(1u, std::min<unsigned>(options.jobs, static_cast<unsigned>(specs.size())));
  if (jobs == 1) {
    for (std::size_t i = 0; i < specs.size(); ++i) result.cells[i] = run_cell(specs[i], split);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (unsigned w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < specs.size(); i = next++) result.cells[i] = run_cell(specs[i], split);
      });
    }
    for (auto& t : workers) t.join();
  }

  for (int n : grid.n) {
    result.admissible_pairs.push_back(admissible_pair_count(split.train, n, base.miner.allow_same_individual));
  }

  auto n_table = [&](bool precision) {
    std::ostringstream out;
    out << "Network \\ n";
    for (int n : grid.n) out << ',' << n;
    out << "\nOPML";
    for (const auto& c : result.cells) {
      if (c.table == "n") out << ',' << cell_text(c, precision);
    }
    out << '\n';
    if (!precision) {
      out << "admissible pairs";
      for (std::size_t p : result.admissible_pairs) out << ',' << p;
      out << '\n';
    }
    return out.str();
  };
  auto alpha_table = [&](bool precision) {
    std::ostringstream out;
    out << "loss \\ \xCE\xB1";
    for (double a : grid.alpha) out << ',' << format_alpha(a);
    out << '\n';
    for (const std::string row : {"Multi-task/ OPML", "Multi-task/ OPML+MSE"}) {
      out << row;
      for (const auto& c : result.cells) {
        if (c.table == "alpha" && c.row == row) out << ',' << cell_text(c, precision);
      }
      out << '\n';
    }
    return out.str();
  };
  result.n_table = n_table(false);
  result.n_precision_table = n_table(true);
  result.alpha_table = alpha_table(false);
  result.alpha_precision_table = alpha_table(true);
  return result;
}

void write_sweep(const SweepResult& result, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir / "cells");
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream out(out_dir / name);
    if (!out) throw LoadError("cannot write " + (out_dir / name).string());
    out << text;
  };
  write("n_sweep.csv", result.n_table);
  write("n_sweep_precision.csv", result.n_precision_table);
  write("alpha_sweep.csv", result.alpha_table);
  write("alpha_sweep_precision.csv", result.alpha_precision_table);
  for (const auto& c : result.cells) {
    if (!c.state) continue;
    std::string name = c.table == "n" ? "n_" + std::to_string(static_cast<int>(c.column))
                                      : "alpha_" + format_value(c.column) +
                                            (c.row.find("MSE") != std::string::npos ? "_mse" : "");
    save_checkpoint(*c.state, out_dir / "cells" / (name + ".json"));
  }
}

}  // namespace mtml
