#include "mtml/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mtml/error.hpp"
#include "mtml/rng.hpp"

namespace mtml {

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kEpochStream = 0xe90c;

std::size_t resolve_embedding_dim(std::size_t requested, std::size_t d) {
  if (d < 2) throw ConfigError("feature dimension must be at least 2");
  return std::min(requested, d - 1);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a positive finite number");
  if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction must be in (0, 1]");
  if (!(loss.alpha_deg > 0.0 && loss.alpha_deg < 90.0)) throw ConfigError("alpha must be in (0, 90) degrees");
  if (!(loss.tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(loss.lambda_mse >= 0.0)) throw ConfigError("lambda_mse must be non-negative");
  miner.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"embedding_dim", c.embedding_dim},
          {"triplets_per_batch", c.triplets_per_batch},
          {"lr", c.lr},
          {"lr_decay", c.lr_decay},
          {"method", to_string(c.method)},
          {"loss", to_json(c.loss)},
          {"miner", to_json(c.miner)},
          {"constrain_r", c.constrain_r},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"train_fraction", c.train_fraction}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.triplets_per_batch = j.value("triplets_per_batch", c.triplets_per_batch);
    c.lr = j.value("lr", c.lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    if (j.contains("method")) c.method = optimizer_method_from_string(j["method"].get<std::string>());
    if (j.contains("loss")) c.loss = loss_config_from_json(j["loss"], c.loss);
    if (j.contains("miner")) c.miner = miner_config_from_json(j["miner"], c.miner);
    c.constrain_r = j.value("constrain_r", c.constrain_r);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TargetScaler TargetScaler::fit(const Dataset& dataset, const HeadAssignment& heads) {
  TargetScaler s;
  for (const auto& [task, dim] : heads) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& r : dataset.records()) {
      if (!r.labels.present[task]) continue;
      sum += r.labels.values[task];
      ++n;
    }
    const double mean = n > 0 ? sum / static_cast<double>(n) : 0.0;
    for (const auto& r : dataset.records()) {
      if (!r.labels.present[task]) continue;
      const double e = r.labels.values[task] - mean;
      sq += e * e;
    }
    const double sd = n > 0 ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
    s.tasks[task] = {mean, sd > 1e-12 ? sd : 1.0};
  }
  return s;
}

double TargetScaler::forward(std::size_t task, double y) const {
  auto it = tasks.find(task);
  if (it == tasks.end()) return y;
  return (y - it->second.first) / it->second.second;
}

double TargetScaler::inverse(std::size_t task, double z) const {
  auto it = tasks.find(task);
  if (it == tasks.end()) return z;
  return it->second.first + it->second.second * z;
}

Eigen::MatrixXd Model::embed_dataset(const Dataset& dataset) const {
  if (dataset.dim() != params.input_dim()) {
    throw DimensionError("dataset has d=" + std::to_string(dataset.dim()) + ", model expects " +
                         std::to_string(params.input_dim()));
  }
  return standardizer.apply(dataset.feature_matrix()) * params.L;
}

double Model::predict(std::size_t task, const Eigen::VectorXd& embedding) const {
  auto it = loss.heads.find(task);
  if (it == loss.heads.end()) throw ConfigError("task " + std::to_string(task) + " has no head");
  return targets.inverse(task, embedding[static_cast<Eigen::Index>(it->second)]);
}

bool TrainHistory::same_trajectory(const TrainHistory& other) const {
  if (epochs.size() != other.epochs.size()) return false;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = other.epochs[i];
    if (a.epoch != b.epoch || a.total != b.total || a.metric != b.metric || a.mse != b.mse ||
        a.triplets != b.triplets || a.admissible_pairs != b.admissible_pairs ||
        a.ortho_residual_L != b.ortho_residual_L || a.ortho_residual_R != b.ortho_residual_R) {
      return false;
    }
  }
  return true;
}

nlohmann::json to_json(const EpochStats& e) {
  return {{"epoch", e.epoch},
          {"total", e.total},
          {"metric", e.metric},
          {"mse", e.mse},
          {"triplets", e.triplets},
          {"admissible_pairs", e.admissible_pairs},
          {"ortho_residual_L", e.ortho_residual_L},
          {"ortho_residual_R", e.ortho_residual_R},
          {"wall_seconds", e.wall_seconds}};
}

namespace {

EpochStats epoch_from_json(const nlohmann::json& j) {
  EpochStats e;
  e.epoch = j.at("epoch").get<int>();
  e.total = j.at("total").get<double>();
  e.metric = j.at("metric").get<double>();
  e.mse = j.at("mse").get<double>();
  e.triplets = j.at("triplets").get<std::size_t>();
  e.admissible_pairs = j.at("admissible_pairs").get<std::size_t>();
  e.ortho_residual_L = j.at("ortho_residual_L").get<double>();
  e.ortho_residual_R = j.at("ortho_residual_R").get<double>();
  e.wall_seconds = j.value("wall_seconds", 0.0);
  return e;
}

std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& dir, int epoch) {
  char name[64];
  std::snprintf(name, sizeof name, "checkpoint_epoch_%04d.json", epoch);
  return dir / name;
}

}  // namespace

std::vector<HeadSample> head_samples(const Dataset& dataset, std::span<const std::size_t> records,
                                     const Model& model) {
  std::vector<HeadSample> out;
  for (std::size_t r : records) {
    for (const auto& [task, dim] : model.loss.heads) {
      if (!dataset[r].labels.present[task]) continue;
      out.push_back({r, task, model.targets.forward(task, dataset[r].labels.values[task])});
    }
  }
  return out;
}

TrainState initialize_training(const Dataset& dataset, const TrainConfig& config) {
  config.validate();
  if (dataset.empty()) throw ConfigError("training set is empty");
  const std::size_t l = resolve_embedding_dim(config.embedding_dim, dataset.dim());

  const std::size_t admissible =
      admissible_pair_count(dataset, config.miner.n, config.miner.allow_same_individual);
  if (admissible == 0) throw NTooStrictError(config.miner.n, admissible);

  TrainState state;
  state.config = config;
  state.config.embedding_dim = l;
  Model& model = state.model;
  model.loss = config.loss;
  if (model.loss.heads.empty()) model.loss.heads = default_head_assignment(dataset.schema(), l);
  for (const auto& [task, dim] : model.loss.heads) {
    if (task >= dataset.task_count()) throw ConfigError("head references unknown task " + std::to_string(task));
  }
  model.loss.validate(l);
  state.config.loss.heads = model.loss.heads;
  model.schema_hash = schema_hash(dataset.schema());
  model.standardizer = Standardizer::fit(dataset.feature_matrix());
  model.targets = TargetScaler::fit(dataset, model.loss.heads);
  model.params = MetricParams::random(dataset.dim(), l, mix_seed(config.seed, kInitStream));

  state.opt_L.method = state.opt_R.method = config.method;
  state.opt_L.learning_rate = state.opt_R.learning_rate = config.lr;
  return state;
}

void continue_training(TrainState& state, const Dataset& dataset, const TrainOptions& options) {
  const TrainConfig& config = state.config;
  Model& model = state.model;
  MetricParams& params = model.params;
  if (schema_hash(dataset.schema()) != model.schema_hash) {
    throw ConfigError("dataset schema does not match the training state");
  }
  const Eigen::MatrixXd X = model.standardizer.apply(dataset.feature_matrix());
  const std::size_t admissible =
      admissible_pair_count(dataset, config.miner.n, config.miner.allow_same_individual);
  if (admissible == 0) throw NTooStrictError(config.miner.n, admissible);
  const bool uses_r = config.loss.mode == LossMode::opml_nll;
  const bool needs_embeddings = config.miner.strategy != MiningStrategy::random;
  Eigen::MatrixXd embeddings = Eigen::MatrixXd::Zero(X.rows(), params.L.cols());

  while (state.epochs_done < config.epochs) {
    const int epoch = state.epochs_done;  // 0-based
    const auto started = std::chrono::steady_clock::now();
    const std::uint64_t epoch_seed = mix_seed(config.seed, kEpochStream + static_cast<std::uint64_t>(epoch));
    Rng rng(epoch_seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);

    MinerConfig miner = config.miner;
    miner.seed = epoch_seed;
    const double lr = config.lr * std::pow(config.lr_decay, epoch);
    state.opt_L.learning_rate = state.opt_R.learning_rate = lr;

    double sum_total = 0.0, sum_metric = 0.0, sum_mse = 0.0;
    std::size_t batches = 0, triplet_count = 0;
    int batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += miner.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + miner.batch_size);
      std::span<const std::size_t> pool(order.data() + begin, end - begin);
      if (needs_embeddings) {
        for (std::size_t r : pool) {
          embeddings.row(static_cast<Eigen::Index>(r)) = X.row(static_cast<Eigen::Index>(r)) * params.L;
        }
      }
      auto triplets = sample_triplets_in_pool(dataset, pool, needs_embeddings ? &embeddings : nullptr,
                                              miner, static_cast<std::uint64_t>(batch_index) + 1);
      if (config.triplets_per_batch > 0 && triplets.size() > config.triplets_per_batch) {
        triplets.resize(config.triplets_per_batch);
      }
      if (triplets.empty()) continue;
      const auto heads = head_samples(dataset, pool, model);
      const LossBatch batch{X, triplets, heads};

      const LossBreakdown loss = total_loss(params, batch, model.loss);
      if (!std::isfinite(loss.total)) {
        throw DivergenceError(epoch + 1, batch_index, "non-finite loss");
      }
      const Gradients grad = grad_total_loss(params, batch, model.loss);
      if (!grad.dL.allFinite() || !grad.dR.allFinite()) {
        throw DivergenceError(epoch + 1, batch_index, "non-finite gradient");
      }
      try {
        params.L = step(state.opt_L, params.L, grad.dL);
        if (uses_r) {
          if (config.constrain_r) {
            params.R = step(state.opt_R, params.R, grad.dR);
          } else {
            params.R -= lr * grad.dR;
            ++state.opt_R.step_count;
          }
        }
      } catch (const NumericalError& e) {
        throw DivergenceError(epoch + 1, batch_index, e.what());
      }
      if (!params.L.allFinite() || !params.R.allFinite()) {
        throw DivergenceError(epoch + 1, batch_index, "non-finite parameters");
      }

      sum_total += loss.total;
      sum_metric += loss.metric;
      sum_mse += loss.mse;
      triplet_count += triplets.size();
      ++batches;
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    if (batches > 0) {
      stats.total = sum_total / static_cast<double>(batches);
      stats.metric = sum_metric / static_cast<double>(batches);
      stats.mse = sum_mse / static_cast<double>(batches);
    }
    stats.triplets = triplet_count;
    stats.admissible_pairs = admissible;
    stats.ortho_residual_L = orthonormality_residual(params.L);
    stats.ortho_residual_R = orthonormality_residual(params.R);
    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    state.history.epochs.push_back(stats);
    state.epochs_done = epoch + 1;

    if (options.on_epoch) options.on_epoch(stats);
    if (config.checkpoint_every > 0 && !options.checkpoint_dir.empty() &&
        state.epochs_done % config.checkpoint_every == 0) {
      save_checkpoint(state, epoch_checkpoint_path(options.checkpoint_dir, state.epochs_done));
    }
  }
}

TrainState train(const Dataset& dataset, const TrainConfig& config, const TrainOptions& options) {
  TrainState state = initialize_training(dataset, config);
  continue_training(state, dataset, options);
  return state;
}

nlohmann::json checkpoint_to_json(const TrainState& state) {
  const auto& m = state.model;
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& [task, ms] : m.targets.tasks) {
    targets.push_back({{"task", task}, {"mean", ms.first}, {"scale", ms.second}});
  }
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : state.history.epochs) history.push_back(to_json(e));
  return {{"format", "mtml-checkpoint"},
          {"version", 1},
          {"d", m.params.input_dim()},
          {"l", m.params.embed_dim()},
          {"L", matrix_to_json(m.params.L)},
          {"R", matrix_to_json(m.params.R)},
          {"schema_hash", m.schema_hash},
          {"config", to_json(state.config)},
          {"loss", to_json(m.loss)},
          {"standardizer",
           {{"mean", std::vector<double>(m.standardizer.mean.data(),
                                         m.standardizer.mean.data() + m.standardizer.mean.size())},
            {"scale", std::vector<double>(m.standardizer.scale.data(),
                                          m.standardizer.scale.data() + m.standardizer.scale.size())}}},
          {"targets", targets},
          {"optimizer", {{"L", to_json(state.opt_L)}, {"R", to_json(state.opt_R)}}},
          {"epochs_done", state.epochs_done},
          {"history", history},
          {"test_individuals", state.test_individuals}};
}

TrainState checkpoint_from_json(const nlohmann::json& j) {
  TrainState s;
  try {
    if (j.at("format").get<std::string>() != "mtml-checkpoint") throw LoadError("not a checkpoint file");
    const auto d = j.at("d").get<Eigen::Index>();
    const auto l = j.at("l").get<Eigen::Index>();
    s.config = train_config_from_json(j.at("config"));
    s.model.params.L = matrix_from_json(j.at("L"), d, l);
    s.model.params.R = matrix_from_json(j.at("R"), d, l);
    s.model.schema_hash = j.at("schema_hash").get<std::string>();
    s.model.loss = loss_config_from_json(j.at("loss"));
    const auto mean = j.at("standardizer").at("mean").get<std::vector<double>>();
    const auto scale = j.at("standardizer").at("scale").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(mean.size()) != d || static_cast<Eigen::Index>(scale.size()) != d) {
      throw LoadError("standardizer size does not match d");
    }
    s.model.standardizer.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), d);
    s.model.standardizer.scale = Eigen::Map<const Eigen::VectorXd>(scale.data(), d);
    for (const auto& t : j.at("targets")) {
      s.model.targets.tasks[t.at("task").get<std::size_t>()] = {t.at("mean").get<double>(),
                                                                t.at("scale").get<double>()};
    }
    s.opt_L = optimizer_state_from_json(j.at("optimizer").at("L"), d, l);
    s.opt_R = optimizer_state_from_json(j.at("optimizer").at("R"), d, l);
    s.epochs_done = j.at("epochs_done").get<int>();
    for (const auto& e : j.at("history")) s.history.epochs.push_back(epoch_from_json(e));
    s.test_individuals = j.value("test_individuals", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint: ") + e.what());
  }
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw LoadError("cannot write checkpoint " + path.string());
    out << checkpoint_to_json(state).dump() << '\n';
    if (!out) throw LoadError("write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw LoadError(path.string() + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

namespace {

double audit_matrix(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff());
  if (scale == 0.0) return 0.0;
  const double floor = 1e-3 * scale;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i];
    const double n = numeric.data()[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

}  // namespace

GradientAudit finite_diff_audit(const MetricParams& params, const LossBatch& batch,
                                const LossConfig& config, double h) {
  const Gradients analytic = grad_total_loss(params, batch, config);
  MetricParams probe = params;
  auto numeric = [&](Eigen::MatrixXd& target) {
    Eigen::MatrixXd out(target.rows(), target.cols());
    for (Eigen::Index i = 0; i < target.size(); ++i) {
      const double saved = target.data()[i];
      target.data()[i] = saved + h;
      const double up = total_loss(probe, batch, config).total;
      target.data()[i] = saved - h;
      const double down = total_loss(probe, batch, config).total;
      target.data()[i] = saved;
      out.data()[i] = (up - down) / (2.0 * h);
    }
    return out;
  };
  GradientAudit audit;
  audit.max_rel_error_L = audit_matrix(analytic.dL, numeric(probe.L));
  audit.max_rel_error_R = audit_matrix(analytic.dR, numeric(probe.R));
  return audit;
}

}  // namespace mtml
