#include "mtml/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mtml/error.hpp"
#include "mtml/rng.hpp"

namespace mtml {

namespace {

double reflect(double x, double bound) {
  // Fold back into [-bound, bound]; loops only for steps larger than the box.
  while (x > bound || x < -bound) {
    if (x > bound) x = 2.0 * bound - x;
    if (x < -bound) x = -2.0 * bound - x;
  }
  return x;
}

Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  }
  return m;
}

std::string individual_name(std::size_t i, std::size_t count) {
  const int width = std::max(3, static_cast<int>(std::to_string(count).size()));
  char buf[32];
  std::snprintf(buf, sizeof buf, "ind_%0*zu", width, i);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synth config: " + m); };
  if (individuals == 0) fail("individuals must be positive");
  if (steps == 0) fail("steps must be positive");
  if (step_days <= 0) fail("step_days must be positive");
  if (feature_dim == 0) fail("feature_dim must be positive");
  if (latent_dim == 0) fail("latent_dim must be positive");
  if (latent_dim > feature_dim) fail("latent_dim must not exceed feature_dim");
  if (expert_period_days <= 0) fail("expert_period_days must be positive");
  if (!(observer_noise_sd >= 0.0)) fail("observer_noise_sd must be non-negative");
  if (!(feature_noise_sd >= 0.0)) fail("feature_noise_sd must be non-negative");
  if (!(drift_fraction >= 0.0 && drift_fraction <= 1.0)) fail("drift_fraction must be in [0, 1]");
  if (!(walk_sd >= 0.0)) fail("walk_sd must be non-negative");
  if (!(latent_bound > 0.0)) fail("latent_bound must be positive");
  if (!(offset_sd >= 0.0)) fail("offset_sd must be non-negative");
  if (!(score_step > 0.0)) fail("score_step must be positive");
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"individuals", c.individuals},
          {"steps", c.steps},
          {"step_days", c.step_days},
          {"feature_dim", c.feature_dim},
          {"latent_dim", c.latent_dim},
          {"expert_period_days", c.expert_period_days},
          {"observer_noise_sd", c.observer_noise_sd},
          {"feature_noise_sd", c.feature_noise_sd},
          {"drift_fraction", c.drift_fraction},
          {"seed", c.seed},
          {"walk_sd", c.walk_sd},
          {"latent_bound", c.latent_bound},
          {"drift_rate", c.drift_rate},
          {"offset_sd", c.offset_sd},
          {"score_center", c.score_center},
          {"score_scale", c.score_scale},
          {"score_step", c.score_step}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    c.individuals = j.value("individuals", c.individuals);
    c.steps = j.value("steps", c.steps);
    c.step_days = j.value("step_days", c.step_days);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.expert_period_days = j.value("expert_period_days", c.expert_period_days);
    c.observer_noise_sd = j.value("observer_noise_sd", c.observer_noise_sd);
    c.feature_noise_sd = j.value("feature_noise_sd", c.feature_noise_sd);
    c.drift_fraction = j.value("drift_fraction", c.drift_fraction);
    c.seed = j.value("seed", c.seed);
    c.walk_sd = j.value("walk_sd", c.walk_sd);
    c.latent_bound = j.value("latent_bound", c.latent_bound);
    c.drift_rate = j.value("drift_rate", c.drift_rate);
    c.offset_sd = j.value("offset_sd", c.offset_sd);
    c.score_center = j.value("score_center", c.score_center);
    c.score_scale = j.value("score_scale", c.score_scale);
    c.score_step = j.value("score_step", c.score_step);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json GroundTruth::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (std::size_t i = 0; i < individual_id.size(); ++i) {
    recs.push_back({{"individual_id", individual_id[i]},
                    {"timestamp", timestamp[i]},
                    {"score", score[i]},
                    {"change", change[i]},
                    {"drifted", static_cast<bool>(drifted[i])}});
  }
  return {{"tasks", tasks}, {"records", recs}};
}

GroundTruth GroundTruth::from_json(const nlohmann::json& j) {
  GroundTruth g;
  try {
    g.tasks = j.at("tasks").get<std::vector<std::string>>();
    for (const auto& r : j.at("records")) {
      g.individual_id.push_back(r.at("individual_id").get<std::string>());
      g.timestamp.push_back(r.at("timestamp").get<std::int64_t>());
      g.score.push_back(r.at("score").get<std::vector<double>>());
      g.change.push_back(r.at("change").get<std::vector<double>>());
      g.drifted.push_back(r.value("drifted", false));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("ground truth JSON: ") + e.what());
  }
  return g;
}

void GroundTruth::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << to_json().dump() << '\n';
}

GroundTruth GroundTruth::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

SynthOutput generate(const SynthConfig& config) {
  config.validate();
  const Schema schema = default_schema();
  std::vector<std::size_t> automated, expert;
  for (std::size_t t = 0; t < schema.size(); ++t) {
    if (schema[t].kind == TaskKind::automated) automated.push_back(t);
    if (schema[t].kind == TaskKind::expert) expert.push_back(t);
  }

  const auto d = static_cast<Eigen::Index>(config.feature_dim);
  const auto k = static_cast<Eigen::Index>(config.latent_dim);
  Rng rng(config.seed);

  const Eigen::MatrixXd mixing = gaussian(rng, d, k);
  const Eigen::MatrixXd auto_readout =
      gaussian(rng, static_cast<Eigen::Index>(automated.size()), k) / std::sqrt(static_cast<double>(k));
  Eigen::MatrixXd score_readout = gaussian(rng, static_cast<Eigen::Index>(expert.size()), k);
  for (Eigen::Index e = 0; e < score_readout.rows(); ++e) score_readout.row(e).normalize();

  // Offsets live in the orthogonal complement of the mixing range, so the
  // latent state (and hence every score) stays an exact function of features.
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(mixing);
  const Eigen::MatrixXd basis = qr.householderQ() * Eigen::MatrixXd::Identity(d, k);
  const Eigen::MatrixXd complement = Eigen::MatrixXd::Identity(d, d) - basis * basis.transpose();

  std::vector<std::size_t> order(config.individuals);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const auto n_drift = static_cast<std::size_t>(
      std::llround(config.drift_fraction * static_cast<double>(config.individuals)));
  std::vector<bool> drifts(config.individuals, false);
  for (std::size_t i = 0; i < n_drift; ++i) drifts[order[i]] = true;

  std::vector<ObservationRecord> records;
  GroundTruth truth;
  for (std::size_t e : expert) truth.tasks.push_back(schema[e].name);

  for (std::size_t ind = 0; ind < config.individuals; ++ind) {
    const std::string id = individual_name(ind, config.individuals);
    Eigen::VectorXd offset(d);
    for (Eigen::Index r = 0; r < d; ++r) offset[r] = config.offset_sd * rng.normal();
    offset = complement * offset;

    Eigen::VectorXd state(k);
    for (Eigen::Index r = 0; r < k; ++r) state[r] = rng.uniform(-config.latent_bound, config.latent_bound);

    Eigen::VectorXd drift_dir = Eigen::VectorXd::Zero(k);
    std::size_t drift_begin = 0, drift_end = 0;
    if (drifts[ind]) {
      for (Eigen::Index r = 0; r < k; ++r) drift_dir[r] = rng.normal();
      drift_dir.normalize();
      drift_begin = rng.index(std::max<std::size_t>(1, config.steps / 2));
      drift_end = std::min(config.steps, drift_begin + std::max<std::size_t>(1, config.steps / 2));
    }

    std::vector<Eigen::VectorXd> states;
    for (std::size_t s = 0; s < config.steps; ++s) {
      if (s > 0) {
        for (Eigen::Index r = 0; r < k; ++r) {
          double next = state[r] + config.walk_sd * rng.normal();
          if (drifts[ind] && s > drift_begin && s <= drift_end) {
            next += config.drift_rate * static_cast<double>(config.step_days) * drift_dir[r];
          }
          state[r] = reflect(next, config.latent_bound);
        }
      }
      states.push_back(state);
    }

    std::vector<Eigen::VectorXd> scores;
    for (const auto& st : states) {
      scores.push_back((config.score_center + config.score_scale * (score_readout * st).array()).matrix());
    }

    for (std::size_t s = 0; s < config.steps; ++s) {
      ObservationRecord r;
      r.individual_id = id;
      r.timestamp = static_cast<std::int64_t>(s) * config.step_days;
      r.labels = LabelMatrix(schema.size());

      const Eigen::VectorXd auto_values = auto_readout * states[s];
      for (std::size_t a = 0; a < automated.size(); ++a) {
        r.labels.set(automated[a], auto_values[static_cast<Eigen::Index>(a)]);
      }
      const bool expert_day = r.timestamp % config.expert_period_days == 0;
      for (std::size_t e = 0; e < expert.size(); ++e) {
        const double noise = config.observer_noise_sd * rng.normal();
        if (!expert_day) continue;
        const double grade =
            std::round(scores[s][static_cast<Eigen::Index>(e)] / config.score_step) * config.score_step;
        r.labels.set(expert[e], grade + noise);
      }

      Eigen::VectorXd x = mixing * states[s] + offset;
      for (Eigen::Index c = 0; c < d; ++c) x[c] += config.feature_noise_sd * rng.normal();
      r.features = std::move(x);

      std::vector<double> score_now(expert.size()), change_now(expert.size(), 0.0);
      for (std::size_t e = 0; e < expert.size(); ++e) {
        const auto ei = static_cast<Eigen::Index>(e);
        score_now[e] = scores[s][ei];
        if (s + 1 < config.steps) {
          change_now[e] = (scores[s + 1][ei] - scores[s][ei]) / static_cast<double>(config.step_days);
        }
      }
      truth.individual_id.push_back(id);
      truth.timestamp.push_back(r.timestamp);
      truth.score.push_back(std::move(score_now));
      truth.change.push_back(std::move(change_now));
      truth.drifted.push_back(drifts[ind]);
      records.push_back(std::move(r));
    }
  }
  return {Dataset(schema, std::move(records)), std::move(truth)};
}

}  // namespace mtml
