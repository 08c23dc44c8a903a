#include "mtml/metric.hpp"

#include <cmath>
#include <set>

#include "mtml/error.hpp"
#include "mtml/rng.hpp"
#include "mtml/stiefel.hpp"

namespace mtml {

namespace {

void require_same(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
  }
}

}  // namespace

MetricParams MetricParams::random(std::size_t d, std::size_t l, std::uint64_t seed) {
  if (l == 0 || l > d) throw ConfigError("embedding size must be in [1, d]");
  Rng rng(seed);
  auto draw = [&] {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(l));
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.normal();
    }
    return orthonormalize(m);
  };
  MetricParams p;
  p.L = draw();
  p.R = draw();
  return p;
}

void MetricParams::validate(double tolerance, bool check_r) const {
  if (L.cols() >= L.rows()) {
    throw ConfigError("embedding size l=" + std::to_string(L.cols()) + " must be below d=" +
                      std::to_string(L.rows()));
  }
  if (R.rows() != L.rows() || R.cols() != L.cols()) throw DimensionError("R and L shapes differ");
  const double rl = orthonormality_residual(L);
  if (!(rl <= tolerance)) throw StateError("L is not orthonormal: residual " + std::to_string(rl));
  if (check_r) {
    const double rr = orthonormality_residual(R);
    if (!(rr <= tolerance)) throw StateError("R is not orthonormal: residual " + std::to_string(rr));
  }
}

double orthonormality_residual(const Eigen::MatrixXd& m) {
  return (m.transpose() * m - Eigen::MatrixXd::Identity(m.cols(), m.cols())).norm();
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  auto arr = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) arr.push_back(m(r, c));
  }
  return arr;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows * cols) {
    throw LoadError("matrix has " + std::to_string(j.size()) + " entries, expected " +
                    std::to_string(rows * cols));
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[static_cast<std::size_t>(r * cols + c)].get<double>();
  }
  return m;
}

std::string to_string(LossMode m) {
  return m == LossMode::angular_hinge ? "angular_hinge" : "opml_nll";
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "angular_hinge") return LossMode::angular_hinge;
  if (s == "opml_nll") return LossMode::opml_nll;
  throw ConfigError("unknown loss mode '" + s + "'");
}

HeadAssignment default_head_assignment(const Schema& schema, std::size_t l) {
  std::vector<std::size_t> tasks;
  for (std::size_t t = 0; t < schema.size(); ++t) {
    if (schema[t].kind == TaskKind::expert) tasks.push_back(t);
  }
  for (std::size_t t = 0; t < schema.size(); ++t) {
    if (is_gradient(schema[t].kind)) tasks.push_back(t);
  }
  HeadAssignment heads;
  const std::size_t count = l > 0 ? std::min(tasks.size(), l - 1) : 0;
  for (std::size_t i = 0; i < count; ++i) heads[tasks[i]] = l - 1 - i;
  return heads;
}

void LossConfig::validate(std::size_t l) const {
  if (!(alpha_deg > 0.0 && alpha_deg < 90.0)) throw ConfigError("alpha must be in (0, 90) degrees");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(lambda_mse >= 0.0)) throw ConfigError("lambda_mse must be non-negative");
  std::set<std::size_t> dims;
  for (const auto& [task, dim] : heads) {
    if (dim >= l) {
      throw ConfigError("head for task " + std::to_string(task) + " uses dimension " +
                        std::to_string(dim) + " >= l=" + std::to_string(l));
    }
    if (!dims.insert(dim).second) {
      throw ConfigError("embedding dimension " + std::to_string(dim) + " assigned to two heads");
    }
  }
}

nlohmann::json to_json(const LossConfig& c) {
  auto heads = nlohmann::json::array();
  for (const auto& [task, dim] : c.heads) heads.push_back({{"task", task}, {"dim", dim}});
  return {{"mode", to_string(c.mode)},
          {"alpha", c.alpha_deg},
          {"tau", c.tau},
          {"lambda_mse", c.lambda_mse},
          {"heads", heads}};
}

LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig c) {
  try {
    if (j.contains("mode")) c.mode = loss_mode_from_string(j["mode"].get<std::string>());
    c.alpha_deg = j.value("alpha", c.alpha_deg);
    c.tau = j.value("tau", c.tau);
    c.lambda_mse = j.value("lambda_mse", c.lambda_mse);
    if (j.contains("heads")) {
      c.heads.clear();
      for (const auto& h : j["heads"]) c.heads[h.at("task").get<std::size_t>()] = h.at("dim").get<std::size_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("loss config: ") + e.what());
  }
  return c;
}

double angular_factor(double alpha_deg) {
  if (alpha_deg == 45.0) return 4.0;
  const double t = std::tan(alpha_deg * M_PI / 180.0);
  return 4.0 * t * t;
}

Eigen::VectorXd embed(const Eigen::MatrixXd& L, const Eigen::VectorXd& x) {
  require_same(L.rows(), x.size(), "embed");
  return L.transpose() * x;
}

double mahalanobis_sq(const Eigen::MatrixXd& L, const Eigen::VectorXd& xi, const Eigen::VectorXd& xj) {
  require_same(xi.size(), xj.size(), "mahalanobis_sq");
  require_same(L.rows(), xi.size(), "mahalanobis_sq");
  return (L.transpose() * (xi - xj)).squaredNorm();
}

double bilinear_sim(const Eigen::MatrixXd& M, const Eigen::VectorXd& xi, const Eigen::VectorXd& xj) {
  require_same(xi.size(), xj.size(), "bilinear_sim");
  require_same(M.rows(), xi.size(), "bilinear_sim");
  return (M.transpose() * xi).dot(M.transpose() * xj);
}

double angular_margin(const Eigen::MatrixXd& L, const Eigen::VectorXd& a, const Eigen::VectorXd& p,
                      const Eigen::VectorXd& neg, double alpha_deg) {
  const Eigen::VectorXd centre = 0.5 * (a + p);
  return angular_factor(alpha_deg) * mahalanobis_sq(L, neg, centre) - mahalanobis_sq(L, a, p);
}

double angular_hinge(const Eigen::MatrixXd& L, const Eigen::VectorXd& a, const Eigen::VectorXd& p,
                     const Eigen::VectorXd& neg, double alpha_deg) {
  return std::max(0.0, -angular_margin(L, a, p, neg, alpha_deg));
}

double similarity_margin(const Eigen::MatrixXd& R, const Eigen::VectorXd& a, const Eigen::VectorXd& p,
                         const Eigen::VectorXd& neg) {
  return bilinear_sim(R, a, p) - bilinear_sim(R, a, neg);
}

double log_sigmoid(double z) {
  // -softplus(-z)
  return -(std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double nll_from_margins(double m, double s, double tau) {
  return -log_sigmoid(m / tau) - log_sigmoid(s / tau);
}

double triplet_nll(const MetricParams& params, const Eigen::VectorXd& a, const Eigen::VectorXd& p,
                   const Eigen::VectorXd& neg, double alpha_deg, double tau) {
  return nll_from_margins(angular_margin(params.L, a, p, neg, alpha_deg),
                          similarity_margin(params.R, a, p, neg), tau);
}

double mse_head(const Eigen::MatrixXd& L, const Eigen::VectorXd& x, std::size_t k, double y) {
  if (k >= static_cast<std::size_t>(L.cols())) {
    throw DimensionError("head dimension " + std::to_string(k) + " out of range for l=" +
                         std::to_string(L.cols()));
  }
  require_same(L.rows(), x.size(), "mse_head");
  const double e = L.col(static_cast<Eigen::Index>(k)).dot(x) - y;
  return e * e;
}

namespace {

void check_batch(const MetricParams& params, const LossBatch& batch, const LossConfig& config) {
  if (batch.triplets.empty()) throw ConfigError("loss: empty triplet batch");
  require_same(batch.features.cols(), params.L.rows(), "loss features");
  config.validate(params.embed_dim());
}

}  // namespace

LossBreakdown total_loss(const MetricParams& params, const LossBatch& batch, const LossConfig& config) {
  check_batch(params, batch, config);
  const auto& X = batch.features;
  const double factor = angular_factor(config.alpha_deg);
  const Eigen::MatrixXd LT = params.L.transpose();
  const Eigen::MatrixXd RT = params.R.transpose();

  double metric = 0.0;
  for (const auto& t : batch.triplets) {
    const Eigen::VectorXd a = X.row(static_cast<Eigen::Index>(t.anchor)).transpose();
    const Eigen::VectorXd p = X.row(static_cast<Eigen::Index>(t.positive)).transpose();
    const Eigen::VectorXd n = X.row(static_cast<Eigen::Index>(t.negative)).transpose();
    const double d_ap = (LT * (a - p)).squaredNorm();
    const double d_nc = (LT * (n - 0.5 * (a + p))).squaredNorm();
    const double m = factor * d_nc - d_ap;
    if (config.mode == LossMode::angular_hinge) {
      metric += std::max(0.0, -m);
    } else {
      const Eigen::VectorXd ra = RT * a;
      const double s = ra.dot(RT * p) - ra.dot(RT * n);
      metric += nll_from_margins(m, s, config.tau);
    }
  }
  metric /= static_cast<double>(batch.triplets.size());

  double raw = 0.0;
  std::size_t used = 0;
  for (const auto& h : batch.heads) {
    auto it = config.heads.find(h.task);
    if (it == config.heads.end()) continue;
    const double e = params.L.col(static_cast<Eigen::Index>(it->second))
                         .dot(X.row(static_cast<Eigen::Index>(h.record))) - h.target;
    raw += e * e;
    ++used;
  }
  if (used > 0) raw /= static_cast<double>(used);

  LossBreakdown out;
  out.metric = metric;
  out.raw_mse = raw;
  out.mse = config.lambda_mse * raw;
  out.total = out.metric + out.mse;
  return out;
}

Gradients grad_total_loss(const MetricParams& params, const LossBatch& batch, const LossConfig& config) {
  check_batch(params, batch, config);
  const auto& X = batch.features;
  const double factor = angular_factor(config.alpha_deg);
  const double inv_b = 1.0 / static_cast<double>(batch.triplets.size());
  const Eigen::MatrixXd LT = params.L.transpose();
  const Eigen::MatrixXd RT = params.R.transpose();

  Gradients g{Eigen::MatrixXd::Zero(params.L.rows(), params.L.cols()),
              Eigen::MatrixXd::Zero(params.R.rows(), params.R.cols())};

  for (const auto& t : batch.triplets) {
    const Eigen::VectorXd a = X.row(static_cast<Eigen::Index>(t.anchor)).transpose();
    const Eigen::VectorXd p = X.row(static_cast<Eigen::Index>(t.positive)).transpose();
    const Eigen::VectorXd n = X.row(static_cast<Eigen::Index>(t.negative)).transpose();
    const Eigen::VectorXd u = a - p;
    const Eigen::VectorXd v = n - 0.5 * (a + p);
    const Eigen::RowVectorXd uL = (LT * u).transpose();
    const Eigen::RowVectorXd vL = (LT * v).transpose();
    const double m = factor * vL.squaredNorm() - uL.squaredNorm();

    // d m / d L = 2 k v v^T L - 2 u u^T L
    if (config.mode == LossMode::angular_hinge) {
      if (m < 0.0) g.dL.noalias() += (2.0 * inv_b) * (u * uL - factor * v * vL);
    } else {
      const double dm = -(1.0 - sigmoid(m / config.tau)) / config.tau;
      g.dL.noalias() += (inv_b * dm * 2.0) * (factor * v * vL - u * uL);

      const Eigen::VectorXd w = p - n;
      const double s = (RT * a).dot(RT * w);
      const double ds = -(1.0 - sigmoid(s / config.tau)) / config.tau;
      // d (a^T R R^T w) / d R = (a w^T + w a^T) R
      g.dR.noalias() += (inv_b * ds) * (a * (RT * w).transpose() + w * (RT * a).transpose());
    }
  }

  std::size_t used = 0;
  for (const auto& h : batch.heads) used += config.heads.count(h.task);
  if (used > 0 && config.lambda_mse > 0.0) {
    const double scale = 2.0 * config.lambda_mse / static_cast<double>(used);
    for (const auto& h : batch.heads) {
      auto it = config.heads.find(h.task);
      if (it == config.heads.end()) continue;
      const auto k = static_cast<Eigen::Index>(it->second);
      const auto x = X.row(static_cast<Eigen::Index>(h.record));
      const double e = params.L.col(k).dot(x) - h.target;
      g.dL.col(k) += (scale * e) * x.transpose();
    }
  }
  return g;
}

}  // namespace mtml
