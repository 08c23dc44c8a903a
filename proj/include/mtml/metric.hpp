#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "mtml/dataset.hpp"
#include "mtml/miner.hpp"

namespace mtml {

/// Learnable projections. Both are d x l with orthonormal columns; L defines
/// the squared distance (x - y)^T L L^T (x - y), R the similarity weighting.
struct MetricParams {
  Eigen::MatrixXd L;
  Eigen::MatrixXd R;

  std::size_t input_dim() const { return static_cast<std::size_t>(L.rows()); }
  std::size_t embed_dim() const { return static_cast<std::size_t>(L.cols()); }

  /// Seeded Gaussian entries, orthonormalized by a sign-fixed thin QR.
  static MetricParams random(std::size_t d, std::size_t l, std::uint64_t seed);

  /// Throws ConfigError unless l < d, and StateError if either matrix has
  /// ||M^T M - I||_F above `tolerance` (R is skipped when `check_r` is false).
  void validate(double tolerance = 1e-8, bool check_r = true) const;
};

/// ||M^T M - I||_F.
double orthonormality_residual(const Eigen::MatrixXd& m);

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m);  // row-major array
Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols);

enum class LossMode { angular_hinge, opml_nll };

std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);

/// Task index -> embedding coordinate that regresses that task.
using HeadAssignment = std::map<std::size_t, std::size_t>;

/// Expert tasks first, then gradient tasks, on the last embedding coordinates
/// (l-1, l-2, ...). At most l-1 heads so one coordinate is always left free.
HeadAssignment default_head_assignment(const Schema& schema, std::size_t l);

struct LossConfig {
  LossMode mode = LossMode::opml_nll;
  double alpha_deg = 45.0;
  double tau = 1.0;
  double lambda_mse = 0.1;
  HeadAssignment heads;

  void validate(std::size_t l) const;
};

nlohmann::json to_json(const LossConfig& c);
LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig defaults = {});

/// 4 tan^2(alpha), alpha in degrees (exactly 4 at 45 degrees).
double angular_factor(double alpha_deg);

Eigen::VectorXd embed(const Eigen::MatrixXd& L, const Eigen::VectorXd& x);
double mahalanobis_sq(const Eigen::MatrixXd& L, const Eigen::VectorXd& xi, const Eigen::VectorXd& xj);
/// xi^T M M^T xj.
double bilinear_sim(const Eigen::MatrixXd& M, const Eigen::VectorXd& xi, const Eigen::VectorXd& xj);

/// max(0, d(a,p) - 4 tan^2(alpha) d(neg, (a+p)/2)).
double angular_hinge(const Eigen::MatrixXd& L, const Eigen::VectorXd& a, const Eigen::VectorXd& p,
                     const Eigen::VectorXd& neg, double alpha_deg);

/// 4 tan^2(alpha) d(neg, (a+p)/2) - d(a,p); positive when the angle bound holds.
double angular_margin(const Eigen::MatrixXd& L, const Eigen::VectorXd& a, const Eigen::VectorXd& p,
                      const Eigen::VectorXd& neg, double alpha_deg);

/// sim_R(a,p) - sim_R(a,neg).
double similarity_margin(const Eigen::MatrixXd& R, const Eigen::VectorXd& a, const Eigen::VectorXd& p,
                         const Eigen::VectorXd& neg);

/// log(1 / (1 + exp(-z))) without overflow for any finite z.
double log_sigmoid(double z);
double sigmoid(double z);

/// -log(sigmoid(m/tau) * sigmoid(s/tau)).
double nll_from_margins(double m, double s, double tau);

double triplet_nll(const MetricParams& params, const Eigen::VectorXd& a, const Eigen::VectorXd& p,
                   const Eigen::VectorXd& neg, double alpha_deg, double tau);

/// (embed(L, x)[k] - y)^2.
double mse_head(const Eigen::MatrixXd& L, const Eigen::VectorXd& x, std::size_t k, double y);

/// One regression target: record row, task, and the (already scaled) target.
struct HeadSample {
  std::size_t record = 0;
  std::size_t task = 0;
  double target = 0.0;
};

/// Rows of `features` are indexed by Triplet/HeadSample record indices.
struct LossBatch {
  const Eigen::MatrixXd& features;
  std::span<const Triplet> triplets;
  std::span<const HeadSample> heads;
};

struct LossBreakdown {
  double total = 0.0;
  double metric = 0.0;    // mean triplet loss
  double mse = 0.0;       // lambda-weighted mean head error
  double raw_mse = 0.0;   // unweighted mean head error
};

LossBreakdown total_loss(const MetricParams& params, const LossBatch& batch, const LossConfig& config);

struct Gradients {
  Eigen::MatrixXd dL;
  Eigen::MatrixXd dR;
};

/// Exact Euclidean gradients of total_loss with respect to L and R.
Gradients grad_total_loss(const MetricParams& params, const LossBatch& batch, const LossConfig& config);

}  // namespace mtml
