#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

namespace mtml {

/// Q factor of a thin QR with the convention diag(R) > 0. Throws
/// NumericalError if `m` is (numerically) rank deficient.
Eigen::MatrixXd orthonormalize(const Eigen::MatrixXd& m);

/// Xi = G - L sym(L^T G). Throws StateError if ||L^T L - I||_F > 1e-6.
Eigen::MatrixXd tangent_project(const Eigen::MatrixXd& L, const Eigen::MatrixXd& G);

/// Sign-fixed thin QR of L + step. A zero step returns L unchanged.
Eigen::MatrixXd retract_qr(const Eigen::MatrixXd& L, const Eigen::MatrixXd& step);

enum class OptimizerMethod { rsgd, rcg };

std::string to_string(OptimizerMethod m);
OptimizerMethod optimizer_method_from_string(const std::string& s);

struct OptimizerState {
  OptimizerMethod method = OptimizerMethod::rsgd;
  double learning_rate = 0.05;
  // rcg only; both live in the tangent space at the current point.
  std::optional<Eigen::MatrixXd> direction;
  std::optional<Eigen::MatrixXd> previous_gradient;
  long step_count = 0;
};

nlohmann::json to_json(const OptimizerState& s);
OptimizerState optimizer_state_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols);

/// One Riemannian update of `L` from the Euclidean gradient. rsgd retracts
/// along -lr * grad; rcg uses a Polak-Ribiere direction (beta >= 0) with
/// projection transport, restarting whenever the direction is not descent.
Eigen::MatrixXd step(OptimizerState& state, const Eigen::MatrixXd& L, const Eigen::MatrixXd& euclid_grad);

}  // namespace mtml
