#include "mtml/stiefel.hpp"

#include <cmath>
#include <limits>

#include "mtml/error.hpp"
#include "mtml/metric.hpp"

namespace mtml {

namespace {

Eigen::MatrixXd sym(const Eigen::MatrixXd& a) { return 0.5 * (a + a.transpose()); }

}  // namespace

Eigen::MatrixXd orthonormalize(const Eigen::MatrixXd& m) {
  const Eigen::Index rows = m.rows();
  const Eigen::Index cols = m.cols();
  if (cols > rows) throw NumericalError("cannot orthonormalize a wide matrix");
  if (!m.allFinite()) throw NumericalError("cannot orthonormalize a non-finite matrix");
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  const Eigen::MatrixXd& packed = qr.matrixQR();
  const double scale = std::max(m.norm(), std::numeric_limits<double>::min());
  for (Eigen::Index c = 0; c < cols; ++c) {
    const double diag = packed(c, c);
    if (!(std::abs(diag) > 1e-12 * scale)) {
      throw NumericalError("rank-deficient matrix in QR retraction (norm " + std::to_string(m.norm()) +
                           ", column " + std::to_string(c) + ")");
    }
    if (diag < 0.0) q.col(c) = -q.col(c);
  }
  return q;
}

Eigen::MatrixXd tangent_project(const Eigen::MatrixXd& L, const Eigen::MatrixXd& G) {
  if (L.rows() != G.rows() || L.cols() != G.cols()) throw DimensionError("tangent_project: shape mismatch");
  const double residual = orthonormality_residual(L);
  if (!(residual <= 1e-6)) {
    throw StateError("tangent_project: point is not orthonormal (residual " + std::to_string(residual) + ")");
  }
  return G - L * sym(L.transpose() * G);
}

Eigen::MatrixXd retract_qr(const Eigen::MatrixXd& L, const Eigen::MatrixXd& step) {
  if (L.rows() != step.rows() || L.cols() != step.cols()) throw DimensionError("retract_qr: shape mismatch");
  if (step.isZero(0.0)) return L;
  try {
    return orthonormalize(L + step);
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(e.what()) + "; step norm " + std::to_string(step.norm()));
  }
}

std::string to_string(OptimizerMethod m) { return m == OptimizerMethod::rsgd ? "rsgd" : "rcg"; }

OptimizerMethod optimizer_method_from_string(const std::string& s) {
  if (s == "rsgd") return OptimizerMethod::rsgd;
  if (s == "rcg") return OptimizerMethod::rcg;
  throw ConfigError("unknown optimizer method '" + s + "'");
}

nlohmann::json to_json(const OptimizerState& s) {
  nlohmann::json j{{"method", to_string(s.method)}, {"learning_rate", s.learning_rate}, {"step_count", s.step_count}};
  j["direction"] = s.direction ? matrix_to_json(*s.direction) : nlohmann::json(nullptr);
  j["previous_gradient"] = s.previous_gradient ? matrix_to_json(*s.previous_gradient) : nlohmann::json(nullptr);
  return j;
}

OptimizerState optimizer_state_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  OptimizerState s;
  s.method = optimizer_method_from_string(j.at("method").get<std::string>());
  s.learning_rate = j.at("learning_rate").get<double>();
  s.step_count = j.at("step_count").get<long>();
  if (j.contains("direction") && !j["direction"].is_null()) s.direction = matrix_from_json(j["direction"], rows, cols);
  if (j.contains("previous_gradient") && !j["previous_gradient"].is_null()) {
    s.previous_gradient = matrix_from_json(j["previous_gradient"], rows, cols);
  }
  return s;
}

Eigen::MatrixXd step(OptimizerState& state, const Eigen::MatrixXd& L, const Eigen::MatrixXd& euclid_grad) {
  if (!(state.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  const Eigen::MatrixXd xi = tangent_project(L, euclid_grad);

  if (state.method == OptimizerMethod::rsgd) {
    Eigen::MatrixXd next = retract_qr(L, -state.learning_rate * xi);
    ++state.step_count;
    return next;
  }

  Eigen::MatrixXd direction = -xi;
  if (state.direction && state.previous_gradient) {
    const double denom = state.previous_gradient->squaredNorm();
    double beta = 0.0;
    if (denom > 0.0) beta = std::max(0.0, (xi.array() * (xi - *state.previous_gradient).array()).sum() / denom);
    direction += beta * *state.direction;
    if ((direction.array() * xi.array()).sum() >= 0.0) direction = -xi;
  }
  Eigen::MatrixXd next = retract_qr(L, state.learning_rate * direction);
  state.direction = tangent_project(next, direction);
  state.previous_gradient = tangent_project(next, xi);
  ++state.step_count;
  return next;
}

}  // namespace mtml
