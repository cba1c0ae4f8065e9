#include "cmfa/linalg.hpp"

#include <cmath>

namespace cmfa {

std::optional<Eigen::LLT<Eigen::MatrixXd>> jittered_cholesky(const Eigen::MatrixXd& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) return llt;
  const double max_diag = m.rows() > 0 ? m.diagonal().cwiseAbs().maxCoeff() : 0.0;
  double jitter = 1e-8 * (1.0 + max_diag);
  for (int attempt = 0; attempt < 4; ++attempt, jitter *= 2.0) {
    Eigen::MatrixXd shifted = m;
    shifted.diagonal().array() += jitter;
    llt.compute(shifted);
    if (llt.info() == Eigen::Success) return llt;
  }
  return std::nullopt;
}

Eigen::VectorXd standard_normal_vector(int n, RngStream& rng) {
  Eigen::VectorXd z(n);
  for (int k = 0; k < n; ++k) z(k) = rng.normal();
  return z;
}

Eigen::VectorXd sample_from_precision(const Eigen::LLT<Eigen::MatrixXd>& chol,
                                      const Eigen::VectorXd& b, RngStream& rng, double scale) {
  Eigen::VectorXd mean = chol.solve(b);
  Eigen::VectorXd z = standard_normal_vector(static_cast<int>(b.size()), rng);
  // P = L L^T, so L^{-T} z has covariance P^{-1}.
  Eigen::VectorXd noise = chol.matrixU().solve(z);
  return mean + scale * noise;
}

double log_det(const Eigen::LLT<Eigen::MatrixXd>& chol) {
  return 2.0 * chol.matrixLLT().diagonal().array().log().sum();
}

}  // namespace cmfa
