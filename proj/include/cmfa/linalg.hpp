#pragma once

#include <optional>

#include <Eigen/Dense>

#include "cmfa/rng.hpp"

namespace cmfa {

/// Cholesky factor of a symmetric matrix that should be positive definite.
///
/// Tries the plain factorisation first, then adds jitter 1e-8 * (1 + max
/// diagonal) to the diagonal, doubling it up to three times. Returns
/// nullopt when all attempts fail.
std::optional<Eigen::LLT<Eigen::MatrixXd>> jittered_cholesky(const Eigen::MatrixXd& m);

/// Draw from N(P^{-1} b, scale^2 * P^{-1}) given the Cholesky factor of the
/// precision P.
Eigen::VectorXd sample_from_precision(const Eigen::LLT<Eigen::MatrixXd>& chol,
                                      const Eigen::VectorXd& b, RngStream& rng,
                                      double scale = 1.0);

Eigen::VectorXd standard_normal_vector(int n, RngStream& rng);

// log det of the matrix whose Cholesky factor is given.
double log_det(const Eigen::LLT<Eigen::MatrixXd>& chol);

}  // namespace cmfa
