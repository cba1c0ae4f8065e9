#pragma once

#include <Eigen/Dense>

#include "cmfa/panel.hpp"
#include "cmfa/state.hpp"

namespace cmfa {

// Variance of the N(0, 100 I) prior on every regression coefficient vector.
inline constexpr double kCoefPriorVar = 100.0;

/// Linear predictor of outcome d (index within its family) for unit i at
/// time t: loading . factor + coef . covariates.
double linear_predictor(const LatentState& s, const PanelDataset& data, Family family, int i,
                        int t, int d);

/// True when the cell is pre-intervention and carries an observation
/// (y not NaN, n > 0, w > 0).
bool cell_observed(const PanelDataset& data, Family family, int i, int t, int d);

/// Observed-data log-likelihood over pre-intervention cells.
double log_likelihood(const LatentState& s, const PanelDataset& data);
double log_likelihood(const LatentState& s, const PanelDataset& data, Family family);
double log_likelihood_cell(const LatentState& s, const PanelDataset& data, Family family, int i,
                           int t, int d);

struct GradHess {
  Eigen::VectorXd grad;
  Eigen::MatrixXd neg_hess;
};

/// Log density of the form
///   -x'Qx/2 + b'x + sum_c [ L_c (a_c . x) - r_c exp(a_c . x) ]
/// which covers every conditional sampled with SMMALA: Gaussian and
/// Polya-Gamma terms are quadratic, CRT-augmented counts are Poisson.
class PoissonGaussianTarget {
 public:
  PoissonGaussianTarget() = default;
  PoissonGaussianTarget(Eigen::MatrixXd quad, Eigen::VectorXd lin, Eigen::MatrixXd design,
                        Eigen::VectorXd base_rate, Eigen::VectorXd counts);

  int dim() const { return static_cast<int>(lin_.size()); }
  double log_density(const Eigen::VectorXd& x) const;
  GradHess grad_hess(const Eigen::VectorXd& x) const;
  /// Evaluates value, gradient and negative Hessian in one pass. Returns
  /// -inf (and leaves outputs unspecified) when any rate overflows.
  double evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& grad, Eigen::MatrixXd& neg_hess) const;

  const Eigen::MatrixXd& quad() const { return quad_; }

 private:
  Eigen::MatrixXd quad_;
  Eigen::VectorXd lin_;
  Eigen::MatrixXd design_;  // one row per count cell
  Eigen::VectorXd base_rate_;
  Eigen::VectorXd counts_;
};

/// Conditional of loading row i given factors, coefficients, variances and
/// augmentation variables. With include_prior = false the N(0, theta_ij)
/// prior term is omitted.
PoissonGaussianTarget lambda_conditional(const LatentState& s, const PanelDataset& data, int i,
                                         bool include_prior = true);

/// Conditional of h_td (count outcome d, time t).
PoissonGaussianTarget count_factor_conditional(const LatentState& s, const PanelDataset& data,
                                               int t, int d);

/// Conditional of the count-outcome coefficient vector eta_{3,d}.
PoissonGaussianTarget count_coef_conditional(const LatentState& s, const PanelDataset& data, int d);

GradHess grad_hess_lambda(const LatentState& s, const PanelDataset& data, int i);
GradHess grad_hess_h(const LatentState& s, const PanelDataset& data, int t, int d);
GradHess grad_hess_eta3(const LatentState& s, const PanelDataset& data, int d);

/// Derivative of the negative-binomial log pmf with respect to the
/// dispersion, for mean m and count z.
double negbin_dlogpmf_dxi(double z, double mean, double xi);

}  // namespace cmfa
