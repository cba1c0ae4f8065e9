#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cmfa/panel.hpp"

namespace cmfa {

/// Deliberate sampler defects used to check that the Geweke test has power.
/// Never set outside tests.
enum class SamplerMutation {
  None,
  WrongFactorVariance,  // normal-factor Gibbs draw uses twice the conditional covariance
  DroppedLambdaPrior,   // loading conditional ignores its shrinkage prior
  StaleAugmentation,    // Polya-Gamma variables are never refreshed
  FlippedDrift,         // SMMALA proposal moves against the gradient
  UnscaledProposal,     // SMMALA noise ignores the metric
};

struct FitConfig {
  int max_factors = 25;
  int iterations = 100000;
  int thin = 50;
  int burn_in_draws = 500;
  int chains = 1;
  std::uint64_t seed = 1;

  // Three-level TPB shrinkage: (a, b) element-wise, (c, d) column, (e, f) global.
  std::array<double, 6> tpb_shapes{0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  double nu = 0.1;

  double a_xi = 5.0;
  double c_xi = 1.0;
  bool pooled_dispersion = false;

  double smmala_target = 0.57;
  double barker_target = 0.40;
  double smmala_initial_step = 0.8;
  double barker_initial_step = 0.5;
  double sigma2_proposal_sd = 0.5;
  std::int64_t pg_exact_max = 30;

  int checkpoint_every = 5000;
  std::string checkpoint_path;  // empty: no checkpoints

  SamplerMutation mutation = SamplerMutation::None;

  int retained_draws() const { return iterations / thin - burn_in_draws; }
  int burn_in_iterations() const { return burn_in_draws * thin; }
  void validate() const;
};

/// One full MCMC state.
///
/// Factors and regression coefficients are indexed by global outcome
/// (normal outcomes first, then binomial, then count). Shrinkage variables
/// are kept in odds form (loading_var = 1/phi - 1, column_scale = 1/zeta - 1,
/// global_scale = 1/rho - 1) together with the auxiliary rates of their
/// gamma-gamma representation.
struct LatentState {
  int J = 0;
  bool pooled_dispersion = false;

  Eigen::MatrixXd loadings;              // N x J
  std::vector<Eigen::MatrixXd> factors;  // D entries, T x J
  Eigen::MatrixXd coef;                  // D x P
  Eigen::MatrixXd noise_var;             // N x D1
  Eigen::MatrixXd dispersion;            // (pooled ? 1 : N) x D3
  double dispersion_rate = 1.0;

  Eigen::MatrixXd loading_var;        // N x J
  Eigen::MatrixXd loading_var_rate;   // N x J
  Eigen::VectorXd column_scale;       // J
  Eigen::VectorXd column_scale_rate;  // J
  double global_scale = 1.0;
  double global_scale_rate = 1.0;

  Eigen::MatrixXd factor_var;         // J x D, entry (j, dominant_outcome[j]) is 1
  std::vector<int> dominant_outcome;  // J, 0-based outcome index

  std::vector<Eigen::MatrixXd> pg_aux;   // D2 entries, N x T
  std::vector<Eigen::MatrixXi> crt_aux;  // D3 entries, N x T

  Eigen::VectorXd lambda_step;    // N
  Eigen::MatrixXd count_factor_step;  // T x D3
  Eigen::VectorXd count_coef_step;    // D3
  Eigen::MatrixXd barker_step;    // same shape as dispersion

  double phi(int i, int j) const { return 1.0 / (1.0 + loading_var(i, j)); }
  double zeta(int j) const { return 1.0 / (1.0 + column_scale(j)); }
  double rho() const { return 1.0 / (1.0 + global_scale); }
  double xi(int i, int d) const { return dispersion(pooled_dispersion ? 0 : i, d); }
};

/// Checks every LatentState invariant against the dataset; returns an empty
/// string when valid, otherwise a description of the first violation.
std::string check_state(const LatentState& s, const PanelDataset& data);

/// Allocates a correctly-shaped state with neutral values (zero loadings and
/// factors, unit variances, shrinkage at 0.5).
LatentState make_state_shell(const PanelDataset& data, const FitConfig& config);

}  // namespace cmfa
