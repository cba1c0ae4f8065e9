#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "cmfa/panel.hpp"

namespace cmfa {

// Frozen factor scales for the normal, binomial and count outcomes. They put
// the 97.5% quantiles of mu, p and q at 7.5, 0.85 and 10; see
// solve_factor_scales() for the procedure that produced them.
inline constexpr double kDefaultScaleNormal = 0.6937933123616689;
inline constexpr double kDefaultScaleBinomial = 0.36885825257692617;
inline constexpr double kDefaultScaleCount = 0.25428655278130713;

// Frozen treatment-assignment coefficients from calibrate_kappas() over
// 4000 datasets (seed 20240601).
inline constexpr double kDefaultKappa0 = 8.0826473407341837;
inline constexpr double kDefaultKappa1 = -13.405414886392464;
inline constexpr double kDefaultKappa2 = -1.0944692501834652;

struct EffectSizes {
  double alpha = 0.0;  // shift of mu
  double beta = 0.0;   // shift of logit(p)
  double delta = 0.0;  // shift of log(q)
  bool is_null() const { return alpha == 0.0 && beta == 0.0 && delta == 0.0; }
};

struct SimScenario {
  int N = 80;
  int T = 24;
  int J_true = 7;
  int t_min = 8;
  double xi_true = 2.0;
  double factor_corr = 0.8;  // R_ts = factor_corr^|t-s|
  double kappa0 = kDefaultKappa0;
  double kappa1 = kDefaultKappa1;
  double kappa2 = kDefaultKappa2;
  double s1 = kDefaultScaleNormal;
  double s2 = kDefaultScaleBinomial;
  double s3 = kDefaultScaleCount;
  double trials_start = 5.0, trials_end_lo = 50.0, trials_end_hi = 200.0;
  double offset_start = 5.0, offset_end_lo = 25.0, offset_end_hi = 75.0;
  int effect_level = 1;
  EffectSizes effects;
  std::uint64_t seed = 1;

  /// Normal noise variance giving the factor term 80% of Var(y).
  double noise_var() const;
  void validate() const;
};

/// Ground truth of one generated dataset.
struct SimTruth {
  std::uint64_t seed = 0;
  double noise_var = 0.0;
  double xi = 0.0;
  Eigen::MatrixXd loadings;  // N x J_true
  Eigen::MatrixXd f, g, h;   // T x J_true
  Eigen::MatrixXd mu, p, q;  // N x T untreated
  std::vector<int> last_untreated;
};

struct UnitEffectTruth {
  int unit = 0;
  int last_untreated = 0;
  double alpha = 0.0, beta = 0.0, gamma = 0.0, delta = 0.0;
};

struct SimOutput {
  PanelDataset data;  // observed outcomes with the scenario effects applied
  SimTruth truth;
  std::vector<UnitEffectTruth> unit_effects;
};

/// Generates one dataset (one normal, one binomial and one count outcome)
/// from scenario.seed.
SimOutput generate_dataset(const SimScenario& scenario);

/// Re-draws post-intervention outcomes of treated units under the given
/// effects, reusing the per-cell random streams of the untreated draw, so
/// zero effects reproduce the untreated outcomes exactly. Fills the true
/// unit-level effects when `unit_effects` is non-null.
PanelDataset apply_effects(const PanelDataset& data, const SimTruth& truth, const EffectSizes& effects,
                           std::vector<UnitEffectTruth>* unit_effects = nullptr);

struct TreatmentStats {
  double mean_n_control = 0.0;
  double gap_p = 0.0;  // control minus treated mean k/n over t >= t_min
  double gap_q = 0.0;  // control minus treated mean z/w over t >= t_min
};

/// Monte Carlo averages of the treatment-assignment statistics over
/// `n_datasets` generated datasets with seeds base_seed, base_seed+1, ...
TreatmentStats treatment_stats(const SimScenario& scenario, int n_datasets, std::uint64_t base_seed);

struct CalibrationTargets {
  double n_control = 40.0;
  double gap_p = 0.075;
  double gap_q = 0.75;
  double rel_tol = 0.05;
};

struct CalibrationResult {
  double kappa0 = 0.0, kappa1 = 0.0, kappa2 = 0.0;
  TreatmentStats achieved;
  bool converged = false;
  int outer_iterations = 0;
};

/// Cyclic bisection over (kappa1, kappa2, kappa0) with common random
/// numbers. With fix_confounding, kappa1 = kappa2 = 0 and only kappa0 is
/// solved.
CalibrationResult calibrate_kappas(const SimScenario& tmpl, int n_datasets, std::uint64_t base_seed,
                                   const CalibrationTargets& targets = {}, bool fix_confounding = false);

struct FactorScales {
  double quantile = 0.0;  // 97.5% quantile of a sum of 3 products of standard normals
  double s1 = 0.0, s2 = 0.0, s3 = 0.0;
};

/// Solves the factor scales in closed form by quadrature.
FactorScales solve_factor_scales();

}  // namespace cmfa
