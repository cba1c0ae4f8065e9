#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmfa/panel.hpp"
#include "cmfa/samplers.hpp"
#include "cmfa/state.hpp"

namespace cmfa {

/// Effective sample size from the initial positive sequence of summed
/// autocovariance pairs. Throws ValidationError for traces shorter than 10
/// or with zero variance.
double effective_sample_size(const std::vector<double>& trace);

/// Potential scale reduction over equal-length chains; NaN for one chain.
double r_hat(const std::vector<std::vector<double>>& chains);

struct AcceptanceRow {
  std::string block;
  std::int64_t attempts = 0;
  double rate = 0.0;
};

struct ScalarDiagnostics {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double ess = 0.0;    // summed over chains; NaN for degenerate traces
  double r_hat = 0.0;  // NaN with a single chain
};

struct ChainDiagnostics {
  std::vector<AcceptanceRow> acceptance;
  std::vector<std::pair<std::string, double>> final_steps;
  std::vector<ScalarDiagnostics> scalars;
  std::vector<std::string> failures;
};

/// Acceptance rates, final step sizes and ESS / R-hat for a fixed set of
/// scalar summaries (log likelihood, mean noise variance, mean dispersion,
/// squared loading norm).
ChainDiagnostics diagnose(const std::vector<PosteriorDraws>& chains);

struct GewekeConfig {
  int N = 6;
  int T = 8;
  int J = 3;
  int trials = 5;
  double offset = 1.0;
  int samples = 100000;  // per simulator
  int thin = 1;          // successive-conditional sweeps per recorded sample
  std::uint64_t seed = 1;
  SamplerMutation mutation = SamplerMutation::None;
};

struct GewekeStatistic {
  std::string name;
  double mean_marginal = 0.0;
  double mean_successive = 0.0;
  double ess_successive = 0.0;
  double z = 0.0;
};

struct GewekeResult {
  std::vector<GewekeStatistic> stats;
  double max_abs_z() const;
  int count_below(double threshold) const;
};

/// Panel used by the Geweke test: one outcome of each family, every unit a
/// control, n = trials and w = offset in every cell.
PanelDataset geweke_panel(const GewekeConfig& cfg);

/// Fit settings used by the Geweke test (finite-moment shrinkage shapes,
/// fixed step sizes).
FitConfig geweke_fit_config(const GewekeConfig& cfg);

/// The 20 tracked functions of (parameters, data), in a fixed order.
std::vector<std::string> geweke_statistic_names();
std::vector<double> geweke_statistics(const LatentState& s, const PanelDataset& data);

/// Compares marginal-conditional draws (parameters from the prior, data
/// given parameters) against successive-conditional draws (alternating the
/// sampler sweep with a data redraw).
GewekeResult geweke_test(const GewekeConfig& cfg);

}  // namespace cmfa
