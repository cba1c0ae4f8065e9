#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cmfa/panel.hpp"
#include "cmfa/samplers.hpp"

namespace cmfa {

enum class Estimand { Alpha, Beta, Gamma, Delta };

const char* estimand_name(Estimand e);
Estimand parse_estimand(const std::string& s);

// (unit, 0-based time) of a post-intervention cell.
using Cell = std::pair<int, int>;

/// All post-intervention cells (t >= last_untreated[i]) of treated units,
/// ordered by unit then time.
std::vector<Cell> treated_cells(const PanelDataset& data);

/// Predictive draws of the untreated potential outcomes for one outcome.
/// Every matrix is (draws x cells) over `cells`.
struct OutcomeCounterfactuals {
  int outcome = 0;  // global outcome index
  Family family = Family::Normal;
  int family_index = 0;
  std::vector<Cell> cells;
  Eigen::MatrixXd untreated;  // y0, k0 or z0
  Eigen::MatrixXd rate;       // p0 (binomial) or q0 (count); empty for normal
  Eigen::MatrixXd p_treated;  // binomial only
};

struct CounterfactualDraws {
  int n_draws = 0;
  std::vector<OutcomeCounterfactuals> outcomes;
};

/// Draws y0, k0, z0 conditional on each retained parameter draw, holding
/// the observed n and w fixed, plus p_treated ~ Beta(1 + k, 1 + n - k).
CounterfactualDraws predict_counterfactuals(const PosteriorDraws& draws, const PanelDataset& data,
                                            std::uint64_t seed);

/// Redraws p_treated from the observed post-intervention k and n of `data`.
void draw_treated_probabilities(CounterfactualDraws& cf, const PanelDataset& data, std::uint64_t seed);

/// Per-draw unit-time effects for one (outcome, estimand); excluded cells
/// (missing y, n = 0, w = 0) are NaN in every draw.
struct EffectDraws {
  int outcome = 0;
  Estimand estimand = Estimand::Alpha;
  std::vector<Cell> cells;
  Eigen::MatrixXd values;  // draws x cells
};

std::vector<EffectDraws> compute_effects(const CounterfactualDraws& cf, const PanelDataset& data);

struct AggregateDraws {
  std::vector<int> units;  // units with at least one valid cell
  std::vector<int> unit_counts;  // valid cells per entry of `units`
  Eigen::MatrixXd unit;    // draws x units
  std::vector<int> times;  // times with at least one valid cell
  std::vector<int> time_counts;  // valid treated units per entry of `times`
  Eigen::MatrixXd time;    // draws x times
  Eigen::VectorXd overall; // draws
};

/// Unit means over post-intervention times, time means over the units
/// treated by t, and the overall mean over all valid cells. Sums run over
/// cells in unit-then-time order (unit and overall) and unit order (time).
AggregateDraws aggregate_effects(const EffectDraws& effects, const PanelDataset& data);

struct RankDraws {
  std::vector<Cell> cells;  // valid cells, same order as the effect cells
  Eigen::MatrixXd values;   // draws x cells, scaled ranks in (0,1)
  std::vector<int> units;
  Eigen::MatrixXd unit;     // draws x units, time-averaged ranks
};

/// Scaled ranks: for each draw and time, the number of valid units treated
/// by t whose effect is <= this unit's, divided by (count + 1).
RankDraws compute_ranks(const EffectDraws& effects, const PanelDataset& data);

struct Summary {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Type-7 quantile (linear interpolation between order statistics,
/// position (n - 1) p) of an unsorted sample.
double quantile(std::vector<double> values, double p);

/// Posterior mean with the 2.5% and 97.5% quantiles.
Summary summarize(const Eigen::Ref<const Eigen::VectorXd>& draws);

enum class Level { UnitTime, Unit, Time, Overall };
const char* level_name(Level l);

struct EffectSummaryRow {
  Level level = Level::Overall;
  std::string estimand;  // alpha, beta, ..., rank_alpha, ...
  int outcome = 0;
  int unit = -1;  // -1 when not applicable
  int time = -1;  // 0-based; -1 when not applicable
  int count = 0;  // cells (unit level) or units (time level) contributing
  Summary summary;
};

struct RankCorrelation {
  std::string a;  // "<outcome label>:<rank estimand>"
  std::string b;
  double correlation = 0.0;
  int n_units = 0;
};

struct EffectReport {
  std::vector<EffectSummaryRow> effects;  // unit-time, unit, time, overall
  std::vector<EffectSummaryRow> ranks;    // unit-time and unit levels
  std::vector<RankCorrelation> correlations;
};

/// Pearson correlations between mean posterior unit ranks of every pair of
/// (outcome, estimand) rank series, over the units they share.
std::vector<RankCorrelation> rank_correlations(const std::vector<RankDraws>& ranks,
                                               const std::vector<EffectDraws>& effects,
                                               const PanelDataset& data);

EffectReport build_report(const CounterfactualDraws& cf, const PanelDataset& data);

}  // namespace cmfa
