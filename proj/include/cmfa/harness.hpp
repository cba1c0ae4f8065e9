#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmfa/simgen.hpp"
#include "cmfa/state.hpp"

namespace cmfa {

enum class Analysis { MV, UV };
const char* analysis_name(Analysis a);

struct EffectScenario {
  int level = 1;
  EffectSizes effects;
};

struct StudyConfig {
  int datasets = 100;             // B
  std::uint64_t base_seed = 1;    // dataset b uses base_seed + b
  SimScenario scenario;           // template; effects come from `scenarios`
  std::vector<EffectScenario> scenarios{{1, {}}, {2, {0.5, 0.4, 0.2}}};
  FitConfig mv;
  FitConfig uv;
  int jobs = 1;
  std::string out_dir;            // empty: nothing persisted
  bool resume = false;            // reuse unit files already in out_dir/units
  int min_datasets_per_cell = 2;  // heatmap suppression threshold

  /// Desk-scale defaults: 20000 iterations, thin 20, 200 burn-in draws,
  /// 12 factors (MV) and 8 (UV).
  static StudyConfig desk_defaults();
};

/// Posterior summary and truth of one unit-level effect.
struct UnitResult {
  int dataset = 0;
  int level = 1;
  Analysis analysis = Analysis::MV;
  std::string estimand;  // alpha, beta, gamma, delta
  int unit = 0;
  int last_untreated = 0;
  int n_treated = 0;     // N2 of the dataset
  double mean_trials = 0.0;   // mean n_it over the unit's pre-intervention times
  double mean_offset = 0.0;   // mean w_it over the same times
  double truth = 0.0;
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

bool is_detection(const UnitResult& r);

struct MetricsRow {
  int level = 1;
  std::string estimand;
  std::string stratum;  // any, or the T_i value
  Analysis analysis = Analysis::MV;
  double bias = 0.0;
  double se = 0.0;
  double ci_width = 0.0;
  double detection_rate = 0.0;
  int n_units = 0;
  int n_datasets = 0;
};

/// Weighted metrics: every treated unit of dataset b carries weight
/// 1/(B N2_b), renormalised within each stratum. Empty strata are omitted.
std::vector<MetricsRow> compute_metrics(const std::vector<UnitResult>& results, const std::vector<int>& strata = {8, 16, 23});

struct HeatmapGrid {
  std::vector<double> t_edges;   // bins [edge_k, edge_k+1) on last_untreated
  std::vector<double> x_edges;   // bins on mean_trials (or mean_offset)
  Eigen::MatrixXd detection;     // (t bins) x (x bins); NaN when suppressed
  Eigen::MatrixXi datasets;      // datasets contributing to each cell
};

/// Detection rates over (T_i, mean exposure) bins for one level, estimand
/// and analysis. Cells with fewer than `min_datasets` contributing datasets
/// are suppressed.
HeatmapGrid stratify_by_history(const std::vector<UnitResult>& results, int level, const std::string& estimand,
                                Analysis analysis, const std::vector<double>& t_edges,
                                const std::vector<double>& x_edges, bool use_offset, int min_datasets);

struct StudyResult {
  std::vector<UnitResult> units;
  std::vector<MetricsRow> metrics;
  std::vector<std::string> failures;  // "dataset b (MV): message"
  int datasets_ok = 0;
};

/// Unit-level results of one dataset under every effect scenario, for one
/// analysis. Exposed for testing.
std::vector<UnitResult> evaluate_dataset(int b, const StudyConfig& cfg, Analysis analysis);

StudyResult run_study(const StudyConfig& cfg);

void write_unit_results(const std::vector<UnitResult>& results, const std::string& path);
std::vector<UnitResult> read_unit_results(const std::string& path);
void write_metrics(const std::vector<MetricsRow>& rows, const std::string& path);

/// Study manifest: key=value with keys datasets, base_seed, jobs,
/// min_datasets_per_cell, scenario (level alpha beta delta; repeatable),
/// mv.<fit key>, uv.<fit key> and sim.<scenario key>.
StudyConfig read_study_manifest(const std::string& path);

}  // namespace cmfa
