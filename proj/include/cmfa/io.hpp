#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmfa/causal.hpp"
#include "cmfa/diagnostics.hpp"
#include "cmfa/panel.hpp"
#include "cmfa/samplers.hpp"
#include "cmfa/simgen.hpp"
#include "cmfa/state.hpp"

namespace cmfa {

// File formats are specified in docs/formats.md.

/// Reads the long-format outcomes file, the treatment file and the optional
/// covariates file into a dense panel. Errors carry file:line.
PanelDataset load_dataset(const std::string& outcomes_path, const std::string& treatment_path,
                          const std::string& covariates_path = {});

/// Writes every cell densely so that load_dataset reproduces `data` exactly.
/// The covariates file is written only when P > 0.
void write_dataset(const PanelDataset& data, const std::string& outcomes_path,
                   const std::string& treatment_path, const std::string& covariates_path = {});

/// Flat key=value file with '#' comments. Repeated keys are kept in order.
using KeyValues = std::vector<std::pair<std::string, std::string>>;
KeyValues read_key_values(const std::string& path);

/// Applies recognised keys to `cfg`; unknown keys are a ValidationError.
void apply_fit_config(const KeyValues& kv, FitConfig& cfg, const std::string& source = "config");
void apply_scenario(const KeyValues& kv, SimScenario& sc, const std::string& source = "scenario");
void write_scenario(const SimScenario& sc, const std::string& path);

/// Parallelism requested by the user, capped by CMFA_THREADS when set.
int thread_cap(int requested);

/// Shortest round-trip formatting (17 significant digits).
std::string format_double(double x);

// Posterior draws: draws.csv (draw, parameter, index, value) plus
// fit_meta.csv with the settings needed to rebuild the snapshots.
void write_draws(const PosteriorDraws& draws, const PanelDataset& data, const std::string& path);
void write_fit_meta(const PosteriorDraws& draws, const PanelDataset& data, const std::string& path);
PosteriorDraws read_draws(const std::string& draws_path, const std::string& meta_path, const PanelDataset& data);

/// effects.csv, effects_unit_time.csv, effects_unit.csv, effects_time.csv,
/// effects_overall.csv, ranks.csv and rank_correlations.csv.
void write_effects(const EffectReport& report, const PanelDataset& data, const std::string& out_dir);
std::vector<std::string> effect_file_names();

void write_diagnostics(const ChainDiagnostics& diag, const std::string& out_dir);
void write_geweke(const GewekeResult& result, const std::string& path);

/// simulate output: per-unit effect truth and per-cell untreated truth.
void write_truth(const SimOutput& sim, const std::string& units_path, const std::string& cells_path);

/// Minimal CSV reader for the files this library writes: header plus rows,
/// comma separated, no quoting.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> lines;  // 1-based source line of each row
  int column(const std::string& name) const;  // -1 if absent
};
CsvTable read_csv(const std::string& path);

}  // namespace cmfa
