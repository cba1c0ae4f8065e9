#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "cmfa/causal.hpp"
#include "cmfa/diagnostics.hpp"
#include "cmfa/error.hpp"
#include "cmfa/harness.hpp"
#include "cmfa/io.hpp"
#include "cmfa/samplers.hpp"
#include "cmfa/simgen.hpp"

namespace fs = std::filesystem;
using namespace cmfa;

namespace {

struct FitArgs {
  std::string data, treatment, covariates, config, out_dir = "fit_out";
  int iters = 0, thin = 0, burnin = -1, max_factors = 0, chains = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void summarize_into(const PosteriorDraws& draws, const PanelDataset& data, const std::string& out_dir) {
  const CounterfactualDraws cf = predict_counterfactuals(draws, data, draws.seed);
  write_effects(build_report(cf, data), data, out_dir);
}

int run_fit(const FitArgs& a) {
  const PanelDataset data = load_dataset(a.data, a.treatment, a.covariates);
  FitConfig cfg;
  if (!a.config.empty()) apply_fit_config(read_key_values(a.config), cfg, a.config);
  if (a.iters > 0) cfg.iterations = a.iters;
  if (a.thin > 0) cfg.thin = a.thin;
  if (a.burnin >= 0) cfg.burn_in_draws = a.burnin;
  if (a.max_factors > 0) cfg.max_factors = a.max_factors;
  if (a.chains > 0) cfg.chains = a.chains;
  if (a.seed_set) cfg.seed = a.seed;
  cfg.validate();

  const std::vector<PosteriorDraws> chains = run_chains(data, cfg, thread_cap(cfg.chains));
  const PosteriorDraws pooled = pool_chains(chains);
  const fs::path out(a.out_dir);
  fs::create_directories(out);
  write_dataset(data, (out / "dataset" / "outcomes.csv").string(), (out / "dataset" / "treatment.csv").string(),
                (out / "dataset" / "covariates.csv").string());
  write_draws(pooled, data, (out / "draws.csv").string());
  write_fit_meta(pooled, data, (out / "fit_meta.csv").string());
  write_diagnostics(diagnose(chains), out.string());
  summarize_into(pooled, data, out.string());
  std::printf("fit: %zu retained draws written to %s\n", pooled.retained.size(), out.string().c_str());
  return 0;
}

int run_simulate(const std::string& scenario_path, std::uint64_t seed, bool seed_set, const std::string& out_dir) {
  SimScenario sc;
  if (!scenario_path.empty()) apply_scenario(read_key_values(scenario_path), sc, scenario_path);
  if (seed_set) sc.seed = seed;
  const SimOutput sim = generate_dataset(sc);
  const fs::path out(out_dir);
  write_dataset(sim.data, (out / "outcomes.csv").string(), (out / "treatment.csv").string());
  write_truth(sim, (out / "truth_units.csv").string(), (out / "truth_cells.csv").string());
  write_scenario(sc, (out / "scenario.txt").string());
  std::printf("simulate: %d units (%d treated) written to %s\n", sim.data.N, sim.data.n_treated(), out_dir.c_str());
  return 0;
}

int run_study_cmd(const std::string& manifest, const std::string& out_dir, int jobs, bool resume) {
  StudyConfig cfg = manifest.empty() ? StudyConfig::desk_defaults() : read_study_manifest(manifest);
  if (jobs > 0) cfg.jobs = jobs;
  cfg.out_dir = out_dir;
  cfg.resume = resume;
  const StudyResult res = run_study(cfg);
  std::printf("study: %d of %d datasets scored; metrics in %s\n", res.datasets_ok, cfg.datasets,
              (fs::path(out_dir) / "metrics.csv").string().c_str());
  for (const auto& f : res.failures) std::fprintf(stderr, "warning: %s\n", f.c_str());
  return res.datasets_ok > 0 ? 0 : 2;
}

int run_summarize(const std::string& draws_arg, const std::string& out_dir) {
  fs::path dir(draws_arg);
  fs::path draws_file = dir / "draws.csv";
  if (!fs::is_directory(dir)) {
    draws_file = dir;
    dir = dir.parent_path();
  }
  const fs::path covariates = dir / "dataset" / "covariates.csv";
  const PanelDataset data =
      load_dataset((dir / "dataset" / "outcomes.csv").string(), (dir / "dataset" / "treatment.csv").string(),
                   fs::exists(covariates) ? covariates.string() : std::string());
  const PosteriorDraws draws = read_draws(draws_file.string(), (dir / "fit_meta.csv").string(), data);
  summarize_into(draws, data, out_dir);
  std::printf("summarize: effects written to %s\n", out_dir.c_str());
  return 0;
}

int run_geweke(std::uint64_t seed, int samples, const std::string& out) {
  GewekeConfig gc;
  gc.seed = seed;
  gc.samples = samples;
  const GewekeResult r = geweke_test(gc);
  write_geweke(r, out);
  std::printf("geweke: %d of %zu statistics with |z| < 4 (max |z| = %.2f); written to %s\n", r.count_below(4.0),
              r.stats.size(), r.max_abs_z(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal multivariate factor analysis for mixed-type panel outcomes"};
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit the model and write draws, diagnostics and effects");
  fit->add_option("--data", fa.data, "Long-format outcomes CSV")->required();
  fit->add_option("--treatment", fa.treatment, "Treatment CSV")->required();
  fit->add_option("--covariates", fa.covariates, "Long-format covariates CSV");
  fit->add_option("--config", fa.config, "key=value fit configuration");
  fit->add_option("--iters", fa.iters, "MCMC iterations");
  fit->add_option("--thin", fa.thin, "Thinning interval");
  fit->add_option("--burnin", fa.burnin, "Burn-in, in retained-draw units");
  fit->add_option("--max-factors", fa.max_factors, "Maximum number of factors");
  fit->add_option("--chains", fa.chains, "Independent chains");
  auto* fit_seed = fit->add_option("--seed", fa.seed, "Random seed");
  fit->add_option("--out-dir", fa.out_dir, "Output directory");

  std::string scenario, sim_out = "sim_out";
  std::uint64_t sim_seed = 1;
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic dataset with known effects");
  simulate->add_option("--scenario", scenario, "key=value scenario file");
  auto* sim_seed_opt = simulate->add_option("--seed", sim_seed, "Dataset seed");
  simulate->add_option("--out-dir", sim_out, "Output directory");

  std::string manifest, study_out = "study_out";
  int jobs = 0;
  bool resume = false;
  auto* study = app.add_subcommand("study", "Run the MV versus UV simulation study");
  study->add_option("--manifest", manifest, "Study manifest (key=value)");
  study->add_option("--out-dir", study_out, "Output directory");
  study->add_option("--jobs", jobs, "Parallel fits");
  study->add_flag("--resume", resume, "Reuse per-dataset results already in the output directory");

  std::string draws_dir, sum_out;
  auto* summarize = app.add_subcommand("summarize", "Recompute effect summaries from persisted draws");
  summarize->add_option("--draws", draws_dir, "Fit output directory or its draws.csv")->required();
  summarize->add_option("--out-dir", sum_out, "Output directory")->required();

  std::uint64_t gw_seed = 1;
  int gw_samples = 100000;
  std::string gw_out = "geweke.csv";
  auto* geweke = app.add_subcommand("geweke", "Joint-distribution test of the sampler on a tiny model");
  geweke->add_option("--seed", gw_seed, "Random seed");
  geweke->add_option("--samples", gw_samples, "Samples per simulator");
  geweke->add_option("--out", gw_out, "Output CSV");

  if (argc <= 1) {
    std::cerr << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (fit->parsed()) {
      fa.seed_set = fit_seed->count() > 0;
      return run_fit(fa);
    }
    if (simulate->parsed()) return run_simulate(scenario, sim_seed, sim_seed_opt->count() > 0, sim_out);
    if (study->parsed()) return run_study_cmd(manifest, study_out, jobs, resume);
    if (summarize->parsed()) return run_summarize(draws_dir, sum_out);
    if (geweke->parsed()) return run_geweke(gw_seed, gw_samples, gw_out);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
