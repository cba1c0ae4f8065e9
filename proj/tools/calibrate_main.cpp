// Maintenance tool: re-derives the frozen generator constants in simgen.hpp.
#include <cstdio>
#include <cstdint>

#include "CLI11.hpp"
#include "cmfa/simgen.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Re-derive the simulation generator constants"};
  int datasets = 4000;
  std::uint64_t seed = 20240601;
  bool scales_only = false;
  app.add_option("--datasets", datasets, "Datasets per statistic evaluation")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "Seed of the first dataset");
  app.add_flag("--scales-only", scales_only, "Only solve the factor scales");
  CLI11_PARSE(app, argc, argv);

  const cmfa::FactorScales fs = cmfa::solve_factor_scales();
  std::printf("quantile = %.17g\ns1 = %.17g\ns2 = %.17g\ns3 = %.17g\n", fs.quantile, fs.s1, fs.s2, fs.s3);
  if (scales_only) return 0;

  cmfa::SimScenario tmpl;
  const cmfa::CalibrationResult r = cmfa::calibrate_kappas(tmpl, datasets, seed);
  std::printf("kappa0 = %.17g\nkappa1 = %.17g\nkappa2 = %.17g\n", r.kappa0, r.kappa1, r.kappa2);
  std::printf("achieved: n_control = %.4f gap_p = %.5f gap_q = %.5f\n", r.achieved.mean_n_control,
              r.achieved.gap_p, r.achieved.gap_q);
  std::printf("converged = %d after %d outer iterations\n", r.converged ? 1 : 0, r.outer_iterations);
  return r.converged ? 0 : 2;
}
