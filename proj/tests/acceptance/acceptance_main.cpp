// Acceptance suite: prints one PASS/FAIL line per acceptance criterion and
// exits non-zero if any criterion fails. Pass criterion numbers as
// arguments to run a subset.
//
// Criteria 5 and 6 read the per-unit results of a desk-scale study from
// CMFA_STUDY_DIR (default: results/desk_study in the source tree). With
// CMFA_RUN_SLOW=1 and no results present, the study is run first.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <boost/math/special_functions/bessel.hpp>

#include "causal_oracle.hpp"
#include "cmfa/causal.hpp"
#include "cmfa/diagnostics.hpp"
#include "cmfa/distributions.hpp"
#include "cmfa/harness.hpp"
#include "cmfa/io.hpp"
#include "cmfa/model.hpp"
#include "cmfa/samplers.hpp"
#include "cmfa/simgen.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cmfa;
using namespace cmfa::testing;
namespace fs = std::filesystem;

#ifndef CMFA_CLI_PATH
#define CMFA_CLI_PATH "cmfa"
#endif
#ifndef CMFA_DEFAULT_STUDY_DIR
#define CMFA_DEFAULT_STUDY_DIR "results/desk_study"
#endif

namespace {

// Collects the failed sub-checks of one criterion.
struct Report {
  std::vector<std::string> failures;
  std::vector<std::string> notes;
  void check(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

template <class... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct MeanVar {
  double n = 0, mean = 0, m2 = 0;
  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / n;
    m2 += d * (x - mean);
  }
  double var() const { return m2 / (n - 1); }
  double se() const { return std::sqrt(var() / n); }
};

// ---------------------------------------------------------------- 1

std::vector<double> crt_pmf(int z, double r) {
  // Unsigned Stirling numbers of the first kind by recurrence.
  std::vector<std::vector<double>> s(z + 1, std::vector<double>(z + 1, 0.0));
  s[0][0] = 1.0;
  for (int n = 1; n <= z; ++n)
    for (int k = 1; k <= n; ++k) s[n][k] = s[n - 1][k - 1] + (n - 1) * s[n - 1][k];
  std::vector<double> p(z + 1, 0.0);
  const double log_norm = std::lgamma(r) - std::lgamma(r + z);
  for (int l = 1; l <= z; ++l) p[l] = s[z][l] * std::exp(l * std::log(r) + log_norm);
  return p;
}

void criterion_augmentation(Report& rep) {
  const int draws = 100000;
  double worst_tv = 0.0;
  for (int z = 1; z <= 5; ++z) {
    for (double r : {0.3, 1.0, 4.0}) {
      const auto pmf = crt_pmf(z, r);
      std::vector<int> counts(z + 1, 0);
      RngStream rng(101, stream_key({static_cast<std::uint64_t>(z), static_cast<std::uint64_t>(r * 10)}));
      for (int k = 0; k < draws; ++k) ++counts[sample_crt(z, r, rng)];
      double tv = 0.0;
      for (int l = 0; l <= z; ++l) tv += 0.5 * std::abs(counts[l] / double(draws) - pmf[l]);
      worst_tv = std::max(worst_tv, tv);
      rep.check(tv < 0.01, fmt("CRT z=%d r=%g TV %.4f", z, r, tv));
    }
  }
  rep.note(fmt("CRT worst TV %.4f", worst_tv));

  double worst_z = 0.0;
  for (int b : {1, 2, 5, 20}) {
    for (double c : {0.0, 0.5, 2.0, 10.0}) {
      const double target = c == 0.0 ? b / 4.0 : b / (2 * c) * std::tanh(c / 2);
      RngStream rng(202, stream_key({static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(c * 10)}));
      MeanVar mv;
      for (int k = 0; k < draws; ++k) mv.add(sample_polya_gamma(b, c, rng));
      const double z = (mv.mean - target) / mv.se();
      worst_z = std::max(worst_z, std::abs(z));
      rep.check(std::abs(z) < 3.0, fmt("PG b=%d c=%g mean %.6f target %.6f (z=%.2f)", b, c, mv.mean, target, z));
    }
  }
  rep.note(fmt("PG worst |z| %.2f over 16 grid points", worst_z));
}

// ---------------------------------------------------------------- 2

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

void criterion_gradients(Report& rep) {
  double worst[3] = {0, 0, 0};
  double worst_hess = 0.0;
  const int states = 100;
  for (int k = 0; k < states; ++k) {
    FixtureShape shape{.N = 7, .T = 7, .J = 1 + k % 4, .P = 1 + k % 3, .D1 = 1, .D2 = 1, .D3 = 1 + k % 2};
    auto fx = random_fixture(1000 + k, shape);
    const auto& s = fx.state;
    const auto& data = fx.data;
    RngStream pick(5, k);
    const int i = static_cast<int>(pick.uniform() * data.N);
    const int t = static_cast<int>(pick.uniform() * (data.T - 2));
    const int d = static_cast<int>(pick.uniform() * data.D3);
    const int o = data.outcome_index(Family::NegBin, d);

    const Eigen::VectorXd lam = s.loadings.row(i).transpose();
    const GradHess gl = grad_hess_lambda(s, data, i);
    const double e0 = rel_err(gl.grad, central_gradient([&](const Eigen::VectorXd& v) {
                                return lambda_log_conditional(s, data, i, v);
                              }, lam));

    const Eigen::VectorXd h = s.factors[o].row(t).transpose();
    const GradHess gh = grad_hess_h(s, data, t, d);
    const double e1 = rel_err(gh.grad, central_gradient([&](const Eigen::VectorXd& v) {
                                return count_factor_log_conditional(s, data, t, d, v);
                              }, h));

    const Eigen::VectorXd eta = s.coef.row(o).transpose();
    const GradHess ge = grad_hess_eta3(s, data, d);
    const double e2 = rel_err(ge.grad, central_gradient([&](const Eigen::VectorXd& v) {
                                return count_coef_log_conditional(s, data, d, v);
                              }, eta));

    // Hessians against differences of the oracle gradient.
    auto hess_err = [&](const GradHess& gh_, const Eigen::VectorXd& x, auto logf) {
      const int n = static_cast<int>(x.size());
      double err = 0.0;
      for (int c = 0; c < n; ++c) {
        const double step = 1e-4 * std::max(1.0, std::abs(x(c)));
        Eigen::VectorXd a = x, b = x;
        a(c) += step;
        b(c) -= step;
        const Eigen::VectorXd col =
            (central_gradient(logf, a, 1e-4) - central_gradient(logf, b, 1e-4)) / (2 * step);
        err = std::max(err, rel_err(-gh_.neg_hess.col(c), col));
      }
      return err;
    };
    worst_hess = std::max(worst_hess, hess_err(gl, lam, [&](const Eigen::VectorXd& v) {
                            return lambda_log_conditional(s, data, i, v);
                          }));
    worst_hess = std::max(worst_hess, hess_err(gh, h, [&](const Eigen::VectorXd& v) {
                            return count_factor_log_conditional(s, data, t, d, v);
                          }));
    worst_hess = std::max(worst_hess, hess_err(ge, eta, [&](const Eigen::VectorXd& v) {
                            return count_coef_log_conditional(s, data, d, v);
                          }));

    worst[0] = std::max(worst[0], e0);
    worst[1] = std::max(worst[1], e1);
    worst[2] = std::max(worst[2], e2);
  }
  rep.check(worst[0] < 1e-5, fmt("lambda gradient rel err %.2e", worst[0]));
  rep.check(worst[1] < 1e-5, fmt("h gradient rel err %.2e", worst[1]));
  rep.check(worst[2] < 1e-5, fmt("eta3 gradient rel err %.2e", worst[2]));
  // Second differences lose about half the digits; the Hessian enters only the metric.
  rep.check(worst_hess < 1e-4, fmt("Hessian rel err %.2e", worst_hess));

  double worst_xi = 0.0;
  for (int k = 0; k < states; ++k) {
    RngStream rng(9, k);
    const auto z = static_cast<std::int64_t>(rng.uniform() * 40);
    const double m = 0.5 + 20 * rng.uniform();
    const double xi = 0.05 + 5 * rng.uniform();
    const double step = 1e-6 * xi;
    const double fd = (negbin_log_pmf(z, m, xi + step) - negbin_log_pmf(z, m, xi - step)) / (2 * step);
    worst_xi = std::max(worst_xi, std::abs(negbin_dlogpmf_dxi(static_cast<double>(z), m, xi) - fd) / std::max(1.0, std::abs(fd)));
  }
  rep.check(worst_xi < 1e-5, fmt("dispersion gradient rel err %.2e", worst_xi));
  rep.note(fmt("%d states per block; worst rel err lambda %.1e, h %.1e, eta3 %.1e, Hessian %.1e, xi %.1e", states,
               worst[0], worst[1], worst[2], worst_hess, worst_xi));
}

// ---------------------------------------------------------------- 3

SweepContext ctx_at(std::int64_t it, std::uint64_t seed) { return SweepContext{seed, 0, it, false, nullptr}; }

void check_gaussian(Report& rep, const std::string& name, const std::vector<MeanVar>& mv, const Gaussian& g,
                    double& worst) {
  for (std::size_t k = 0; k < mv.size(); ++k) {
    const double n = mv[k].n;
    const double zm = (mv[k].mean - g.mean(k)) / std::sqrt(g.cov(k, k) / n);
    const double zv = (mv[k].var() - g.cov(k, k)) / (g.cov(k, k) * std::sqrt(2.0 / (n - 1)));
    worst = std::max({worst, std::abs(zm), std::abs(zv)});
    rep.check(std::abs(zm) < 3.0, fmt("%s[%zu] mean z=%.2f", name.c_str(), k, zm));
    rep.check(std::abs(zv) < 3.0, fmt("%s[%zu] variance z=%.2f", name.c_str(), k, zv));
  }
}

void criterion_conjugate(Report& rep) {
  const int n = 100000;
  auto fx = random_fixture(303, {.N = 6, .T = 6, .J = 2, .P = 2, .D1 = 1, .D2 = 1, .D3 = 1});
  const auto& data = fx.data;
  const int o1 = data.outcome_index(Family::Normal, 0);
  const int o2 = data.outcome_index(Family::Binomial, 0);
  const int t = 2;
  double worst = 0.0;

  auto run_gaussian = [&](const std::string& name, const Gaussian& g, auto update, auto extract) {
    LatentState s = fx.state;
    std::vector<MeanVar> mv(g.mean.size());
    for (int it = 0; it < n; ++it) {
      update(s, ctx_at(it, 31));
      const Eigen::VectorXd x = extract(s);
      for (int k = 0; k < x.size(); ++k) mv[k].add(x(k));
    }
    check_gaussian(rep, name, mv, g, worst);
  };
  run_gaussian("f", normal_factor_oracle(fx.state, data, t, 0),
               [&](LatentState& s, const SweepContext& c) { update_f(s, data, fx.cfg, c); },
               [&](const LatentState& s) { return Eigen::VectorXd(s.factors[o1].row(t).transpose()); });
  run_gaussian("g", binomial_factor_oracle(fx.state, data, t, 0),
               [&](LatentState& s, const SweepContext& c) { update_g(s, data, fx.cfg, c); },
               [&](const LatentState& s) { return Eigen::VectorXd(s.factors[o2].row(t).transpose()); });
  run_gaussian("eta1", normal_coef_oracle(fx.state, data, 0),
               [&](LatentState& s, const SweepContext& c) { update_eta1(s, data, c); },
               [&](const LatentState& s) { return Eigen::VectorXd(s.coef.row(o1).transpose()); });
  run_gaussian("eta2", binomial_coef_oracle(fx.state, data, 0),
               [&](LatentState& s, const SweepContext& c) { update_eta2(s, data, c); },
               [&](const LatentState& s) { return Eigen::VectorXd(s.coef.row(o2).transpose()); });

  // Polya-Gamma augmentation at one cell: mean (n / 2 psi) tanh(psi / 2).
  {
    const int i = 1, tt = 3;
    const double psi = factor_term(fx.state, o2, i, tt) + covariate(fx.state, data, o2, i, tt);
    const int trials = data.n[0](i, tt);
    const double target = trials / (2 * psi) * std::tanh(psi / 2);
    LatentState s = fx.state;
    MeanVar mv;
    for (int it = 0; it < n; ++it) {
      update_omega(s, data, fx.cfg, ctx_at(it, 32));
      mv.add(s.pg_aux[0](i, tt));
    }
    const double z = (mv.mean - target) / mv.se();
    worst = std::max(worst, std::abs(z));
    rep.check(std::abs(z) < 3.0, fmt("omega mean z=%.2f", z));
  }
  // CRT augmentation at one cell: mean sum_l r / (r + l - 1).
  {
    int i = 0, tt = 0;
    while (data.z[0](i, tt) < 3) ++tt;
    const int o3 = data.outcome_index(Family::NegBin, 0);
    const double psi = factor_term(fx.state, o3, i, tt) + covariate(fx.state, data, o3, i, tt);
    const double r = data.w[0](i, tt) * std::exp(psi) / fx.state.xi(i, 0);
    double target = 0.0;
    for (int l = 1; l <= data.z[0](i, tt); ++l) target += r / (r + l - 1);
    LatentState s = fx.state;
    MeanVar mv;
    for (int it = 0; it < n; ++it) {
      update_L(s, data, ctx_at(it, 33));
      mv.add(s.crt_aux[0](i, tt));
    }
    const double z = (mv.mean - target) / mv.se();
    worst = std::max(worst, std::abs(z));
    rep.check(std::abs(z) < 3.0, fmt("CRT mean z=%.2f", z));
  }
  // Element-wise shrinkage: GIG(a - 1/2, 2 rate, lambda^2) mean from Bessel functions.
  {
    const int i = 2, j = 1;
    const double a = fx.cfg.tpb_shapes[0];
    const double p = a - 0.5, ga = 2 * fx.state.loading_var_rate(i, j);
    const double gb = fx.state.loadings(i, j) * fx.state.loadings(i, j);
    const double w = std::sqrt(ga * gb);
    const double target = std::sqrt(gb / ga) * boost::math::cyl_bessel_k(p + 1, w) / boost::math::cyl_bessel_k(p, w);
    MeanVar mv;
    for (int it = 0; it < n; ++it) {
      LatentState s = fx.state;
      update_shrinkage(s, fx.cfg, ctx_at(it, 34));
      mv.add(s.loading_var(i, j));
    }
    const double z = (mv.mean - target) / mv.se();
    worst = std::max(worst, std::abs(z));
    rep.check(std::abs(z) < 3.0, fmt("loading variance mean z=%.2f", z));
  }
  // Dominant outcome and factor variances.
  {
    auto mf = random_fixture(304, {.N = 4, .T = 6, .J = 1, .P = 0, .D1 = 1, .D2 = 1, .D3 = 1});
    mf.state.factors[0] *= 2.0;
    const auto probs = dominant_outcome_probs(mf.state, 0, mf.data.T);
    std::vector<MeanVar> hit(3), var(3);
    for (int it = 0; it < n; ++it) {
      LatentState s = mf.state;
      update_M_and_v(s, mf.data, ctx_at(it, 35));
      for (int m = 0; m < 3; ++m) {
        hit[m].add(s.dominant_outcome[0] == m ? 1.0 : 0.0);
        var[m].add(s.factor_var(0, m));
      }
    }
    for (int m = 0; m < 3; ++m) {
      const double zp = (hit[m].mean - probs[m]) / std::sqrt(probs[m] * (1 - probs[m]) / n);
      double ev = 0.0;
      for (int dom = 0; dom < 3; ++dom)
        ev += probs[dom] * (dom == m ? 1.0 : truncated_variance_mean(mf.state.factors[m].col(0).squaredNorm(), 6));
      const double zv = (var[m].mean - ev) / var[m].se();
      worst = std::max({worst, std::abs(zp), std::abs(zv)});
      rep.check(std::abs(zp) < 3.0, fmt("P(M=%d) z=%.2f", m, zp));
      rep.check(std::abs(zv) < 3.0, fmt("E[v_%d] z=%.2f", m, zv));
    }
  }
  rep.note(fmt("10^5 draws per block; worst |z| %.2f", worst));
}

// ---------------------------------------------------------------- 4

void criterion_geweke(Report& rep) {
  GewekeConfig cfg;
  cfg.samples = 100000;
  cfg.seed = 20240601;
  const GewekeResult ok = geweke_test(cfg);
  const int below = ok.count_below(4.0);
  rep.check(below >= 19, fmt("correct sampler: %d of 20 statistics with |z| < 4", below));
  rep.note(fmt("correct sampler: %d/20 below 4, max |z| %.2f", below, ok.max_abs_z()));
  const std::pair<SamplerMutation, const char*> mutations[] = {
      {SamplerMutation::WrongFactorVariance, "wrong factor variance"},
      {SamplerMutation::DroppedLambdaPrior, "dropped loading prior"},
      {SamplerMutation::StaleAugmentation, "stale augmentation"},
      {SamplerMutation::FlippedDrift, "flipped drift"},
      {SamplerMutation::UnscaledProposal, "unscaled proposal"},
  };
  for (const auto& [m, name] : mutations) {
    GewekeConfig mc = cfg;
    mc.mutation = m;
    double max_z = 0.0;
    try {
      max_z = geweke_test(mc).max_abs_z();
    } catch (const std::exception& e) {
      // A mutation that drives the chain to a numerical failure is detected too.
      max_z = INFINITY;
      rep.note(std::string(name) + ": chain failed (" + e.what() + ")");
    }
    rep.check(max_z > 6.0, fmt("mutation '%s' max |z| %.2f", name, max_z));
    rep.note(fmt("mutation '%s': max |z| %.1f", name, max_z));
  }
}

// ---------------------------------------------------------------- 5, 6

std::string study_dir() {
  const char* env = std::getenv("CMFA_STUDY_DIR");
  return env ? env : CMFA_DEFAULT_STUDY_DIR;
}

// Units of datasets for which both analyses were persisted.
std::vector<UnitResult> load_study(const std::string& dir, int& datasets) {
  std::map<int, std::set<std::string>> present;
  const fs::path units = fs::path(dir) / "units";
  datasets = 0;
  if (!fs::is_directory(units)) return {};
  for (const auto& entry : fs::directory_iterator(units)) {
    const std::string name = entry.path().filename().string();
    int b = 0;
    char which[8] = {0};
    if (std::sscanf(name.c_str(), "dataset_%d_%2s.csv", &b, which) == 2) present[b].insert(which);
  }
  std::vector<UnitResult> all;
  for (const auto& [b, kinds] : present) {
    if (kinds.size() != 2) continue;
    ++datasets;
    for (const char* a : {"MV", "UV"}) {
      auto part = read_unit_results((units / ("dataset_" + std::to_string(b) + "_" + a + ".csv")).string());
      all.insert(all.end(), part.begin(), part.end());
    }
  }
  return all;
}

std::vector<UnitResult> study_results(int& datasets) {
  const std::string dir = study_dir();
  auto units = load_study(dir, datasets);
  if (datasets == 0 && std::getenv("CMFA_RUN_SLOW")) {
    StudyConfig cfg = StudyConfig::desk_defaults();
    cfg.out_dir = dir;
    run_study(cfg);
    units = load_study(dir, datasets);
  }
  return units;
}

void check_study_size(Report& rep, int datasets) {
  rep.note(fmt("%d datasets with both analyses in %s", datasets, study_dir().c_str()));
  rep.check(datasets >= 100, fmt("study has %d of 100 datasets", datasets));
}

const MetricsRow* metric(const std::vector<MetricsRow>& rows, int level, const std::string& est, const std::string& stratum,
                         Analysis a) {
  for (const auto& r : rows) {
    if (r.level == level && r.estimand == est && r.stratum == stratum && r.analysis == a) return &r;
  }
  return nullptr;
}

void criterion_null_study(Report& rep, const std::vector<MetricsRow>& rows) {
  const MetricsRow* mv_any = metric(rows, 1, "beta", "any", Analysis::MV);
  if (!mv_any) {
    rep.check(false, "no level-1 beta results");
    return;
  }
  rep.check(mv_any->detection_rate >= 0.02 && mv_any->detection_rate <= 0.10,
            fmt("MV FPR beta %.3f outside [0.02, 0.10]", mv_any->detection_rate));
  rep.note(fmt("MV FPR beta (any) %.3f", mv_any->detection_rate));
  for (const char* e : {"beta", "gamma", "delta"}) {
    const MetricsRow* mv = metric(rows, 1, e, "8", Analysis::MV);
    const MetricsRow* uv = metric(rows, 1, e, "8", Analysis::UV);
    if (!mv || !uv) {
      rep.check(false, std::string("no T_i=8 rows for ") + e);
      continue;
    }
    rep.check(uv->detection_rate > mv->detection_rate,
              fmt("%s FPR at T_i=8: UV %.3f not above MV %.3f", e, uv->detection_rate, mv->detection_rate));
    rep.note(fmt("%s FPR at T_i=8: MV %.3f, UV %.3f (%d units)", e, mv->detection_rate, uv->detection_rate, mv->n_units));
  }
  const MetricsRow* mv8 = metric(rows, 1, "beta", "8", Analysis::MV);
  const MetricsRow* uv8 = metric(rows, 1, "beta", "8", Analysis::UV);
  if (mv8 && uv8) {
    const double ratio = mv8->ci_width / uv8->ci_width;
    rep.check(ratio < 0.75, fmt("beta CI width ratio MV/UV at T_i=8 %.3f", ratio));
    rep.note(fmt("beta CI width at T_i=8: MV %.3f, UV %.3f (ratio %.2f)", mv8->ci_width, uv8->ci_width, ratio));
  }
}

void criterion_power(Report& rep, const std::vector<MetricsRow>& rows) {
  const MetricsRow* mv = metric(rows, 2, "beta", "any", Analysis::MV);
  const MetricsRow* uv = metric(rows, 2, "beta", "any", Analysis::UV);
  if (!mv || !uv) {
    rep.check(false, "no level-2 beta results");
    return;
  }
  const double gap = mv->detection_rate - uv->detection_rate;
  rep.check(gap >= 0.10, fmt("MV minus UV detection %.3f", gap));
  rep.note(fmt("beta detection at 0.4: MV %.3f, UV %.3f", mv->detection_rate, uv->detection_rate));
}

// ---------------------------------------------------------------- 7

void criterion_calibration(Report& rep) {
  const int B = 500;
  SimScenario sc;
  const TreatmentStats st = treatment_stats(sc, B, 1);
  const double mean_treated_free = st.mean_n_control;
  rep.check(std::abs(mean_treated_free - 40.0) <= 2.0, fmt("mean N1 %.2f", mean_treated_free));
  rep.check(std::abs(st.gap_p / 0.075 - 1) <= 0.05, fmt("completion gap %.4f", st.gap_p));
  rep.check(std::abs(st.gap_q / 0.75 - 1) <= 0.05, fmt("contact gap %.4f", st.gap_q));
  rep.note(fmt("500 held-out datasets: N1 %.2f, gap_p %.4f, gap_q %.4f", st.mean_n_control, st.gap_p, st.gap_q));

  std::vector<double> mu, p, q;
  for (int b = 0; b < B; ++b) {
    SimScenario s = sc;
    s.seed = 1 + static_cast<std::uint64_t>(b);
    const SimOutput out = generate_dataset(s);
    mu.insert(mu.end(), out.truth.mu.data(), out.truth.mu.data() + out.truth.mu.size());
    p.insert(p.end(), out.truth.p.data(), out.truth.p.data() + out.truth.p.size());
    q.insert(q.end(), out.truth.q.data(), out.truth.q.data() + out.truth.q.size());
  }
  const double qm = brute_percentile(mu, 0.975), qp = brute_percentile(p, 0.975), qq = brute_percentile(q, 0.975);
  rep.check(std::abs(qm / 7.5 - 1) <= 0.10, fmt("97.5%% quantile of mu %.3f", qm));
  rep.check(std::abs(qp / 0.85 - 1) <= 0.10, fmt("97.5%% quantile of p %.3f", qp));
  rep.check(std::abs(qq / 10.0 - 1) <= 0.10, fmt("97.5%% quantile of q %.3f", qq));
  rep.note(fmt("97.5%% quantiles: mu %.3f, p %.3f, q %.3f", qm, qp, qq));
}

// ---------------------------------------------------------------- 8

void criterion_causal(Report& rep) {
  long compared = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto [data, e] = random_effects(seed, 6 + static_cast<int>(seed % 7), 8 + static_cast<int>(seed % 5), 60);
    const auto dense = densify(e, data);
    const auto brute = brute_force(dense, data);
    const auto agg = aggregate_effects(e, data);
    const auto rk = compute_ranks(e, data);
    bool equal = agg.units.size() == brute.unit.size() && agg.times.size() == brute.time.size() &&
                 rk.cells.size() == brute.rank.size();
    if (!equal) {
      rep.check(false, fmt("seed %d: group sizes differ", static_cast<int>(seed)));
      continue;
    }
    for (int l = 0; l < dense.L; ++l) {
      for (std::size_t u = 0; u < agg.units.size(); ++u) equal &= agg.unit(l, static_cast<int>(u)) == brute.unit.at(agg.units[u])[l];
      for (std::size_t k = 0; k < agg.times.size(); ++k) equal &= agg.time(l, static_cast<int>(k)) == brute.time.at(agg.times[k])[l];
      equal &= agg.overall(l) == brute.overall[l];
      for (std::size_t c = 0; c < rk.cells.size(); ++c) equal &= rk.values(l, static_cast<int>(c)) == brute.rank.at(rk.cells[c])[l];
      for (std::size_t u = 0; u < rk.units.size(); ++u)
        equal &= rk.unit(l, static_cast<int>(u)) == brute.unit_rank.at(rk.units[u])[l];
      compared += static_cast<long>(agg.units.size() + agg.times.size() + 1 + rk.cells.size() + rk.units.size());
    }
    // Summaries of every unit-level series.
    for (std::size_t u = 0; u < agg.units.size(); ++u) {
      const Summary s = summarize(agg.unit.col(static_cast<int>(u)));
      const auto& v = brute.unit.at(agg.units[u]);
      double sum = 0.0;
      for (double x : v) sum += x;
      equal &= s.mean == sum / v.size();
      equal &= s.lo == brute_percentile(v, 0.025);
      equal &= s.hi == brute_percentile(v, 0.975);
      compared += 3;
    }
    rep.check(equal, fmt("seed %d: mismatch against brute force", static_cast<int>(seed)));
  }
  rep.note(fmt("%ld values compared bit for bit over 50 random instances", compared));
}

// ---------------------------------------------------------------- 9

int run(const std::string& cmd) {
  const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void criterion_cli(Report& rep) {
  const std::string cli = CMFA_CLI_PATH;
  const fs::path root = fs::temp_directory_path() / "cmfa_acceptance_cli";
  fs::remove_all(root);
  const std::string sim = (root / "sim").string(), fit = (root / "fit").string(), sum = (root / "summary").string();

  rep.check(run(cli + " simulate --seed 3 --out-dir " + sim) == 0, "simulate failed");
  for (const char* f : {"outcomes.csv", "treatment.csv", "truth_units.csv", "truth_cells.csv"})
    rep.check(fs::exists(fs::path(sim) / f), std::string("simulate did not write ") + f);

  rep.check(run(cli + " fit --data " + sim + "/outcomes.csv --treatment " + sim +
                "/treatment.csv --iters 2000 --thin 10 --burnin 100 --out-dir " + fit) == 0,
            "fit failed");
  for (const char* f : {"draws.csv", "fit_meta.csv", "diagnostics.csv", "diagnostics.txt"})
    rep.check(fs::exists(fs::path(fit) / f), std::string("fit did not write ") + f);

  rep.check(run(cli + " summarize --draws " + fit + " --out-dir " + sum) == 0, "summarize failed");
  for (const auto& f : effect_file_names()) {
    rep.check(fs::exists(fs::path(fit) / f), "fit did not write " + f);
    rep.check(fs::exists(fs::path(sum) / f), "summarize did not write " + f);
  }

  const fs::path ranks = fs::path(sum) / "ranks.csv";
  if (fs::exists(ranks)) {
    const CsvTable t = read_csv(ranks.string());
    const int cols[] = {t.column("mean"), t.column("lo95"), t.column("hi95")};
    std::size_t bad = 0;
    for (const auto& row : t.rows) {
      for (int c : cols) {
        const double v = std::stod(row[c]);
        bad += !(v > 0.0 && v < 1.0);
      }
    }
    rep.check(!t.rows.empty(), "ranks.csv is empty");
    rep.check(bad == 0, fmt("%zu rank values outside (0,1)", bad));
    rep.note(fmt("%zu rank rows, all in (0,1)", t.rows.size()));
  }

  rep.check(run(cli) == 1, "no arguments should exit 1");
  rep.check(run(cli + " fit --data /nonexistent.csv --treatment /nonexistent.csv --out-dir " + (root / "x").string()) ==
                1,
            "missing input should exit 1");
  fs::remove_all(root);
}

struct Criterion {
  int id;
  const char* title;
  std::function<void(Report&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<MetricsRow> study_rows;
  int study_datasets = -1;
  auto study = [&](Report& rep) -> const std::vector<MetricsRow>& {
    if (study_datasets < 0) study_rows = compute_metrics(study_results(study_datasets));
    check_study_size(rep, study_datasets);
    return study_rows;
  };

  const std::vector<Criterion> criteria{
      {1, "augmentation exactness (CRT pmf, Polya-Gamma means)", criterion_augmentation},
      {2, "gradient and Hessian correctness of SMMALA targets", criterion_gradients},
      {3, "conjugate-block exactness", criterion_conjugate},
      {4, "Geweke joint-distribution test and seeded mutations", criterion_geweke},
      {5, "desk-scale null study (false positives, CI widths)", [&](Report& r) { criterion_null_study(r, study(r)); }},
      {6, "power ordering at beta = 0.4", [&](Report& r) { criterion_power(r, study(r)); }},
      {7, "generator calibration", criterion_calibration},
      {8, "causal arithmetic against brute force", criterion_causal},
      {9, "CLI simulate -> fit -> summarize", criterion_cli},
  };

  std::set<int> wanted;
  for (int k = 1; k < argc; ++k) wanted.insert(std::atoi(argv[k]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Report rep;
    const auto start = std::chrono::steady_clock::now();
    try {
      c.run(rep);
    } catch (const std::exception& e) {
      rep.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool ok = rep.failures.empty();
    failed += !ok;
    std::printf("%s [%d] %s (%.1fs)\n", ok ? "PASS" : "FAIL", c.id, c.title, secs);
    for (const auto& n : rep.notes) std::printf("       %s\n", n.c_str());
    for (const auto& f : rep.failures) std::printf("       failed: %s\n", f.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
