#include "cmfa/simgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/tools/roots.hpp>

#include "cmfa/distributions.hpp"
#include "cmfa/error.hpp"
#include "cmfa/rng.hpp"

namespace cmfa {

namespace {

enum SimStream : std::uint64_t {
  kLoadings = 0x51,
  kFactors,
  kRamps,
  kExposure,
  kAssignment,
  kNormalDraw,
  kBinomialDraw,
  kCountDraw,
};

RngStream sim_stream(std::uint64_t seed, SimStream what, std::uint64_t a, std::uint64_t b = 0) {
  return RngStream(seed, stream_key({static_cast<std::uint64_t>(what), a, b}));
}

// Which outcomes each true loading column drives (columns 2..7).
constexpr std::array<std::array<bool, 3>, 7> kScalePattern = {{
    {false, false, false},
    {true, true, false},
    {true, false, true},
    {false, true, true},
    {true, false, false},
    {false, true, false},
    {false, false, true},
}};

constexpr int kNonzeroPerOutcome = 3;

Eigen::MatrixXd correlated_paths(const SimScenario& sc, double mean_first, double scale, int family,
                                 const Eigen::MatrixXd& chol_R) {
  Eigen::MatrixXd paths(sc.T, sc.J_true);
  RngStream rng = sim_stream(sc.seed, kFactors, static_cast<std::uint64_t>(family));
  for (int j = 0; j < sc.J_true; ++j) {
    const bool active = j > 0 && j < 7 && kScalePattern[j][family];
    Eigen::VectorXd z(sc.T);
    for (int t = 0; t < sc.T; ++t) z(t) = rng.normal();
    if (j == 0) {
      paths.col(j).setConstant(mean_first);
    } else if (active) {
      paths.col(j) = scale * (chol_R * z);
    } else {
      paths.col(j).setZero();
    }
  }
  return paths;
}

double ramp(double start, double end, int t, int T) {
  return start + static_cast<double>(t) / (T - 1) * (end - start);
}

// Draws an outcome cell from its own stream so that changing one family's
// effect leaves the other families' draws untouched.
double draw_normal(std::uint64_t seed, int i, int t, double mean, double sd) {
  RngStream rng = sim_stream(seed, kNormalDraw, i, t);
  return mean + sd * rng.normal();
}

int draw_binomial(std::uint64_t seed, int i, int t, int n, double p) {
  RngStream rng = sim_stream(seed, kBinomialDraw, i, t);
  return static_cast<int>(rng.binomial(n, p));
}

int draw_count(std::uint64_t seed, int i, int t, double mean, double xi) {
  if (!(mean > 0.0)) return 0;
  RngStream rng = sim_stream(seed, kCountDraw, i, t);
  return static_cast<int>(sample_negbin(mean, xi, rng));
}

struct Untreated {
  SimTruth truth;
  Eigen::MatrixXi n;
  Eigen::MatrixXd w;
  Eigen::MatrixXd u;  // assignment uniforms
};

Untreated generate_untreated(const SimScenario& sc) {
  sc.validate();
  Untreated out;
  SimTruth& tr = out.truth;
  tr.seed = sc.seed;
  tr.noise_var = sc.noise_var();
  tr.xi = sc.xi_true;

  tr.loadings.resize(sc.N, sc.J_true);
  for (int i = 0; i < sc.N; ++i) {
    RngStream rng = sim_stream(sc.seed, kLoadings, i);
    tr.loadings(i, 0) = 1.0;
    for (int j = 1; j < sc.J_true; ++j) tr.loadings(i, j) = rng.normal();
  }
  Eigen::MatrixXd R(sc.T, sc.T);
  for (int t = 0; t < sc.T; ++t) {
    for (int s = 0; s < sc.T; ++s) R(t, s) = std::pow(sc.factor_corr, std::abs(t - s));
  }
  const Eigen::MatrixXd chol_R = R.llt().matrixL();
  tr.f = correlated_paths(sc, 5.0, sc.s1, 0, chol_R);
  tr.g = correlated_paths(sc, logit(0.6), sc.s2, 1, chol_R);
  tr.h = correlated_paths(sc, std::log(4.0), sc.s3, 2, chol_R);
  tr.mu = tr.loadings * tr.f.transpose();
  tr.p = (tr.loadings * tr.g.transpose()).unaryExpr([](double x) { return expit(x); });
  tr.q = (tr.loadings * tr.h.transpose()).array().exp().matrix();

  out.n.resize(sc.N, sc.T);
  out.w.resize(sc.N, sc.T);
  out.u.resize(sc.N, sc.T);
  tr.last_untreated.assign(sc.N, sc.T);
  for (int i = 0; i < sc.N; ++i) {
    RngStream ramp_rng = sim_stream(sc.seed, kRamps, i);
    const double n_end = sc.trials_end_lo + (sc.trials_end_hi - sc.trials_end_lo) * ramp_rng.uniform();
    const double w_end = sc.offset_end_lo + (sc.offset_end_hi - sc.offset_end_lo) * ramp_rng.uniform();
    RngStream exp_rng = sim_stream(sc.seed, kExposure, i);
    RngStream assign_rng = sim_stream(sc.seed, kAssignment, i);
    for (int t = 0; t < sc.T; ++t) {
      out.n(i, t) = static_cast<int>(exp_rng.poisson(ramp(sc.trials_start, n_end, t, sc.T)));
      out.w(i, t) = static_cast<double>(exp_rng.poisson(ramp(sc.offset_start, w_end, t, sc.T)));
      out.u(i, t) = assign_rng.uniform();
    }
  }
  return out;
}

// First treated time (1-based) is the first t > t_min with u < expit(...);
// the last untreated time is one less. Units never selected stay controls.
int assign_treatment(const SimScenario& sc, const Eigen::MatrixXd& p, const Eigen::MatrixXd& q,
                     const Eigen::MatrixXd& u, int i) {
  for (int t1 = sc.t_min + 1; t1 <= sc.T; ++t1) {
    const int t = t1 - 1;
    const double prob = expit(sc.kappa0 + sc.kappa1 * p(i, t) + sc.kappa2 * q(i, t));
    if (u(i, t) < prob) return t1 - 1;
  }
  return sc.T;
}

}  // namespace

double SimScenario::noise_var() const {
  // Each active loading contributes Var(lambda * f) = s1^2.
  return 0.25 * kNonzeroPerOutcome * s1 * s1;
}

void SimScenario::validate() const {
  if (N < 1 || T < 3 || J_true != 7) throw ValidationError("scenario: need N >= 1, T >= 3 and J_true = 7");
  if (t_min < 1 || t_min >= T) throw ValidationError("scenario: t_min must lie in [1, T)");
  if (!(xi_true > 0)) throw ValidationError("scenario: xi_true must be positive");
  if (!(factor_corr >= 0 && factor_corr < 1)) throw ValidationError("scenario: factor_corr must lie in [0,1)");
  if ((effect_level == 1) != effects.is_null()) {
    throw ValidationError("scenario: effect level 1 must carry zero effects and only level 1 may");
  }
}

SimOutput generate_dataset(const SimScenario& scenario) {
  Untreated base = generate_untreated(scenario);
  SimTruth& tr = base.truth;
  for (int i = 0; i < scenario.N; ++i) tr.last_untreated[i] = assign_treatment(scenario, tr.p, tr.q, base.u, i);

  PanelDataset data = make_empty_panel(scenario.N, scenario.T, 1, 1, 1, 0);
  data.outcome_labels = {"normal", "binomial", "count"};
  const int width = static_cast<int>(std::to_string(scenario.N).size());
  for (int i = 0; i < scenario.N; ++i) {
    std::string label = std::to_string(i + 1);
    data.unit_labels[i] = "u" + std::string(width - label.size(), '0') + label;
  }
  data.last_untreated = tr.last_untreated;
  data.n[0] = base.n;
  data.w[0] = base.w;
  const double sd = std::sqrt(tr.noise_var);
  for (int i = 0; i < scenario.N; ++i) {
    for (int t = 0; t < scenario.T; ++t) {
      data.y[0](i, t) = draw_normal(tr.seed, i, t, tr.mu(i, t), sd);
      data.k[0](i, t) = draw_binomial(tr.seed, i, t, base.n(i, t), tr.p(i, t));
      data.z[0](i, t) = draw_count(tr.seed, i, t, base.w(i, t) * tr.q(i, t), tr.xi);
    }
  }
  SimOutput out;
  out.truth = tr;
  out.data = apply_effects(data, tr, scenario.effects, &out.unit_effects);
  return out;
}

PanelDataset apply_effects(const PanelDataset& data, const SimTruth& truth, const EffectSizes& effects,
                           std::vector<UnitEffectTruth>* unit_effects) {
  PanelDataset out = data;
  const double sd = std::sqrt(truth.noise_var);
  if (unit_effects) unit_effects->clear();
  for (int i = 0; i < data.N; ++i) {
    const int Ti = truth.last_untreated[i];
    if (Ti == data.T) continue;
    UnitEffectTruth ut;
    ut.unit = i;
    ut.last_untreated = Ti;
    int n_alpha = 0, n_binom = 0, n_count = 0;
    for (int t = Ti; t < data.T; ++t) {
      const double y0 = draw_normal(truth.seed, i, t, truth.mu(i, t), sd);
      const double y1 = draw_normal(truth.seed, i, t, truth.mu(i, t) + effects.alpha, sd);
      out.y[0](i, t) = y1;
      ut.alpha += y1 - y0;
      ++n_alpha;

      const int n = data.n[0](i, t);
      const double p1 = effects.beta == 0.0 ? truth.p(i, t) : expit(logit(truth.p(i, t)) + effects.beta);
      const int k0 = draw_binomial(truth.seed, i, t, n, truth.p(i, t));
      const int k1 = draw_binomial(truth.seed, i, t, n, p1);
      out.k[0](i, t) = k1;
      if (n > 0) {
        ut.beta += p1 - truth.p(i, t);
        ut.gamma += k1 - k0;
        ++n_binom;
      }

      const double w = data.w[0](i, t);
      const double q1 = truth.q(i, t) * std::exp(effects.delta);
      const int z0 = draw_count(truth.seed, i, t, w * truth.q(i, t), truth.xi);
      const int z1 = draw_count(truth.seed, i, t, w * q1, truth.xi);
      out.z[0](i, t) = z1;
      if (w > 0.0) {
        ut.delta += z1 - z0;
        ++n_count;
      }
    }
    if (unit_effects) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      ut.alpha = n_alpha ? ut.alpha / n_alpha : nan;
      ut.beta = n_binom ? ut.beta / n_binom : nan;
      ut.gamma = n_binom ? ut.gamma / n_binom : nan;
      ut.delta = n_count ? ut.delta / n_count : nan;
      unit_effects->push_back(ut);
    }
  }
  return out;
}

namespace {

// Everything treatment_stats needs from one dataset, independent of kappa.
struct AssignmentInputs {
  Eigen::MatrixXd p, q, u, kn, zw;  // kn, zw are NaN where n = 0 / w = 0
};

AssignmentInputs assignment_inputs(const SimScenario& sc) {
  Untreated base = generate_untreated(sc);
  AssignmentInputs in;
  in.p = base.truth.p;
  in.q = base.truth.q;
  in.u = base.u;
  in.kn.resize(sc.N, sc.T);
  in.zw.resize(sc.N, sc.T);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i < sc.N; ++i) {
    for (int t = 0; t < sc.T; ++t) {
      const int n = base.n(i, t);
      const double w = base.w(i, t);
      in.kn(i, t) = n > 0 ? static_cast<double>(draw_binomial(sc.seed, i, t, n, in.p(i, t))) / n : nan;
      in.zw(i, t) = w > 0 ? draw_count(sc.seed, i, t, w * in.q(i, t), base.truth.xi) / w : nan;
    }
  }
  return in;
}

TreatmentStats stats_from_inputs(const SimScenario& sc, const std::vector<AssignmentInputs>& inputs) {
  TreatmentStats st;
  const int B = static_cast<int>(inputs.size());
  for (const auto& in : inputs) {
    int n_control = 0;
    double sum[2][2] = {{0, 0}, {0, 0}};  // [control?][p/q]
    int cnt[2][2] = {{0, 0}, {0, 0}};
    for (int i = 0; i < sc.N; ++i) {
      const bool control = assign_treatment(sc, in.p, in.q, in.u, i) == sc.T;
      n_control += control;
      for (int t = sc.t_min - 1; t < sc.T; ++t) {
        if (!std::isnan(in.kn(i, t))) {
          sum[control][0] += in.kn(i, t);
          ++cnt[control][0];
        }
        if (!std::isnan(in.zw(i, t))) {
          sum[control][1] += in.zw(i, t);
          ++cnt[control][1];
        }
      }
    }
    st.mean_n_control += n_control;
    auto mean = [&](int c, int k) { return cnt[c][k] ? sum[c][k] / cnt[c][k] : 0.0; };
    if (cnt[0][0] && cnt[1][0]) st.gap_p += mean(1, 0) - mean(0, 0);
    if (cnt[0][1] && cnt[1][1]) st.gap_q += mean(1, 1) - mean(0, 1);
  }
  st.mean_n_control /= B;
  st.gap_p /= B;
  st.gap_q /= B;
  return st;
}

std::vector<AssignmentInputs> build_inputs(const SimScenario& tmpl, int n_datasets, std::uint64_t base_seed) {
  std::vector<AssignmentInputs> inputs;
  inputs.reserve(n_datasets);
  for (int b = 0; b < n_datasets; ++b) {
    SimScenario sc = tmpl;
    sc.seed = base_seed + static_cast<std::uint64_t>(b);
    sc.effect_level = 1;
    sc.effects = {};
    inputs.push_back(assignment_inputs(sc));
  }
  return inputs;
}

// Bisection for a statistic that is decreasing in the parameter.
template <typename F>
double bisect_decreasing(F&& stat, double target, double lo, double hi) {
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (stat(mid) > target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

bool within(double value, double target, double rel) {
  return std::abs(value - target) <= rel * std::abs(target);
}

}  // namespace

TreatmentStats treatment_stats(const SimScenario& scenario, int n_datasets, std::uint64_t base_seed) {
  if (n_datasets < 1) throw ValidationError("treatment_stats: need at least one dataset");
  return stats_from_inputs(scenario, build_inputs(scenario, n_datasets, base_seed));
}

CalibrationResult calibrate_kappas(const SimScenario& tmpl, int n_datasets, std::uint64_t base_seed,
                                   const CalibrationTargets& targets, bool fix_confounding) {
  if (n_datasets < 1) throw ValidationError("calibrate_kappas: need at least one dataset");
  const std::vector<AssignmentInputs> inputs = build_inputs(tmpl, n_datasets, base_seed);
  SimScenario sc = tmpl;
  if (fix_confounding) {
    sc.kappa1 = 0.0;
    sc.kappa2 = 0.0;
  }
  auto eval = [&](double k0, double k1, double k2) {
    SimScenario s = sc;
    s.kappa0 = k0;
    s.kappa1 = k1;
    s.kappa2 = k2;
    return stats_from_inputs(s, inputs);
  };

  // kappa0 is re-solved for E[N1] inside every evaluation, so the outer
  // cycle only has to move kappa1 and kappa2.
  auto solve_k0 = [&](double k1, double k2) {
    return bisect_decreasing([&](double k) { return eval(k, k1, k2).mean_n_control; }, targets.n_control,
                             -100.0, 200.0);
  };
  CalibrationResult res;
  double best_err = std::numeric_limits<double>::infinity();
  for (int outer = 0; outer < 50; ++outer) {
    res.outer_iterations = outer + 1;
    const double prev[2] = {sc.kappa1, sc.kappa2};
    if (!fix_confounding) {
      sc.kappa1 = bisect_decreasing(
          [&](double k) { return eval(solve_k0(k, sc.kappa2), k, sc.kappa2).gap_p; }, targets.gap_p, -200.0, 20.0);
      sc.kappa2 = bisect_decreasing(
          [&](double k) { return eval(solve_k0(sc.kappa1, k), sc.kappa1, k).gap_q; }, targets.gap_q, -30.0, 10.0);
    }
    sc.kappa0 = solve_k0(sc.kappa1, sc.kappa2);
    const TreatmentStats st = eval(sc.kappa0, sc.kappa1, sc.kappa2);
    const double err_n = std::abs(st.mean_n_control - targets.n_control) / targets.n_control;
    const double err_p = fix_confounding ? 0.0 : std::abs(st.gap_p - targets.gap_p) / targets.gap_p;
    const double err_q = fix_confounding ? 0.0 : std::abs(st.gap_q - targets.gap_q) / targets.gap_q;
    const double err = std::max({err_n, err_p, err_q});
    if (err < best_err) {
      best_err = err;
      res.kappa0 = sc.kappa0;
      res.kappa1 = sc.kappa1;
      res.kappa2 = sc.kappa2;
      res.achieved = st;
    }
    if (fix_confounding || err < 0.2 * targets.rel_tol) break;
    if (std::abs(prev[0] - sc.kappa1) + std::abs(prev[1] - sc.kappa2) < 1e-9) break;
  }
  const TreatmentStats& a = res.achieved;
  res.converged = within(a.mean_n_control, targets.n_control, targets.rel_tol) &&
                  (fix_confounding || (within(a.gap_p, targets.gap_p, targets.rel_tol) &&
                                       within(a.gap_q, targets.gap_q, targets.rel_tol)));
  return res;
}

FactorScales solve_factor_scales() {
  // A sum of three products of independent standard normals is Z sqrt(2G)
  // with G ~ Gamma(3/2, 1); its CDF is E_G[Phi(x / sqrt(2G))].
  const boost::math::normal_distribution<double> std_normal;
  auto cdf = [&](double x) {
    auto integrand = [&](double g) {
      if (g <= 0.0) return 0.0;
      const double density = std::sqrt(g) * std::exp(-g) / std::tgamma(1.5);
      return boost::math::cdf(std_normal, x / std::sqrt(2.0 * g)) * density;
    };
    return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
        integrand, 0.0, std::numeric_limits<double>::infinity(), 15, 1e-14);
  };
  boost::math::tools::eps_tolerance<double> tol(50);
  std::uintmax_t max_iter = 200;
  const auto bracket = boost::math::tools::bisect([&](double x) { return cdf(x) - 0.975; }, 0.5, 10.0, tol, max_iter);
  FactorScales fs;
  fs.quantile = 0.5 * (bracket.first + bracket.second);
  fs.s1 = 2.5 / fs.quantile;
  fs.s2 = (logit(0.85) - logit(0.6)) / fs.quantile;
  fs.s3 = std::log(10.0 / 4.0) / fs.quantile;
  return fs;
}

}  // namespace cmfa
