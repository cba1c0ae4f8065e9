#include "cmfa/samplers.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <numeric>
#include <thread>

#include "cmfa/distributions.hpp"
#include "cmfa/error.hpp"
#include "cmfa/linalg.hpp"

namespace cmfa {

namespace {

constexpr double kNoiseVarMax = 100.0;
constexpr double kShrinkMin = 1e-12;
constexpr double kShrinkMax = 1e12;
constexpr double kStepMin = 1e-3;
constexpr double kStepMax = 20.0;

double clamp_shrink(double v) { return std::clamp(v, kShrinkMin, kShrinkMax); }

double covariate_term(const LatentState& s, const PanelDataset& data, int o, int i, int t) {
  if (data.P == 0) return 0.0;
  return s.coef.row(o).dot(data.x[i].row(t));
}

double predictor(const LatentState& s, const PanelDataset& data, int o, int i, int t) {
  return s.loadings.row(i).dot(s.factors[o].row(t)) + covariate_term(s, data, o, i, t);
}

// Metric (regularised negative Hessian) and gradient at a point. Falls back
// to the prior precision with zero drift when the target cannot be
// evaluated or the metric is not positive definite.
struct LocalGeometry {
  double log_density;
  Eigen::VectorXd grad;
  Eigen::LLT<Eigen::MatrixXd> chol;
};

LocalGeometry geometry_at(const PoissonGaussianTarget& target, const Eigen::VectorXd& x) {
  LocalGeometry g;
  Eigen::MatrixXd H;
  g.log_density = target.evaluate(x, g.grad, H);
  std::optional<Eigen::LLT<Eigen::MatrixXd>> chol;
  if (std::isfinite(g.log_density)) chol = jittered_cholesky(H);
  if (!chol) {
    chol = jittered_cholesky(target.quad());
    if (!chol) chol = Eigen::LLT<Eigen::MatrixXd>(Eigen::MatrixXd::Identity(x.size(), x.size()));
    g.grad = Eigen::VectorXd::Zero(x.size());
  }
  g.chol = std::move(*chol);
  return g;
}

double proposal_log_density(const LocalGeometry& from, const Eigen::VectorXd& from_x,
                            const Eigen::VectorXd& to, double eps) {
  const Eigen::VectorXd mean = from_x + 0.5 * eps * eps * from.chol.solve(from.grad);
  const Eigen::VectorXd scaled = from.chol.matrixU() * (to - mean);
  return 0.5 * log_det(from.chol) - 0.5 * scaled.squaredNorm() / (eps * eps);
}

[[noreturn]] void rethrow_in_block(const char* block, std::int64_t iteration, const std::exception& e) {
  throw NumericalError(std::string(block) + " at iteration " + std::to_string(iteration) + ": " +
                       e.what());
}

template <typename F>
void run_block(const char* name, std::int64_t iteration, F&& f) {
  try {
    f();
  } catch (const NumericalError& e) {
    rethrow_in_block(name, iteration, e);
  }
}

}  // namespace

double adapt_step(double step, double accept_prob, double target, std::int64_t iteration) {
  const double gain = std::pow(static_cast<double>(iteration + 1), -0.6);
  return std::clamp(step * std::exp(gain * (accept_prob - target)), kStepMin, kStepMax);
}

double smmala_step(const PoissonGaussianTarget& target, Eigen::VectorXd& x, double eps,
                   RngStream& rng, bool& accepted, SamplerMutation mutation) {
  accepted = false;
  const LocalGeometry here = geometry_at(target, x);
  const Eigen::VectorXd drift = 0.5 * eps * eps * here.chol.solve(here.grad);
  const Eigen::VectorXd z = standard_normal_vector(static_cast<int>(x.size()), rng);
  const Eigen::VectorXd noise = mutation == SamplerMutation::UnscaledProposal
                              ? z
                              : Eigen::VectorXd(here.chol.matrixU().solve(z));
  const Eigen::VectorXd proposal =
      (mutation == SamplerMutation::FlippedDrift ? Eigen::VectorXd(x - drift) : Eigen::VectorXd(x + drift)) +
      eps * noise;
  if (!proposal.allFinite()) return 0.0;

  const LocalGeometry there = geometry_at(target, proposal);
  if (!std::isfinite(there.log_density)) return 0.0;
  double log_alpha = there.log_density - here.log_density +
                     proposal_log_density(there, proposal, x, eps) -
                     proposal_log_density(here, x, proposal, eps);
  if (!std::isfinite(here.log_density)) log_alpha = 0.0;
  if (std::isnan(log_alpha)) return 0.0;
  const double prob = log_alpha >= 0.0 ? 1.0 : std::exp(log_alpha);
  if (std::log(rng.uniform()) < log_alpha) {
    x = proposal;
    accepted = true;
  }
  return prob;
}

double log_marginal_uniform_variance(double S, int T) {
  const double a = 0.5 * T - 1.0;
  const double x = std::max(0.5 * S, 1e-300);
  return -0.5 * T * std::log(2.0 * std::numbers::pi) - a * std::log(x) + std::lgamma(a) +
         log_gamma_q(a, x);
}

void update_omega(LatentState& s, const PanelDataset& data, const FitConfig& cfg,
                  const SweepContext& ctx) {
  for (int d = 0; d < data.D2; ++d) {
    const int o = data.outcome_index(Family::Binomial, d);
    for (int i = 0; i < data.N; ++i) {
      RngStream rng = ctx.stream(Block::Omega, static_cast<std::uint64_t>(d) * data.N + i);
      for (int t = 0; t < data.last_untreated[i]; ++t) {
        const int n = data.n[d](i, t);
        s.pg_aux[d](i, t) = n > 0 ? sample_polya_gamma(n, predictor(s, data, o, i, t), rng, cfg.pg_exact_max) : 0.0;
      }
    }
  }
}

void update_L(LatentState& s, const PanelDataset& data, const SweepContext& ctx) {
  for (int d = 0; d < data.D3; ++d) {
    const int o = data.outcome_index(Family::NegBin, d);
    for (int i = 0; i < data.N; ++i) {
      RngStream rng = ctx.stream(Block::Crt, static_cast<std::uint64_t>(d) * data.N + i);
      const double xi = s.xi(i, d);
      for (int t = 0; t < data.last_untreated[i]; ++t) {
        const double w = data.w[d](i, t);
        const int z = data.z[d](i, t);
        if (!(w > 0.0) || z == 0) {
          s.crt_aux[d](i, t) = 0;
          continue;
        }
        const double r = w * std::exp(predictor(s, data, o, i, t)) / xi;
        if (!(r > 0.0) || !std::isfinite(r)) {
          throw NumericalError("CRT concentration not finite at (unit " + std::to_string(i) +
                               ", time " + std::to_string(t + 1) + ")");
        }
        s.crt_aux[d](i, t) = static_cast<int>(sample_crt(z, r, rng));
      }
    }
  }
}

namespace {

// Conjugate draw of a factor row from stacked Gaussian rows A x ~ r plus a
// diagonal prior precision.
Eigen::VectorXd conjugate_draw(const Eigen::MatrixXd& A, const Eigen::VectorXd& r,
                               const Eigen::VectorXd& prior_precision, RngStream& rng,
                               double scale) {
  const int J = static_cast<int>(prior_precision.size());
  Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(J, J);
  prec.selfadjointView<Eigen::Lower>().rankUpdate(A.transpose());
  prec.triangularView<Eigen::StrictlyUpper>() = prec.transpose();
  prec.diagonal() += prior_precision;
  auto chol = jittered_cholesky(prec);
  if (!chol) throw NumericalError("conjugate precision not positive definite");
  return sample_from_precision(*chol, A.transpose() * r, rng, scale);
}

}  // namespace

void update_f(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx) {
  const double scale = cfg.mutation == SamplerMutation::WrongFactorVariance ? std::sqrt(2.0) : 1.0;
  const int J = s.J;
  Eigen::MatrixXd A(data.N, J);
  Eigen::VectorXd r(data.N);
  for (int d = 0; d < data.D1; ++d) {
    const int o = data.outcome_index(Family::Normal, d);
    const Eigen::VectorXd prior_prec = s.factor_var.col(o).array().inverse().matrix();
    for (int t = 0; t < data.T; ++t) {
      int rows = 0;
      for (int i = 0; i < data.N; ++i) {
        if (!cell_observed(data, Family::Normal, i, t, d)) continue;
        const double inv_sd = 1.0 / std::sqrt(s.noise_var(i, d));
        A.row(rows) = s.loadings.row(i) * inv_sd;
        r(rows) = (data.y[d](i, t) - covariate_term(s, data, o, i, t)) * inv_sd;
        ++rows;
      }
      RngStream rng = ctx.stream(Block::NormalFactor, static_cast<std::uint64_t>(d) * data.T + t);
      s.factors[o].row(t) = conjugate_draw(A.topRows(rows), r.head(rows), prior_prec, rng, scale).transpose();
    }
  }
}

void update_g(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx) {
  (void)cfg;
  const int J = s.J;
  Eigen::MatrixXd A(data.N, J);
  Eigen::VectorXd r(data.N);
  for (int d = 0; d < data.D2; ++d) {
    const int o = data.outcome_index(Family::Binomial, d);
    const Eigen::VectorXd prior_prec = s.factor_var.col(o).array().inverse().matrix();
    for (int t = 0; t < data.T; ++t) {
      int rows = 0;
      for (int i = 0; i < data.N; ++i) {
        if (!cell_observed(data, Family::Binomial, i, t, d)) continue;
        const double om = s.pg_aux[d](i, t);
        const double sq = std::sqrt(om);
        const double kappa = data.k[d](i, t) - 0.5 * data.n[d](i, t);
        A.row(rows) = s.loadings.row(i) * sq;
        r(rows) = (kappa - om * covariate_term(s, data, o, i, t)) / sq;
        ++rows;
      }
      RngStream rng = ctx.stream(Block::BinomialFactor, static_cast<std::uint64_t>(d) * data.T + t);
      s.factors[o].row(t) = conjugate_draw(A.topRows(rows), r.head(rows), prior_prec, rng, 1.0).transpose();
    }
  }
}

namespace {

void update_gaussian_coef(LatentState& s, const PanelDataset& data, Family family, Block block,
                          const SweepContext& ctx) {
  if (data.P == 0) return;
  const int count = family == Family::Normal ? data.D1 : data.D2;
  const Eigen::VectorXd prior_prec = Eigen::VectorXd::Constant(data.P, 1.0 / kCoefPriorVar);
  for (int d = 0; d < count; ++d) {
    const int o = data.outcome_index(family, d);
    std::vector<double> rows_r;
    std::vector<Eigen::RowVectorXd> rows_a;
    for (int i = 0; i < data.N; ++i) {
      for (int t = 0; t < data.last_untreated[i]; ++t) {
        if (!cell_observed(data, family, i, t, d)) continue;
        const double fit = s.loadings.row(i).dot(s.factors[o].row(t));
        if (family == Family::Normal) {
          const double inv_sd = 1.0 / std::sqrt(s.noise_var(i, d));
          rows_a.push_back(data.x[i].row(t) * inv_sd);
          rows_r.push_back((data.y[d](i, t) - fit) * inv_sd);
        } else {
          const double om = s.pg_aux[d](i, t);
          const double sq = std::sqrt(om);
          const double kappa = data.k[d](i, t) - 0.5 * data.n[d](i, t);
          rows_a.push_back(data.x[i].row(t) * sq);
          rows_r.push_back((kappa - om * fit) / sq);
        }
      }
    }
    Eigen::MatrixXd A(rows_a.size(), data.P);
    Eigen::VectorXd r(rows_a.size());
    for (std::size_t k = 0; k < rows_a.size(); ++k) {
      A.row(k) = rows_a[k];
      r(k) = rows_r[k];
    }
    RngStream rng = ctx.stream(block, d);
    s.coef.row(o) = conjugate_draw(A, r, prior_prec, rng, 1.0).transpose();
  }
}

}  // namespace

void update_eta1(LatentState& s, const PanelDataset& data, const SweepContext& ctx) {
  update_gaussian_coef(s, data, Family::Normal, Block::NormalCoef, ctx);
}

void update_eta2(LatentState& s, const PanelDataset& data, const SweepContext& ctx) {
  update_gaussian_coef(s, data, Family::Binomial, Block::BinomialCoef, ctx);
}

void update_h(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx) {
  for (int d = 0; d < data.D3; ++d) {
    const int o = data.outcome_index(Family::NegBin, d);
    for (int t = 0; t < data.T; ++t) {
      RngStream rng = ctx.stream(Block::CountFactor, static_cast<std::uint64_t>(d) * data.T + t);
      const PoissonGaussianTarget target = count_factor_conditional(s, data, t, d);
      Eigen::VectorXd x = s.factors[o].row(t).transpose();
      bool accepted = false;
      const double prob = smmala_step(target, x, s.count_factor_step(t, d), rng, accepted, cfg.mutation);
      if (accepted) s.factors[o].row(t) = x.transpose();
      if (ctx.adapt) {
        s.count_factor_step(t, d) = adapt_step(s.count_factor_step(t, d), prob, cfg.smmala_target, ctx.iteration);
      }
      if (ctx.stats) ctx.stats->count_factor.add(accepted);
    }
  }
}

void update_eta3(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx) {
  if (data.P == 0) return;
  for (int d = 0; d < data.D3; ++d) {
    const int o = data.outcome_index(Family::NegBin, d);
    RngStream rng = ctx.stream(Block::CountCoef, d);
    const PoissonGaussianTarget target = count_coef_conditional(s, data, d);
    Eigen::VectorXd x = s.coef.row(o).transpose();
    bool accepted = false;
    const double prob = smmala_step(target, x, s.count_coef_step(d), rng, accepted, cfg.mutation);
    if (accepted) s.coef.row(o) = x.transpose();
    if (ctx.adapt) s.count_coef_step(d) = adapt_step(s.count_coef_step(d), prob, cfg.smmala_target, ctx.iteration);
    if (ctx.stats) ctx.stats->count_coef.add(accepted);
  }
}

void update_lambda(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx) {
  const bool with_prior = cfg.mutation != SamplerMutation::DroppedLambdaPrior;
  for (int i = 0; i < data.N; ++i) {
    RngStream rng = ctx.stream(Block::Loadings, i);
    const PoissonGaussianTarget target = lambda_conditional(s, data, i, with_prior);
    Eigen::VectorXd x = s.loadings.row(i).transpose();
    bool accepted = false;
    const double prob = smmala_step(target, x, s.lambda_step(i), rng, accepted, cfg.mutation);
    if (accepted) s.loadings.row(i) = x.transpose();
    if (ctx.adapt) s.lambda_step(i) = adapt_step(s.lambda_step(i), prob, cfg.smmala_target, ctx.iteration);
    if (ctx.stats) ctx.stats->loadings.add(accepted);
  }
}

void update_sigma2(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx) {
  for (int d = 0; d < data.D1; ++d) {
    const int o = data.outcome_index(Family::Normal, d);
    for (int i = 0; i < data.N; ++i) {
      double ss = 0.0;
      int count = 0;
      for (int t = 0; t < data.last_untreated[i]; ++t) {
        const double y = data.y[d](i, t);
        if (std::isnan(y)) continue;
        const double r = y - predictor(s, data, o, i, t);
        ss += r * r;
        ++count;
      }
      // Log target in u = log sigma^2, including the Jacobian.
      auto log_target = [&](double u) { return -0.5 * count * u - 0.5 * ss * std::exp(-u) + u; };
      RngStream rng = ctx.stream(Block::NoiseVar, static_cast<std::uint64_t>(d) * data.N + i);
      const double u = std::log(s.noise_var(i, d));
      const double u_new = u + cfg.sigma2_proposal_sd * rng.normal();
      const double draw = rng.uniform();
      bool accepted = false;
      if (std::exp(u_new) <= kNoiseVarMax && std::log(draw) < log_target(u_new) - log_target(u)) {
        s.noise_var(i, d) = std::exp(u_new);
        accepted = true;
      }
      if (ctx.stats) ctx.stats->noise_var.add(accepted);
    }
  }
}

void update_xi(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx) {
  const int groups = s.pooled_dispersion ? 1 : data.N;
  std::vector<double> counts;
  std::vector<double> means;
  for (int d = 0; d < data.D3; ++d) {
    const int o = data.outcome_index(Family::NegBin, d);
    for (int g = 0; g < groups; ++g) {
      counts.clear();
      means.clear();
      const int i_begin = s.pooled_dispersion ? 0 : g;
      const int i_end = s.pooled_dispersion ? data.N : g + 1;
      for (int i = i_begin; i < i_end; ++i) {
        for (int t = 0; t < data.last_untreated[i]; ++t) {
          const double w = data.w[d](i, t);
          if (!(w > 0.0)) continue;
          counts.push_back(data.z[d](i, t));
          means.push_back(w * std::exp(predictor(s, data, o, i, t)));
        }
      }
      // Log target and gradient in u = log xi (Gamma prior plus Jacobian).
      auto eval = [&](double u, double& grad) {
        const double xi = std::exp(u);
        double lp = cfg.a_xi * u - s.dispersion_rate * xi;
        double dxi = 0.0;
        for (std::size_t c = 0; c < counts.size(); ++c) {
          lp += negbin_log_pmf(static_cast<std::int64_t>(counts[c]), means[c], xi);
          dxi += negbin_dlogpmf_dxi(counts[c], means[c], xi);
        }
        grad = xi * dxi + cfg.a_xi - s.dispersion_rate * xi;
        return lp;
      };
      RngStream rng = ctx.stream(Block::Dispersion, static_cast<std::uint64_t>(d) * groups + g);
      const double x = std::log(s.dispersion(g, d));
      double gx = 0.0;
      const double lx = eval(x, gx);
      const double step = s.barker_step(g, d);
      const double w = step * rng.normal();
      const double y = rng.uniform() < expit(w * gx) ? x + w : x - w;
      double gy = 0.0;
      const double ly = eval(y, gy);
      double log_alpha = ly - lx + log1pexp(-(y - x) * gx) - log1pexp(-(x - y) * gy);
      if (!std::isfinite(ly) || std::isnan(log_alpha)) log_alpha = -std::numeric_limits<double>::infinity();
      const double prob = log_alpha >= 0.0 ? 1.0 : std::exp(log_alpha);
      const bool accepted = std::log(rng.uniform()) < log_alpha;
      if (accepted) s.dispersion(g, d) = std::exp(y);
      if (ctx.adapt) s.barker_step(g, d) = adapt_step(step, prob, cfg.barker_target, ctx.iteration);
      if (ctx.stats) ctx.stats->dispersion.add(accepted);
    }
  }
  if (data.D3 > 0) {
    RngStream rng = ctx.stream(Block::DispersionRate, 0);
    const double shape = cfg.a_xi + static_cast<double>(s.dispersion.size()) * cfg.a_xi;
    s.dispersion_rate = rng.gamma(shape, cfg.c_xi + s.dispersion.sum());
  }
}

void update_shrinkage(LatentState& s, const FitConfig& cfg, const SweepContext& ctx) {
  const auto& [a, b, c, d, e, f] = cfg.tpb_shapes;
  const int N = static_cast<int>(s.loadings.rows());
  const int J = s.J;
  for (int i = 0; i < N; ++i) {
    RngStream rng = ctx.stream(Block::Shrinkage, i);
    for (int j = 0; j < J; ++j) {
      const double lam = s.loadings(i, j);
      s.loading_var(i, j) = clamp_shrink(sample_gig(a - 0.5, 2.0 * s.loading_var_rate(i, j), lam * lam, rng));
      s.loading_var_rate(i, j) = rng.gamma(a + b, s.loading_var(i, j) + s.column_scale(j));
    }
  }
  RngStream rng = ctx.stream(Block::Shrinkage, static_cast<std::uint64_t>(N) + 1);
  for (int j = 0; j < J; ++j) {
    s.column_scale(j) = clamp_shrink(rng.gamma(c + N * b, s.column_scale_rate(j) + s.loading_var_rate.col(j).sum()));
    s.column_scale_rate(j) = rng.gamma(c + d, s.column_scale(j) + s.global_scale);
  }
  s.global_scale = clamp_shrink(rng.gamma(e + J * d, s.global_scale_rate + s.column_scale_rate.sum()));
  s.global_scale_rate = rng.gamma(e + f, s.global_scale + cfg.nu);
}

void update_M_and_v(LatentState& s, const PanelDataset& data, const SweepContext& ctx) {
  const int D = data.D();
  const int T = data.T;
  const double log_norm_const = -0.5 * T * std::log(2.0 * std::numbers::pi);
  std::vector<double> ss(D), unit(D), integrated(D), logm(D);
  for (int j = 0; j < s.J; ++j) {
    RngStream rng = ctx.stream(Block::FactorVar, j);
    double total = 0.0;
    for (int o = 0; o < D; ++o) {
      ss[o] = s.factors[o].col(j).squaredNorm();
      unit[o] = log_norm_const - 0.5 * ss[o];
      integrated[o] = D > 1 ? log_marginal_uniform_variance(ss[o], T) : 0.0;
      total += integrated[o];
    }
    int m = 0;
    if (D > 1) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int o = 0; o < D; ++o) {
        logm[o] = total - integrated[o] + unit[o];
        mx = std::max(mx, logm[o]);
      }
      double norm = 0.0;
      for (int o = 0; o < D; ++o) norm += std::exp(logm[o] - mx);
      double u = rng.uniform() * norm;
      m = D - 1;
      for (int o = 0; o < D; ++o) {
        u -= std::exp(logm[o] - mx);
        if (u <= 0.0) {
          m = o;
          break;
        }
      }
    }
    s.dominant_outcome[j] = m;
    for (int o = 0; o < D; ++o) {
      if (o == m) {
        s.factor_var(j, o) = 1.0;
        continue;
      }
      double v = 1.0;
      try {
        v = sample_truncated_inverse_gamma(0.5 * T - 1.0, std::max(0.5 * ss[o], 1e-300), 1.0, rng);
      } catch (const NumericalError&) {
        v = 1.0;
      }
      s.factor_var(j, o) = std::clamp(v, 1e-300, 1.0);
    }
  }
}

void gibbs_sweep(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx) {
  const std::int64_t it = ctx.iteration;
  if (cfg.mutation != SamplerMutation::StaleAugmentation) {
    run_block("update_omega", it, [&] { update_omega(s, data, cfg, ctx); });
  }
  run_block("update_L", it, [&] { update_L(s, data, ctx); });
  run_block("update_f", it, [&] { update_f(s, data, cfg, ctx); });
  run_block("update_g", it, [&] { update_g(s, data, cfg, ctx); });
  run_block("update_eta1", it, [&] { update_eta1(s, data, ctx); });
  run_block("update_eta2", it, [&] { update_eta2(s, data, ctx); });
  run_block("update_h", it, [&] { update_h(s, data, cfg, ctx); });
  run_block("update_eta3", it, [&] { update_eta3(s, data, cfg, ctx); });
  run_block("update_lambda", it, [&] { update_lambda(s, data, cfg, ctx); });
  run_block("update_sigma2", it, [&] { update_sigma2(s, data, cfg, ctx); });
  run_block("update_xi", it, [&] { update_xi(s, data, cfg, ctx); });
  run_block("update_shrinkage", it, [&] { update_shrinkage(s, cfg, ctx); });
  run_block("update_M_and_v", it, [&] { update_M_and_v(s, data, ctx); });
}

LatentState sample_prior_state(const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx) {
  LatentState s = make_state_shell(data, cfg);
  const auto& [a, b, c, d, e, f] = cfg.tpb_shapes;
  const int D = data.D();
  RngStream rng = ctx.stream(Block::Prior, 0);
  s.global_scale_rate = rng.gamma(f, cfg.nu);
  s.global_scale = clamp_shrink(rng.gamma(e, s.global_scale_rate));
  for (int j = 0; j < s.J; ++j) {
    s.column_scale_rate(j) = rng.gamma(d, s.global_scale);
    s.column_scale(j) = clamp_shrink(rng.gamma(c, s.column_scale_rate(j)));
  }
  for (int i = 0; i < data.N; ++i) {
    for (int j = 0; j < s.J; ++j) {
      s.loading_var_rate(i, j) = rng.gamma(b, s.column_scale(j));
      s.loading_var(i, j) = clamp_shrink(rng.gamma(a, s.loading_var_rate(i, j)));
      s.loadings(i, j) = std::sqrt(s.loading_var(i, j)) * rng.normal();
    }
  }
  for (int j = 0; j < s.J; ++j) {
    const int m = D > 0 ? static_cast<int>(rng.uniform() * D) : 0;
    s.dominant_outcome[j] = std::min(m, D - 1);
    for (int o = 0; o < D; ++o) s.factor_var(j, o) = o == s.dominant_outcome[j] ? 1.0 : rng.uniform();
  }
  for (int o = 0; o < D; ++o) {
    for (int t = 0; t < data.T; ++t) {
      for (int j = 0; j < s.J; ++j) s.factors[o](t, j) = std::sqrt(s.factor_var(j, o)) * rng.normal();
    }
    for (int p = 0; p < data.P; ++p) s.coef(o, p) = std::sqrt(kCoefPriorVar) * rng.normal();
  }
  for (int i = 0; i < data.N; ++i) {
    for (int dd = 0; dd < data.D1; ++dd) s.noise_var(i, dd) = kNoiseVarMax * rng.uniform();
  }
  s.dispersion_rate = rng.gamma(cfg.a_xi, cfg.c_xi);
  for (Eigen::Index k = 0; k < s.dispersion.size(); ++k) {
    s.dispersion.data()[k] = rng.gamma(cfg.a_xi, s.dispersion_rate);
  }
  return s;
}

void simulate_outcomes(const LatentState& s, PanelDataset& data, const SweepContext& ctx) {
  for (int i = 0; i < data.N; ++i) {
    RngStream rng = ctx.stream(Block::Data, i);
    for (int t = 0; t < data.last_untreated[i]; ++t) {
      for (int d = 0; d < data.D1; ++d) {
        if (std::isnan(data.y[d](i, t))) continue;
        const int o = data.outcome_index(Family::Normal, d);
        data.y[d](i, t) = predictor(s, data, o, i, t) + std::sqrt(s.noise_var(i, d)) * rng.normal();
      }
      for (int d = 0; d < data.D2; ++d) {
        const int o = data.outcome_index(Family::Binomial, d);
        data.k[d](i, t) = static_cast<int>(rng.binomial(data.n[d](i, t), expit(predictor(s, data, o, i, t))));
      }
      for (int d = 0; d < data.D3; ++d) {
        const double w = data.w[d](i, t);
        if (!(w > 0.0)) continue;
        const int o = data.outcome_index(Family::NegBin, d);
        const double mean = w * std::exp(predictor(s, data, o, i, t));
        if (!std::isfinite(mean) || mean > 1e7) throw NumericalError("simulated count mean overflow");
        data.z[d](i, t) = static_cast<int>(sample_negbin(std::max(mean, 1e-300), s.xi(i, d), rng));
      }
    }
  }
}

LatentState init_state(const PanelDataset& data, const FitConfig& cfg, std::uint64_t chain) {
  cfg.validate();
  data.validate();
  if (data.T < 3) throw ValidationError("fit requires at least 3 time points");
  for (int i = 0; i < data.N; ++i) {
    if (data.last_untreated[i] < 2) {
      throw ValidationError("unit " + data.unit_labels[i] + " has fewer than 2 pre-intervention times");
    }
  }
  LatentState s = make_state_shell(data, cfg);
  const int D = data.D();
  SweepContext ctx{cfg.seed, chain, -1, false, nullptr};
  RngStream rng = ctx.stream(Block::Init, 0);
  for (int i = 0; i < data.N; ++i) {
    for (int j = 0; j < s.J; ++j) s.loadings(i, j) = rng.normal();
  }
  for (int j = 0; j < s.J; ++j) {
    const int m = std::min(static_cast<int>(rng.uniform() * D), D - 1);
    s.dominant_outcome[j] = m;
    for (int o = 0; o < D; ++o) s.factor_var(j, o) = o == m ? 1.0 : 0.5;
  }
  for (int o = 0; o < D; ++o) {
    for (int t = 0; t < data.T; ++t) {
      for (int j = 0; j < s.J; ++j) s.factors[o](t, j) = std::sqrt(s.factor_var(j, o)) * rng.normal();
    }
  }
  for (int d = 0; d < data.D1; ++d) {
    for (int i = 0; i < data.N; ++i) {
      double sum = 0.0, sq = 0.0;
      int count = 0;
      for (int t = 0; t < data.last_untreated[i]; ++t) {
        const double y = data.y[d](i, t);
        if (std::isnan(y)) continue;
        sum += y;
        sq += y * y;
        ++count;
      }
      double var = 1.0;
      if (count >= 2) var = (sq - sum * sum / count) / (count - 1);
      s.noise_var(i, d) = std::clamp(var, 0.01, kNoiseVarMax);
    }
  }
  update_omega(s, data, cfg, ctx);
  update_L(s, data, ctx);
  return s;
}

StateSnapshot snapshot(const LatentState& s, double log_lik) {
  return StateSnapshot{s.loadings, s.factors, s.coef, s.noise_var, s.dispersion, s.factor_var,
                       s.dominant_outcome, log_lik};
}

namespace {

std::vector<int> canonical_order(const PanelDataset& data) {
  std::vector<int> order(data.N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return data.unit_labels[a] < data.unit_labels[b]; });
  return order;
}

void restore_unit_order(StateSnapshot& snap, const std::vector<int>& order, bool pooled) {
  auto restore = [&](Eigen::MatrixXd& m) {
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (std::size_t r = 0; r < order.size(); ++r) out.row(order[r]) = m.row(r);
    m = std::move(out);
  };
  restore(snap.loadings);
  restore(snap.noise_var);
  if (!pooled) restore(snap.dispersion);
}

}  // namespace

PosteriorDraws run_chain(const PanelDataset& data, const FitConfig& cfg, std::uint64_t chain,
                         const std::string& resume_from) {
  cfg.validate();
  data.validate();
  const std::vector<int> order = canonical_order(data);
  const PanelDataset canon = permute_units(data, order);

  LatentState s;
  PosteriorDraws out;
  std::int64_t start = 0;
  if (!resume_from.empty()) {
    Checkpoint cp = read_checkpoint(resume_from);
    if (cp.draws.seed != cfg.seed || cp.draws.chain != chain) {
      throw ValidationError("checkpoint was written for a different seed or chain");
    }
    s = std::move(cp.state);
    out = std::move(cp.draws);
    start = cp.next_iteration;
  } else {
    s = init_state(canon, cfg, chain);
  }
  out.config = cfg;
  out.seed = cfg.seed;
  out.chain = chain;
  out.pooled_dispersion = cfg.pooled_dispersion;
  out.retained.reserve(cfg.retained_draws());

  const std::int64_t burn = cfg.burn_in_iterations();
  for (std::int64_t it = start; it < cfg.iterations; ++it) {
    SweepContext ctx{cfg.seed, chain, it, it < burn, it >= burn ? &out.acceptance : nullptr};
    gibbs_sweep(s, canon, cfg, ctx);
    const std::int64_t done = it + 1;
    if (done % cfg.thin == 0 && done / cfg.thin > cfg.burn_in_draws) {
      out.retained.push_back(snapshot(s, log_likelihood(s, canon)));
    }
    if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
      write_checkpoint(cfg.checkpoint_path, Checkpoint{done, s, out});
    }
  }
  out.final_steps.loadings_mean = s.lambda_step.size() ? s.lambda_step.mean() : 0.0;
  out.final_steps.count_factor_mean = s.count_factor_step.size() ? s.count_factor_step.mean() : 0.0;
  out.final_steps.count_coef_mean = s.count_coef_step.size() ? s.count_coef_step.mean() : 0.0;
  out.final_steps.dispersion_mean = s.barker_step.size() ? s.barker_step.mean() : 0.0;
  for (auto& snap : out.retained) restore_unit_order(snap, order, cfg.pooled_dispersion);
  return out;
}

std::vector<PosteriorDraws> run_chains(const PanelDataset& data, const FitConfig& cfg, int threads) {
  std::vector<PosteriorDraws> results(cfg.chains);
  std::vector<std::exception_ptr> errors(cfg.chains);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int c = next++; c < cfg.chains; c = next++) {
      try {
        results[c] = run_chain(data, cfg, static_cast<std::uint64_t>(c));
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const int n_threads = std::clamp(threads, 1, cfg.chains);
  std::vector<std::thread> pool;
  for (int k = 1; k < n_threads; ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

PosteriorDraws pool_chains(const std::vector<PosteriorDraws>& chains) {
  if (chains.empty()) throw ValidationError("pool_chains: no chains");
  PosteriorDraws out = chains.front();
  for (std::size_t c = 1; c < chains.size(); ++c) {
    out.retained.insert(out.retained.end(), chains[c].retained.begin(), chains[c].retained.end());
    auto add = [](BlockStats& a, const BlockStats& b) {
      a.attempts += b.attempts;
      a.accepts += b.accepts;
    };
    add(out.acceptance.loadings, chains[c].acceptance.loadings);
    add(out.acceptance.count_factor, chains[c].acceptance.count_factor);
    add(out.acceptance.count_coef, chains[c].acceptance.count_coef);
    add(out.acceptance.noise_var, chains[c].acceptance.noise_var);
    add(out.acceptance.dispersion, chains[c].acceptance.dispersion);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint serialisation. Little-endian host layout; see docs/formats.md.

namespace {

constexpr char kMagic[5] = {'C', 'M', 'F', 'A', '1'};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void pod(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  template <typename M>
  void matrix(const M& m) {
    pod<std::int64_t>(m.rows());
    pod<std::int64_t>(m.cols());
    os_.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(typename M::Scalar) * m.size()));
  }
  template <typename M>
  void matrices(const std::vector<M>& v) {
    pod<std::int64_t>(static_cast<std::int64_t>(v.size()));
    for (const auto& m : v) matrix(m);
  }
  void ints(const std::vector<int>& v) {
    pod<std::int64_t>(static_cast<std::int64_t>(v.size()));
    for (int x : v) pod<std::int32_t>(x);
  }
  void stats(const BlockStats& b) {
    pod(b.attempts);
    pod(b.accepts);
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) throw ValidationError("checkpoint: truncated file");
    return v;
  }
  template <typename M>
  M matrix() {
    const auto rows = pod<std::int64_t>();
    const auto cols = pod<std::int64_t>();
    if (rows < 0 || cols < 0 || rows * cols > (1LL << 31)) throw ValidationError("checkpoint: bad matrix shape");
    M m(rows, cols);
    is_.read(reinterpret_cast<char*>(m.data()),
             static_cast<std::streamsize>(sizeof(typename M::Scalar) * m.size()));
    if (!is_) throw ValidationError("checkpoint: truncated file");
    return m;
  }
  template <typename M>
  std::vector<M> matrices() {
    const auto n = pod<std::int64_t>();
    std::vector<M> v;
    for (std::int64_t k = 0; k < n; ++k) v.push_back(matrix<M>());
    return v;
  }
  std::vector<int> ints() {
    const auto n = pod<std::int64_t>();
    std::vector<int> v;
    for (std::int64_t k = 0; k < n; ++k) v.push_back(pod<std::int32_t>());
    return v;
  }
  BlockStats stats() {
    BlockStats b;
    b.attempts = pod<std::int64_t>();
    b.accepts = pod<std::int64_t>();
    return b;
  }

 private:
  std::istream& is_;
};

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& cp) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ValidationError("cannot write checkpoint " + tmp);
    os.write(kMagic, sizeof(kMagic));
    Writer w(os);
    const LatentState& s = cp.state;
    w.pod<std::int64_t>(cp.next_iteration);
    w.pod<std::uint64_t>(cp.draws.seed);
    w.pod<std::uint64_t>(cp.draws.chain);
    w.pod<std::int32_t>(s.J);
    w.pod<std::int32_t>(s.pooled_dispersion ? 1 : 0);
    w.matrix(s.loadings);
    w.matrices(s.factors);
    w.matrix(s.coef);
    w.matrix(s.noise_var);
    w.matrix(s.dispersion);
    w.pod(s.dispersion_rate);
    w.matrix(s.loading_var);
    w.matrix(s.loading_var_rate);
    w.matrix(s.column_scale);
    w.matrix(s.column_scale_rate);
    w.pod(s.global_scale);
    w.pod(s.global_scale_rate);
    w.matrix(s.factor_var);
    w.ints(s.dominant_outcome);
    w.matrices(s.pg_aux);
    w.matrices(s.crt_aux);
    w.matrix(s.lambda_step);
    w.matrix(s.count_factor_step);
    w.matrix(s.count_coef_step);
    w.matrix(s.barker_step);
    const AcceptanceStats& a = cp.draws.acceptance;
    w.stats(a.loadings);
    w.stats(a.count_factor);
    w.stats(a.count_coef);
    w.stats(a.noise_var);
    w.stats(a.dispersion);
    w.pod<std::int64_t>(static_cast<std::int64_t>(cp.draws.retained.size()));
    for (const auto& snap : cp.draws.retained) {
      w.matrix(snap.loadings);
      w.matrices(snap.factors);
      w.matrix(snap.coef);
      w.matrix(snap.noise_var);
      w.matrix(snap.dispersion);
      w.matrix(snap.factor_var);
      w.ints(snap.dominant_outcome);
      w.pod(snap.log_lik);
    }
    if (!os) throw ValidationError("failed writing checkpoint " + tmp);
  }
  std::rename(tmp.c_str(), path.c_str());
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint " + path);
  char magic[5];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 5, kMagic)) throw ValidationError(path + ": not a CMFA1 checkpoint");
  Reader r(is);
  Checkpoint cp;
  LatentState& s = cp.state;
  cp.next_iteration = r.pod<std::int64_t>();
  cp.draws.seed = r.pod<std::uint64_t>();
  cp.draws.chain = r.pod<std::uint64_t>();
  s.J = r.pod<std::int32_t>();
  s.pooled_dispersion = r.pod<std::int32_t>() != 0;
  cp.draws.pooled_dispersion = s.pooled_dispersion;
  s.loadings = r.matrix<Eigen::MatrixXd>();
  s.factors = r.matrices<Eigen::MatrixXd>();
  s.coef = r.matrix<Eigen::MatrixXd>();
  s.noise_var = r.matrix<Eigen::MatrixXd>();
  s.dispersion = r.matrix<Eigen::MatrixXd>();
  s.dispersion_rate = r.pod<double>();
  s.loading_var = r.matrix<Eigen::MatrixXd>();
  s.loading_var_rate = r.matrix<Eigen::MatrixXd>();
  s.column_scale = r.matrix<Eigen::VectorXd>();
  s.column_scale_rate = r.matrix<Eigen::VectorXd>();
  s.global_scale = r.pod<double>();
  s.global_scale_rate = r.pod<double>();
  s.factor_var = r.matrix<Eigen::MatrixXd>();
  s.dominant_outcome = r.ints();
  s.pg_aux = r.matrices<Eigen::MatrixXd>();
  s.crt_aux = r.matrices<Eigen::MatrixXi>();
  s.lambda_step = r.matrix<Eigen::VectorXd>();
  s.count_factor_step = r.matrix<Eigen::MatrixXd>();
  s.count_coef_step = r.matrix<Eigen::VectorXd>();
  s.barker_step = r.matrix<Eigen::MatrixXd>();
  AcceptanceStats& a = cp.draws.acceptance;
  a.loadings = r.stats();
  a.count_factor = r.stats();
  a.count_coef = r.stats();
  a.noise_var = r.stats();
  a.dispersion = r.stats();
  const auto n = r.pod<std::int64_t>();
  for (std::int64_t k = 0; k < n; ++k) {
    StateSnapshot snap;
    snap.loadings = r.matrix<Eigen::MatrixXd>();
    snap.factors = r.matrices<Eigen::MatrixXd>();
    snap.coef = r.matrix<Eigen::MatrixXd>();
    snap.noise_var = r.matrix<Eigen::MatrixXd>();
    snap.dispersion = r.matrix<Eigen::MatrixXd>();
    snap.factor_var = r.matrix<Eigen::MatrixXd>();
    snap.dominant_outcome = r.ints();
    snap.log_lik = r.pod<double>();
    cp.draws.retained.push_back(std::move(snap));
  }
  return cp;
}

}  // namespace cmfa
