#include "cmfa/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>

#include <boost/math/special_functions/digamma.hpp>

#include "cmfa/distributions.hpp"
#include "cmfa/error.hpp"

namespace cmfa {

namespace {

double covariate_term(const LatentState& s, const PanelDataset& data, int outcome, int i, int t) {
  if (data.P == 0) return 0.0;
  return s.coef.row(outcome).dot(data.x[i].row(t));
}

void check_indices(const PanelDataset& data, Family family, int i, int t, int d) {
  const int count = family == Family::Normal ? data.D1 : family == Family::Binomial ? data.D2 : data.D3;
  if (i < 0 || i >= data.N || t < 0 || t >= data.T || d < 0 || d >= count) {
    throw ValidationError("index out of range: (" + std::to_string(i) + ", " + std::to_string(t) +
                          ", " + std::to_string(d) + ") for family " + family_name(family));
  }
}

}  // namespace

double linear_predictor(const LatentState& s, const PanelDataset& data, Family family, int i,
                        int t, int d) {
  check_indices(data, family, i, t, d);
  const int o = data.outcome_index(family, d);
  return s.loadings.row(i).dot(s.factors[o].row(t)) + covariate_term(s, data, o, i, t);
}

bool cell_observed(const PanelDataset& data, Family family, int i, int t, int d) {
  if (t >= data.last_untreated[i]) return false;
  switch (family) {
    case Family::Normal: return !std::isnan(data.y[d](i, t));
    case Family::Binomial: return data.n[d](i, t) > 0;
    case Family::NegBin: return data.w[d](i, t) > 0.0;
  }
  return false;
}

double log_likelihood_cell(const LatentState& s, const PanelDataset& data, Family family, int i,
                           int t, int d) {
  if (!cell_observed(data, family, i, t, d)) return 0.0;
  const double psi = linear_predictor(s, data, family, i, t, d);
  double value = 0.0;
  switch (family) {
    case Family::Normal: {
      const double var = s.noise_var(i, d);
      const double r = data.y[d](i, t) - psi;
      value = -0.5 * (std::log(2.0 * std::numbers::pi * var) + r * r / var);
      break;
    }
    case Family::Binomial:
      value = binomial_log_pmf(data.k[d](i, t), data.n[d](i, t), psi);
      break;
    case Family::NegBin:
      value = negbin_log_pmf(data.z[d](i, t), data.w[d](i, t) * std::exp(psi), s.xi(i, d));
      break;
  }
  if (!std::isfinite(value)) {
    throw NumericalError(std::string("non-finite likelihood at (unit ") + std::to_string(i) +
                         ", time " + std::to_string(t + 1) + ", " + family_name(family) +
                         " outcome " + std::to_string(d) + ")");
  }
  return value;
}

double log_likelihood(const LatentState& s, const PanelDataset& data, Family family) {
  const int count = family == Family::Normal ? data.D1 : family == Family::Binomial ? data.D2 : data.D3;
  double total = 0.0;
  for (int d = 0; d < count; ++d) {
    for (int i = 0; i < data.N; ++i) {
      for (int t = 0; t < data.last_untreated[i]; ++t) {
        total += log_likelihood_cell(s, data, family, i, t, d);
      }
    }
  }
  return total;
}

double log_likelihood(const LatentState& s, const PanelDataset& data) {
  return log_likelihood(s, data, Family::Normal) + log_likelihood(s, data, Family::Binomial) +
         log_likelihood(s, data, Family::NegBin);
}

PoissonGaussianTarget::PoissonGaussianTarget(Eigen::MatrixXd quad, Eigen::VectorXd lin,
                                             Eigen::MatrixXd design, Eigen::VectorXd base_rate,
                                             Eigen::VectorXd counts)
    : quad_(std::move(quad)),
      lin_(std::move(lin)),
      design_(std::move(design)),
      base_rate_(std::move(base_rate)),
      counts_(std::move(counts)) {}

double PoissonGaussianTarget::log_density(const Eigen::VectorXd& x) const {
  double value = -0.5 * x.dot(quad_ * x) + lin_.dot(x);
  if (design_.rows() > 0) {
    const Eigen::VectorXd eta = design_ * x;
    value += counts_.dot(eta) - base_rate_.dot(eta.array().exp().matrix());
  }
  return std::isfinite(value) ? value : -std::numeric_limits<double>::infinity();
}

double PoissonGaussianTarget::evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& grad,
                                       Eigen::MatrixXd& neg_hess) const {
  const Eigen::VectorXd qx = quad_ * x;
  double value = -0.5 * x.dot(qx) + lin_.dot(x);
  grad = lin_ - qx;
  neg_hess = quad_;
  if (design_.rows() > 0) {
    const Eigen::VectorXd eta = design_ * x;
    const Eigen::VectorXd rate = base_rate_.cwiseProduct(eta.array().exp().matrix());
    value += counts_.dot(eta) - rate.sum();
    grad.noalias() += design_.transpose() * (counts_ - rate);
    neg_hess.noalias() += design_.transpose() * rate.asDiagonal() * design_;
  }
  if (!std::isfinite(value) || !grad.allFinite() || !neg_hess.allFinite()) {
    return -std::numeric_limits<double>::infinity();
  }
  return value;
}

GradHess PoissonGaussianTarget::grad_hess(const Eigen::VectorXd& x) const {
  GradHess out;
  evaluate(x, out.grad, out.neg_hess);
  return out;
}

PoissonGaussianTarget lambda_conditional(const LatentState& s, const PanelDataset& data, int i,
                                         bool include_prior) {
  const int J = s.J;
  const int Ti = data.last_untreated[i];

  // Stack Gaussian rows (normal outcomes and PG pseudo-observations) scaled
  // by their square-root precision so that Q = A'A and b = A'r.
  int gauss_rows = 0;
  for (int d = 0; d < data.D1; ++d) {
    for (int t = 0; t < Ti; ++t) gauss_rows += !std::isnan(data.y[d](i, t));
  }
  for (int d = 0; d < data.D2; ++d) {
    for (int t = 0; t < Ti; ++t) gauss_rows += data.n[d](i, t) > 0;
  }
  Eigen::MatrixXd A(gauss_rows, J);
  Eigen::VectorXd r(gauss_rows);
  int row = 0;
  for (int d = 0; d < data.D1; ++d) {
    const int o = data.outcome_index(Family::Normal, d);
    const double inv_sd = 1.0 / std::sqrt(s.noise_var(i, d));
    for (int t = 0; t < Ti; ++t) {
      const double y = data.y[d](i, t);
      if (std::isnan(y)) continue;
      A.row(row) = s.factors[o].row(t) * inv_sd;
      r(row) = (y - covariate_term(s, data, o, i, t)) * inv_sd;
      ++row;
    }
  }
  for (int d = 0; d < data.D2; ++d) {
    const int o = data.outcome_index(Family::Binomial, d);
    for (int t = 0; t < Ti; ++t) {
      const int n = data.n[d](i, t);
      if (n == 0) continue;
      const double om = s.pg_aux[d](i, t);
      const double kappa = data.k[d](i, t) - 0.5 * n;
      const double sq = std::sqrt(om);
      A.row(row) = s.factors[o].row(t) * sq;
      // omega * (kappa/omega - eta'x) scaled by 1/sqrt(omega).
      r(row) = (kappa - om * covariate_term(s, data, o, i, t)) / sq;
      ++row;
    }
  }

  Eigen::MatrixXd quad = Eigen::MatrixXd::Zero(J, J);
  quad.selfadjointView<Eigen::Lower>().rankUpdate(A.transpose());
  quad.triangularView<Eigen::StrictlyUpper>() = quad.transpose();
  Eigen::VectorXd lin = A.transpose() * r;
  if (include_prior) quad.diagonal().array() += s.loading_var.row(i).transpose().array().inverse();

  int count_rows = 0;
  for (int d = 0; d < data.D3; ++d) {
    for (int t = 0; t < Ti; ++t) count_rows += data.w[d](i, t) > 0.0;
  }
  Eigen::MatrixXd design(count_rows, J);
  Eigen::VectorXd base(count_rows);
  Eigen::VectorXd counts(count_rows);
  row = 0;
  for (int d = 0; d < data.D3; ++d) {
    const int o = data.outcome_index(Family::NegBin, d);
    const double xi = s.xi(i, d);
    const double scale = std::log1p(xi) / xi;
    for (int t = 0; t < Ti; ++t) {
      const double w = data.w[d](i, t);
      if (!(w > 0.0)) continue;
      design.row(row) = s.factors[o].row(t);
      base(row) = w * scale * std::exp(covariate_term(s, data, o, i, t));
      counts(row) = s.crt_aux[d](i, t);
      ++row;
    }
  }
  return {std::move(quad), std::move(lin), std::move(design), std::move(base), std::move(counts)};
}

PoissonGaussianTarget count_factor_conditional(const LatentState& s, const PanelDataset& data,
                                               int t, int d) {
  const int J = s.J;
  const int o = data.outcome_index(Family::NegBin, d);
  int rows = 0;
  for (int i = 0; i < data.N; ++i) rows += cell_observed(data, Family::NegBin, i, t, d);
  Eigen::MatrixXd design(rows, J);
  Eigen::VectorXd base(rows);
  Eigen::VectorXd counts(rows);
  int row = 0;
  for (int i = 0; i < data.N; ++i) {
    if (!cell_observed(data, Family::NegBin, i, t, d)) continue;
    const double xi = s.xi(i, d);
    design.row(row) = s.loadings.row(i);
    base(row) = data.w[d](i, t) * std::log1p(xi) / xi * std::exp(covariate_term(s, data, o, i, t));
    counts(row) = s.crt_aux[d](i, t);
    ++row;
  }
  Eigen::MatrixXd quad = Eigen::MatrixXd::Zero(J, J);
  quad.diagonal() = s.factor_var.col(o).array().inverse().matrix();
  return {std::move(quad), Eigen::VectorXd::Zero(J), std::move(design), std::move(base),
          std::move(counts)};
}

PoissonGaussianTarget count_coef_conditional(const LatentState& s, const PanelDataset& data, int d) {
  const int P = data.P;
  const int o = data.outcome_index(Family::NegBin, d);
  int rows = 0;
  for (int i = 0; i < data.N; ++i) {
    for (int t = 0; t < data.last_untreated[i]; ++t) rows += data.w[d](i, t) > 0.0;
  }
  Eigen::MatrixXd design(rows, P);
  Eigen::VectorXd base(rows);
  Eigen::VectorXd counts(rows);
  int row = 0;
  for (int i = 0; i < data.N; ++i) {
    const double xi = s.xi(i, d);
    const double scale = std::log1p(xi) / xi;
    for (int t = 0; t < data.last_untreated[i]; ++t) {
      const double w = data.w[d](i, t);
      if (!(w > 0.0)) continue;
      design.row(row) = data.x[i].row(t);
      base(row) = w * scale * std::exp(s.loadings.row(i).dot(s.factors[o].row(t)));
      counts(row) = s.crt_aux[d](i, t);
      ++row;
    }
  }
  Eigen::MatrixXd quad = Eigen::MatrixXd::Identity(P, P) / kCoefPriorVar;
  return {std::move(quad), Eigen::VectorXd::Zero(P), std::move(design), std::move(base),
          std::move(counts)};
}

GradHess grad_hess_lambda(const LatentState& s, const PanelDataset& data, int i) {
  return lambda_conditional(s, data, i).grad_hess(s.loadings.row(i).transpose());
}

GradHess grad_hess_h(const LatentState& s, const PanelDataset& data, int t, int d) {
  const int o = data.outcome_index(Family::NegBin, d);
  return count_factor_conditional(s, data, t, d).grad_hess(s.factors[o].row(t).transpose());
}

GradHess grad_hess_eta3(const LatentState& s, const PanelDataset& data, int d) {
  const int o = data.outcome_index(Family::NegBin, d);
  return count_coef_conditional(s, data, d).grad_hess(s.coef.row(o).transpose());
}

double negbin_dlogpmf_dxi(double z, double mean, double xi) {
  const double a = mean / xi;
  const double digamma_gap = z > 0 ? boost::math::digamma(z + a) - boost::math::digamma(a) : 0.0;
  return (a / xi) * (std::log1p(xi) - digamma_gap) - a / (1.0 + xi) + z / (xi * (1.0 + xi));
}

}  // namespace cmfa
