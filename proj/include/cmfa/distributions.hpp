#pragma once

#include <cstdint>

#include "cmfa/rng.hpp"

namespace cmfa {

/// Trial counts above this use the moment-matched Gaussian instead of a sum
/// of exact PG(1, c) draws.
inline constexpr std::int64_t kPolyaGammaExactMax = 30;

/// Largest count accepted by the CRT Bernoulli loop.
inline constexpr std::int64_t kCrtMaxCount = 1'000'000;

/// Draw from the Polya-Gamma distribution PG(b, c).
///
/// Exact (Devroye / Windle alternating-series sampler) for b <= exact_max,
/// Gaussian with exact PG mean and variance above it. PG(0, c) is a point
/// mass at zero.
double sample_polya_gamma(std::int64_t b, double c, RngStream& rng,
                          std::int64_t exact_max = kPolyaGammaExactMax);

double polya_gamma_mean(double b, double c);
double polya_gamma_variance(double b, double c);

/// Chinese-restaurant-table count: sum over l = 1..z of Bernoulli(r / (r + l - 1)).
std::int64_t sample_crt(std::int64_t z, double r, RngStream& rng);

struct TpbParams {
  double a = 0.5;
  double b = 0.5;
  double c = 1.0;
};

// Three-parameter beta log-density on (0, 1).
double tpb_log_density(double x, const TpbParams& p);

// Direct TPB draw via x = 1 / (1 + c * G_a / G_b).
double sample_tpb(const TpbParams& p, RngStream& rng);

/// Negative binomial with the given mean and overdispersion xi, so that the
/// variance is mean * (1 + xi). Equivalent to NegBin(mean / xi, 1 / (1 + xi)).
std::int64_t sample_negbin(double mean, double xi, RngStream& rng);
double negbin_log_pmf(std::int64_t z, double mean, double xi);

double binomial_log_pmf(std::int64_t k, std::int64_t n, double logit_p);

/// Inverse-gamma(shape, scale) restricted to (0, upper]. Throws
/// NumericalError when the region carries less than 1e-300 of the mass.
double sample_truncated_inverse_gamma(double shape, double scale, double upper,
                                      RngStream& rng);

// P(X <= x) for X ~ inverse-gamma(shape, scale).
double inverse_gamma_cdf(double x, double shape, double scale);

/// log of the regularized upper incomplete gamma Q(a, x), accurate where
/// Q itself underflows.
double log_gamma_q(double a, double x);

/// Generalized inverse Gaussian with density proportional to
/// x^(p-1) exp(-(a x + b / x) / 2). Devroye's (2014) rejection sampler.
double sample_gig(double p, double a, double b, RngStream& rng);

inline double expit(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log(1 + exp(x)) without overflow.
inline double log1pexp(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace cmfa
