#include "cmfa/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <boost/math/special_functions/gamma.hpp>

#include "cmfa/error.hpp"

namespace cmfa {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kPi2 = kPi * kPi;
// Switch point between the left (inverse Gaussian) and right (exponential)
// pieces of the J*(1, z) proposal.
constexpr double kTrunc = 2.0 / kPi;

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Coefficients of the alternating series for the J*(1, 0) density.
double pg_series_term(int n, double x) {
  const double k = n + 0.5;
  if (x <= kTrunc) {
    return std::exp(std::log(kPi * k) + 1.5 * std::log(2.0 / (kPi * x)) - 2.0 * k * k / x);
  }
  return kPi * k * std::exp(-k * k * kPi2 * x / 2.0);
}

// Inverse Gaussian IG(mu, 1) via Michael, Schucany & Haas.
double sample_inverse_gaussian(double mu, RngStream& rng) {
  const double n = rng.normal();
  const double y = n * n;
  double x = mu + 0.5 * mu * mu * y - 0.5 * mu * std::sqrt(4.0 * mu * y + mu * mu * y * y);
  if (rng.uniform() > mu / (mu + x)) x = mu * mu / x;
  return x;
}

// IG(1/z, 1) truncated to (0, kTrunc).
double sample_truncated_ig(double z, RngStream& rng) {
  const double mu = (z > 0) ? 1.0 / z : std::numeric_limits<double>::infinity();
  if (mu > kTrunc) {
    // 1/X is Gamma(1/2, rate 1/2) truncated to (1/kTrunc, inf); propose from a
    // shifted exponential and then apply the exp(-z^2 x / 2) tilt.
    for (;;) {
      double y;
      do {
        y = 1.0 / kTrunc + 2.0 * rng.exponential(1.0);
      } while (rng.uniform() > std::sqrt(1.0 / (kTrunc * y)));
      const double x = 1.0 / y;
      if (std::log(rng.uniform()) < -0.5 * z * z * x) return x;
    }
  }
  double x = kTrunc + 1.0;
  while (x >= kTrunc) x = sample_inverse_gaussian(mu, rng);
  return x;
}

// PG(1, c) = J*(1, |c|/2) / 4.
double sample_pg1(double c, RngStream& rng) {
  const double z = std::abs(c) * 0.5;
  const double k = kPi2 / 8.0 + z * z / 2.0;
  const double p = kPi / (2.0 * k) * std::exp(-k * kTrunc);
  const double rt = std::sqrt(kTrunc);
  double q = 2.0 * std::exp(-z) * std_normal_cdf((kTrunc * z - 1.0) / rt);
  const double tail = std_normal_cdf(-(kTrunc * z + 1.0) / rt);
  if (tail > 0) q += 2.0 * std::exp(z + std::log(tail));
  const double left_weight = p / (p + q);

  for (;;) {
    double x;
    if (rng.uniform() < left_weight) {
      x = kTrunc + rng.exponential(1.0) / k;
    } else {
      x = sample_truncated_ig(z, rng);
    }
    double s = pg_series_term(0, x);
    const double y = rng.uniform() * s;
    for (int n = 1;; ++n) {
      if (n % 2 == 1) {
        s -= pg_series_term(n, x);
        if (y <= s) return 0.25 * x;
      } else {
        s += pg_series_term(n, x);
        if (y > s) break;
      }
    }
  }
}

}  // namespace

double polya_gamma_mean(double b, double c) {
  c = std::abs(c);
  if (c < 1e-4) return b * (0.25 - c * c / 48.0);
  return b / (2.0 * c) * std::tanh(c / 2.0);
}

double polya_gamma_variance(double b, double c) {
  c = std::abs(c);
  if (c < 1e-2) return b * (1.0 / 24.0 - c * c / 120.0 + 17.0 * c * c * c * c / 13440.0);
  // (sinh c - c) / cosh^2(c/2) rewritten to stay finite for large c.
  const double ch = std::cosh(c / 2.0);
  return b * (2.0 * std::tanh(c / 2.0) - c / (ch * ch)) / (4.0 * c * c * c);
}

double sample_polya_gamma(std::int64_t b, double c, RngStream& rng, std::int64_t exact_max) {
  if (b < 0) throw ValidationError("sample_polya_gamma: negative count " + std::to_string(b));
  if (b == 0) return 0.0;
  if (b > exact_max) {
    const double m = polya_gamma_mean(static_cast<double>(b), c);
    const double sd = std::sqrt(polya_gamma_variance(static_cast<double>(b), c));
    return std::max(m + sd * rng.normal(), 1e-12 * m);
  }
  double sum = 0.0;
  for (std::int64_t l = 0; l < b; ++l) sum += sample_pg1(c, rng);
  return sum;
}

std::int64_t sample_crt(std::int64_t z, double r, RngStream& rng) {
  if (!(r > 0.0) || !std::isfinite(r)) {
    throw ValidationError("sample_crt: concentration must be positive and finite, got " +
                          std::to_string(r));
  }
  if (z < 0) throw ValidationError("sample_crt: negative count");
  if (z > kCrtMaxCount) {
    throw ValidationError("sample_crt: count " + std::to_string(z) + " exceeds supported maximum");
  }
  std::int64_t tables = 0;
  for (std::int64_t l = 1; l <= z; ++l) {
    if (rng.uniform() < r / (r + static_cast<double>(l - 1))) ++tables;
  }
  return tables;
}

double tpb_log_density(double x, const TpbParams& p) {
  if (!(x > 0.0 && x < 1.0)) {
    throw ValidationError("tpb_log_density: x must lie in (0,1), got " + std::to_string(x));
  }
  if (!(p.a > 0 && p.b > 0 && p.c > 0)) throw ValidationError("tpb_log_density: invalid parameters");
  return std::lgamma(p.a + p.b) - std::lgamma(p.a) - std::lgamma(p.b) + p.b * std::log(p.c) +
         (p.b - 1.0) * std::log(x) + (p.a - 1.0) * std::log1p(-x) -
         (p.a + p.b) * std::log1p((p.c - 1.0) * x);
}

double sample_tpb(const TpbParams& p, RngStream& rng) {
  const double ga = rng.gamma(p.a, 1.0);
  const double gb = rng.gamma(p.b, 1.0);
  return 1.0 / (1.0 + p.c * ga / gb);
}

std::int64_t sample_negbin(double mean, double xi, RngStream& rng) {
  if (!(mean > 0.0) || !(xi > 0.0)) {
    throw ValidationError("sample_negbin: mean and dispersion must be positive");
  }
  const double rate = rng.gamma(mean / xi, 1.0 / xi);
  return rng.poisson(rate);
}

double negbin_log_pmf(std::int64_t z, double mean, double xi) {
  const double size = mean / xi;
  const double zd = static_cast<double>(z);
  return std::lgamma(zd + size) - std::lgamma(size) - std::lgamma(zd + 1.0) -
         size * std::log1p(xi) + zd * (std::log(xi) - std::log1p(xi));
}

double binomial_log_pmf(std::int64_t k, std::int64_t n, double logit_p) {
  const double kd = static_cast<double>(k);
  const double nd = static_cast<double>(n);
  return std::lgamma(nd + 1.0) - std::lgamma(kd + 1.0) - std::lgamma(nd - kd + 1.0) +
         kd * logit_p - nd * log1pexp(logit_p);
}

double inverse_gamma_cdf(double x, double shape, double scale) {
  if (x <= 0.0) return 0.0;
  return boost::math::gamma_q(shape, scale / x);
}

double log_gamma_q(double a, double x) {
  const double q = boost::math::gamma_q(a, x);
  if (q > 1e-280 || x < a + 1.0) return std::log(q);
  // Continued fraction for Gamma(a, x) e^x x^-a (modified Lentz).
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int n = 1; n < 1000; ++n) {
    const double an = -n * (n - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-15) break;
  }
  return -x + a * std::log(x) - std::lgamma(a) + std::log(h);
}

double sample_truncated_inverse_gamma(double shape, double scale, double upper, RngStream& rng) {
  if (!(shape > 0.0) || !(scale > 0.0)) {
    throw ValidationError("sample_truncated_inverse_gamma: shape and scale must be positive");
  }
  if (!(upper > 0.0 && upper <= 1.0)) {
    throw ValidationError("sample_truncated_inverse_gamma: upper bound must be in (0,1]");
  }
  const double mass = boost::math::gamma_q(shape, scale / upper);
  if (!(mass >= 1e-300)) {
    throw NumericalError("sample_truncated_inverse_gamma: truncation region mass underflow");
  }
  const double target = rng.uniform() * mass;
  const double y = boost::math::gamma_q_inv(shape, target);
  return std::min(scale / y, upper);
}

double sample_gig(double p, double a, double b, RngStream& rng) {
  if (!(a >= 0.0) || !(b >= 0.0)) throw ValidationError("sample_gig: negative parameter");
  // Limiting gamma / inverse-gamma cases.
  if (b < 1e-300 && p > 0.0) return rng.gamma(p, a / 2.0);
  if (a < 1e-300 && p < 0.0) return 1.0 / rng.gamma(-p, b / 2.0);
  a = std::max(a, 1e-300);
  b = std::max(b, 1e-300);

  const double abs_p = std::abs(p);
  const double omega = std::sqrt(a * b);
  const double alpha = std::sqrt(omega * omega + abs_p * abs_p) - abs_p;

  auto psi = [&](double x) {
    return -alpha * (std::cosh(x) - 1.0) - abs_p * (std::exp(x) - x - 1.0);
  };
  auto psi_deriv = [&](double x) { return -alpha * std::sinh(x) - abs_p * (std::exp(x) - 1.0); };

  double t = 1.0;
  double lc = -psi(1.0);
  if (lc > 2.0) {
    t = std::sqrt(2.0 / (alpha + abs_p));
  } else if (lc < 0.5) {
    t = std::log(4.0 / (alpha + 2.0 * abs_p));
  }
  double s = 1.0;
  lc = -psi(-1.0);
  if (lc > 2.0) {
    s = std::sqrt(4.0 / (alpha * std::cosh(1.0) + abs_p));
  } else if (lc < 0.5) {
    const double inv_p = abs_p > 0 ? 1.0 / abs_p : std::numeric_limits<double>::infinity();
    s = std::min(inv_p, std::log(1.0 + 1.0 / alpha + std::sqrt(1.0 / (alpha * alpha) + 2.0 / alpha)));
  }

  const double eta = -psi(t);
  const double zeta = -psi_deriv(t);
  const double theta = -psi(-s);
  const double xi = psi_deriv(-s);
  const double pp = 1.0 / xi;
  const double r = 1.0 / zeta;
  const double t_d = t - r * eta;
  const double s_d = s - pp * theta;
  const double q = t_d + s_d;

  auto chi = [&](double x) {
    if (x >= -s_d && x <= t_d) return 1.0;
    if (x > t_d) return std::exp(-eta - zeta * (x - t));
    return std::exp(-theta + xi * (x + s));
  };

  double cand;
  for (;;) {
    const double u = rng.uniform();
    const double v = rng.uniform();
    const double w = rng.uniform();
    if (u < q / (pp + q + r)) {
      cand = -s_d + q * v;
    } else if (u < (q + r) / (pp + q + r)) {
      cand = t_d - r * std::log(v);
    } else {
      cand = -s_d + pp * std::log(v);
    }
    if (w * chi(cand) <= std::exp(psi(cand))) break;
  }
  const double ratio = abs_p / omega;
  const double x = (ratio + std::sqrt(1.0 + ratio * ratio)) * std::exp(cand);
  const double scale = std::sqrt(b / a);
  return p > 0 ? x * scale : scale / x;
}

}  // namespace cmfa
