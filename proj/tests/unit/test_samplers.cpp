#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss.hpp>

#include "cmfa/distributions.hpp"
#include "cmfa/error.hpp"
#include "cmfa/samplers.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cmfa;
using namespace cmfa::testing;

namespace {

SweepContext ctx_at(std::int64_t it, std::uint64_t seed = 77) { return SweepContext{seed, 0, it, false, nullptr}; }

// Sample mean and variance of each coordinate against an analytic Gaussian.
void check_moments(const std::vector<Eigen::VectorXd>& draws, const Gaussian& g, double z = 4.0) {
  const int n = static_cast<int>(draws.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(g.mean.size());
  for (const auto& d : draws) mean += d;
  mean /= n;
  Eigen::VectorXd var = Eigen::VectorXd::Zero(g.mean.size());
  for (const auto& d : draws) var += (d - mean).cwiseAbs2();
  var /= n - 1;
  for (int k = 0; k < g.mean.size(); ++k) {
    const double sd = std::sqrt(g.cov(k, k));
    CHECK(std::abs(mean(k) - g.mean(k)) < z * sd / std::sqrt(n));
    CHECK(std::abs(var(k) - g.cov(k, k)) < z * g.cov(k, k) * std::sqrt(2.0 / n));
  }
}

FitConfig short_config() {
  FitConfig cfg;
  cfg.max_factors = 3;
  cfg.iterations = 200;
  cfg.thin = 10;
  cfg.burn_in_draws = 5;
  cfg.seed = 42;
  return cfg;
}

}  // namespace

TEST_CASE("normal factor: one unit, y = 4 gives N(2, 1/2)") {
  PanelDataset data = make_empty_panel(1, 3, 1, 0, 0);
  data.y[0] << 4.0, 4.0, 4.0;
  FitConfig cfg;
  cfg.max_factors = 1;
  LatentState s = make_state_shell(data, cfg);
  s.loadings(0, 0) = 1.0;
  s.noise_var(0, 0) = 1.0;
  s.factor_var(0, 0) = 1.0;
  const int n = 40000;
  double sum = 0.0, sq = 0.0;
  for (int it = 0; it < n; ++it) {
    update_f(s, data, cfg, ctx_at(it));
    sum += s.factors[0](1, 0);
    sq += s.factors[0](1, 0) * s.factors[0](1, 0);
  }
  const double mean = sum / n;
  CHECK(std::abs(mean - 2.0) < 4 * std::sqrt(0.5 / n));
  CHECK(std::abs(sq / n - mean * mean - 0.5) < 4 * 0.5 * std::sqrt(2.0 / n));
}

TEST_CASE("conjugate blocks reproduce their analytic conditionals") {
  auto fx = random_fixture(12, {.N = 6, .T = 5, .J = 2, .P = 2, .D1 = 1, .D2 = 1, .D3 = 0});
  const int n = 20000;
  const int t = 3;
  auto collect = [&](auto update, auto extract) {
    std::vector<Eigen::VectorXd> draws;
    LatentState s = fx.state;
    for (int it = 0; it < n; ++it) {
      update(s, ctx_at(it));
      draws.push_back(extract(s));
    }
    return draws;
  };
  const int o1 = fx.data.outcome_index(Family::Normal, 0);
  const int o2 = fx.data.outcome_index(Family::Binomial, 0);
  SUBCASE("f") {
    auto draws = collect([&](LatentState& s, const SweepContext& c) { update_f(s, fx.data, fx.cfg, c); },
                         [&](const LatentState& s) { return Eigen::VectorXd(s.factors[o1].row(t).transpose()); });
    check_moments(draws, normal_factor_oracle(fx.state, fx.data, t, 0));
  }
  SUBCASE("g") {
    auto draws = collect([&](LatentState& s, const SweepContext& c) { update_g(s, fx.data, fx.cfg, c); },
                         [&](const LatentState& s) { return Eigen::VectorXd(s.factors[o2].row(t).transpose()); });
    check_moments(draws, binomial_factor_oracle(fx.state, fx.data, t, 0));
  }
  SUBCASE("eta1") {
    auto draws = collect([&](LatentState& s, const SweepContext& c) { update_eta1(s, fx.data, c); },
                         [&](const LatentState& s) { return Eigen::VectorXd(s.coef.row(o1).transpose()); });
    check_moments(draws, normal_coef_oracle(fx.state, fx.data, 0));
  }
  SUBCASE("eta2") {
    auto draws = collect([&](LatentState& s, const SweepContext& c) { update_eta2(s, fx.data, c); },
                         [&](const LatentState& s) { return Eigen::VectorXd(s.coef.row(o2).transpose()); });
    check_moments(draws, binomial_coef_oracle(fx.state, fx.data, 0));
  }
}

TEST_CASE("augmentation blocks") {
  auto fx = random_fixture(5);
  fx.data.n[0](0, 0) = 0;
  fx.data.k[0](0, 0) = 0;
  fx.data.z[0](1, 0) = 0;
  fx.data.z[0](1, 1) = 1;
  update_omega(fx.state, fx.data, fx.cfg, ctx_at(0));
  update_L(fx.state, fx.data, ctx_at(0));
  CHECK(fx.state.pg_aux[0](0, 0) == 0.0);
  CHECK(fx.state.crt_aux[0](1, 0) == 0);
  CHECK(fx.state.crt_aux[0](1, 1) == 1);
  CHECK(check_state(fx.state, fx.data).empty());

  // psi = 0 and n = 4: E[omega] = n / 4 = 1.
  PanelDataset data = make_empty_panel(1, 3, 0, 1, 0);
  data.n[0].setConstant(4);
  FitConfig cfg;
  cfg.max_factors = 1;
  LatentState s = make_state_shell(data, cfg);
  const int draws = 20000;
  double sum = 0.0;
  for (int it = 0; it < draws; ++it) {
    update_omega(s, data, cfg, ctx_at(it));
    sum += s.pg_aux[0](0, 1);
  }
  CHECK(std::abs(sum / draws - 1.0) < 4 * std::sqrt(polya_gamma_variance(4, 0.0) / draws));
}

TEST_CASE("log_marginal_uniform_variance matches 64-point Gauss-Legendre") {
  for (int T : {3, 8, 24}) {
    for (double S : {0.05, 1.0, 7.0, 60.0}) {
      auto f = [&](double v) { return std::exp(-0.5 * T * std::log(2 * M_PI * v) - 0.5 * S / v); };
      // Composite rule on geometric panels so the peak near v = S / T is resolved.
      double integral = 0.0;
      double lo = 0.0;
      for (double hi = 1e-6; lo < 1.0; hi = std::min(1.0, 2.0 * hi)) {
        integral += boost::math::quadrature::gauss<double, 64>::integrate(f, lo, hi);
        lo = hi;
      }
      CHECK(log_marginal_uniform_variance(S, T) == doctest::Approx(std::log(integral)).epsilon(1e-7));
    }
  }
}

TEST_CASE("dominant outcome and factor variances follow their conditional") {
  auto fx = random_fixture(31, {.N = 4, .T = 6, .J = 1, .P = 0, .D1 = 1, .D2 = 1, .D3 = 1});
  fx.state.factors[0] *= 2.0;
  const auto probs = dominant_outcome_probs(fx.state, 0, fx.data.T);
  const int n = 20000;
  std::vector<int> hits(3, 0);
  std::vector<double> v_sum(3, 0.0);
  for (int it = 0; it < n; ++it) {
    LatentState s = fx.state;
    update_M_and_v(s, fx.data, ctx_at(it));
    const int m = s.dominant_outcome[0];
    REQUIRE(s.factor_var(0, m) == 1.0);
    ++hits[m];
    for (int o = 0; o < 3; ++o) v_sum[o] += s.factor_var(0, o);
  }
  for (int m = 0; m < 3; ++m) {
    CHECK(std::abs(hits[m] / double(n) - probs[m]) < 4 * std::sqrt(probs[m] * (1 - probs[m]) / n) + 1e-3);
    double expect = 0.0;
    for (int dom = 0; dom < 3; ++dom) {
      expect += probs[dom] * (dom == m ? 1.0 : truncated_variance_mean(fx.state.factors[m].col(0).squaredNorm(), 6));
    }
    CHECK(v_sum[m] / n == doctest::Approx(expect).epsilon(0.02));
  }

  auto single = random_fixture(3, {.N = 4, .T = 6, .J = 2, .P = 0, .D1 = 1, .D2 = 0, .D3 = 0});
  update_M_and_v(single.state, single.data, ctx_at(0));
  CHECK(single.state.dominant_outcome == std::vector<int>{0, 0});
  CHECK(single.state.factor_var.isOnes());
}

TEST_CASE("SMMALA leaves a Gaussian target invariant") {
  Eigen::MatrixXd Q(2, 2);
  Q << 2.0, 0.6, 0.6, 1.0;
  Eigen::VectorXd b(2);
  b << 1.0, -0.5;
  PoissonGaussianTarget target(Q, b, Eigen::MatrixXd(0, 2), Eigen::VectorXd(0), Eigen::VectorXd(0));
  const Gaussian exact = from_precision(Q, b);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(2);
  const int n = 60000;
  std::vector<Eigen::VectorXd> draws;
  int accepted_count = 0;
  for (int it = 0; it < n; ++it) {
    RngStream rng(3, static_cast<std::uint64_t>(it));
    bool accepted = false;
    smmala_step(target, x, 0.9, rng, accepted);
    accepted_count += accepted;
    if (it % 5 == 0) draws.push_back(x);
  }
  CHECK(accepted_count > n / 2);
  check_moments(draws, exact, 5.0);
}

TEST_CASE("SMMALA with zero gradient and identity metric proposes around the current point") {
  PoissonGaussianTarget target(Eigen::MatrixXd::Identity(1, 1), Eigen::VectorXd::Zero(1), Eigen::MatrixXd(0, 1),
                               Eigen::VectorXd(0), Eigen::VectorXd(0));
  // At x = 0 the drift vanishes, so accepted proposals are symmetric around 0.
  double sum = 0.0;
  int count = 0;
  for (int it = 0; it < 20000; ++it) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(1);
    RngStream rng(8, static_cast<std::uint64_t>(it));
    bool accepted = false;
    smmala_step(target, x, 1.0, rng, accepted);
    if (accepted) {
      sum += x(0);
      ++count;
    }
  }
  CHECK(std::abs(sum / count) < 0.03);
}

TEST_CASE("adapt_step moves toward the target rate") {
  CHECK(adapt_step(0.5, 0.9, 0.57, 10) > 0.5);
  CHECK(adapt_step(0.5, 0.1, 0.57, 10) < 0.5);
}

TEST_CASE("noise variances stay inside the prior support") {
  auto fx = random_fixture(9);
  for (int it = 0; it < 500; ++it) {
    update_sigma2(fx.state, fx.data, fx.cfg, ctx_at(it));
    REQUIRE((fx.state.noise_var.array() > 0.0).all());
    REQUIRE((fx.state.noise_var.array() <= 100.0).all());
  }
}

TEST_CASE("run_chain retains iterations / thin - burn-in draws, deterministically") {
  auto fx = random_fixture(1, {.N = 6, .T = 6, .J = 3, .P = 1});
  const FitConfig cfg = short_config();
  CHECK(cfg.retained_draws() == 15);
  FitConfig paper_cfg;
  paper_cfg.iterations = 100000;
  paper_cfg.thin = 50;
  paper_cfg.burn_in_draws = 500;
  CHECK(paper_cfg.retained_draws() == 1500);

  const auto a = run_chain(fx.data, cfg);
  const auto b = run_chain(fx.data, cfg);
  REQUIRE(a.retained.size() == 15);
  for (std::size_t k = 0; k < a.retained.size(); ++k) {
    CHECK(a.retained[k].loadings == b.retained[k].loadings);
    CHECK(a.retained[k].log_lik == b.retained[k].log_lik);
  }
  CHECK(a.acceptance.loadings.attempts > 0);

  FitConfig two = cfg;
  two.chains = 2;
  const auto serial = run_chains(fx.data, two, 1);
  const auto parallel = run_chains(fx.data, two, 2);
  CHECK(serial[1].retained.back().loadings == parallel[1].retained.back().loadings);
  CHECK(serial[0].retained.back().loadings != serial[1].retained.back().loadings);
  CHECK(pool_chains(serial).retained.size() == 30);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted chain") {
  auto fx = random_fixture(2, {.N = 5, .T = 6, .J = 2, .P = 0});
  const auto path = (std::filesystem::temp_directory_path() / "cmfa_resume_test.bin").string();
  FitConfig first = short_config();
  first.iterations = 100;
  first.checkpoint_every = 100;
  first.checkpoint_path = path;
  run_chain(fx.data, first);

  const Checkpoint cp = read_checkpoint(path);
  CHECK(cp.next_iteration == 100);
  write_checkpoint(path, cp);
  const Checkpoint again = read_checkpoint(path);
  CHECK(again.state.loadings == cp.state.loadings);
  CHECK(again.draws.retained.size() == cp.draws.retained.size());

  FitConfig full = short_config();
  const auto straight = run_chain(fx.data, full);
  const auto resumed = run_chain(fx.data, full, 0, path);
  REQUIRE(straight.retained.size() == resumed.retained.size());
  for (std::size_t k = 0; k < straight.retained.size(); ++k) {
    CHECK(straight.retained[k].loadings == resumed.retained[k].loadings);
    CHECK(straight.retained[k].dispersion == resumed.retained[k].dispersion);
  }
  FitConfig other = full;
  other.seed = 43;
  CHECK_THROWS_AS(run_chain(fx.data, other, 0, path), ValidationError);
  std::filesystem::remove(path);
}

TEST_CASE("relabelling units permutes the draws identically") {
  auto fx = random_fixture(4, {.N = 6, .T = 6, .J = 2, .P = 1});
  const std::vector<int> order{3, 0, 5, 1, 4, 2};
  const PanelDataset permuted = permute_units(fx.data, order);
  const FitConfig cfg = short_config();
  const auto base = run_chain(fx.data, cfg);
  const auto perm = run_chain(permuted, cfg);
  REQUIRE(base.retained.size() == perm.retained.size());
  for (std::size_t k = 0; k < base.retained.size(); ++k) {
    for (int r = 0; r < 6; ++r) {
      CHECK(perm.retained[k].loadings.row(r) == base.retained[k].loadings.row(order[r]));
      CHECK(perm.retained[k].noise_var.row(r) == base.retained[k].noise_var.row(order[r]));
      CHECK(perm.retained[k].dispersion.row(r) == base.retained[k].dispersion.row(order[r]));
    }
    CHECK(perm.retained[k].factors[0] == base.retained[k].factors[0]);
    CHECK(perm.retained[k].log_lik == base.retained[k].log_lik);
  }
}

TEST_CASE("every sweep leaves a valid state") {
  auto fx = random_fixture(14, {.N = 6, .T = 6, .J = 3, .P = 1});
  LatentState s = init_state(fx.data, fx.cfg);
  for (int it = 0; it < 50; ++it) {
    gibbs_sweep(s, fx.data, fx.cfg, ctx_at(it));
    REQUIRE(check_state(s, fx.data) == "");
  }
}

TEST_CASE("init_state rejects panels too short to fit") {
  auto fx = random_fixture(1, {.N = 3, .T = 6, .J = 2, .P = 0});
  fx.data.last_untreated[0] = 1;
  CHECK_THROWS_AS(init_state(fx.data, fx.cfg), ValidationError);
}
