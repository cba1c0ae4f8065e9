#pragma once

// Random panels and states shared by the unit and acceptance tests.

#include <cmath>
#include <cstdint>

#include <Eigen/Dense>

#include "cmfa/panel.hpp"
#include "cmfa/rng.hpp"
#include "cmfa/state.hpp"

namespace cmfa::testing {

struct Fixture {
  PanelDataset data;
  FitConfig cfg;
  LatentState state;
};

struct FixtureShape {
  int N = 5;
  int T = 6;
  int J = 3;
  int P = 2;
  int D1 = 1;
  int D2 = 1;
  int D3 = 1;
};

inline Fixture random_fixture(std::uint64_t seed, const FixtureShape& shape = {}) {
  RngStream rng(seed, 0xF1);
  Fixture fx;
  PanelDataset& data = fx.data;
  data = make_empty_panel(shape.N, shape.T, shape.D1, shape.D2, shape.D3, shape.P);
  for (int i = 0; i < shape.N; ++i) {
    data.last_untreated[i] = (i % 3 == 2) ? shape.T - 2 : shape.T;
    for (int t = 0; t < shape.T; ++t) {
      for (int d = 0; d < shape.D1; ++d) data.y[d](i, t) = rng.normal(1.0, 1.5);
      for (int d = 0; d < shape.D2; ++d) {
        const int n = 1 + static_cast<int>(rng.uniform() * 20);
        data.n[d](i, t) = n;
        data.k[d](i, t) = static_cast<int>(rng.binomial(n, 0.4));
      }
      for (int d = 0; d < shape.D3; ++d) {
        data.w[d](i, t) = 0.5 + 2.5 * rng.uniform();
        data.z[d](i, t) = static_cast<int>(rng.poisson(4.0));
      }
    }
    if (shape.P > 0) data.x[i] = Eigen::MatrixXd::NullaryExpr(shape.T, shape.P, [&] { return rng.normal(0, 0.5); });
  }

  fx.cfg.max_factors = shape.J;
  LatentState& s = fx.state;
  s = make_state_shell(data, fx.cfg);
  const int D = data.D();
  auto fill_normal = [&](Eigen::MatrixXd& m, double sd) {
    m = Eigen::MatrixXd::NullaryExpr(m.rows(), m.cols(), [&] { return rng.normal(0, sd); });
  };
  auto fill_uniform = [&](Eigen::MatrixXd& m, double lo, double hi) {
    m = Eigen::MatrixXd::NullaryExpr(m.rows(), m.cols(), [&] { return lo + (hi - lo) * rng.uniform(); });
  };
  fill_normal(s.loadings, 0.6);
  for (auto& f : s.factors) fill_normal(f, 0.5);
  fill_normal(s.coef, 0.3);
  fill_uniform(s.noise_var, 0.5, 2.0);
  fill_uniform(s.dispersion, 0.3, 3.0);
  fill_uniform(s.loading_var, 0.2, 2.0);
  fill_uniform(s.factor_var, 0.2, 0.9);
  for (int j = 0; j < s.J; ++j) {
    s.dominant_outcome[j] = j % D;
    s.factor_var(j, j % D) = 1.0;
  }
  for (int d = 0; d < shape.D2; ++d) {
    for (int i = 0; i < shape.N; ++i)
      for (int t = 0; t < shape.T; ++t) s.pg_aux[d](i, t) = 0.1 + 1.9 * rng.uniform();
  }
  for (int d = 0; d < shape.D3; ++d) {
    for (int i = 0; i < shape.N; ++i)
      for (int t = 0; t < shape.T; ++t) {
        const int z = data.z[d](i, t);
        s.crt_aux[d](i, t) = z == 0 ? 0 : 1 + static_cast<int>(rng.uniform() * z) % z;
      }
  }
  return fx;
}

}  // namespace cmfa::testing
