#pragma once

// Brute-force recomputation of the causal aggregates and ranks from a dense
// (unit, time) view of the effect draws. Summation runs over units in
// ascending order and, within a unit, over ascending times.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "cmfa/causal.hpp"
#include "cmfa/panel.hpp"
#include "cmfa/rng.hpp"

namespace cmfa::testing {

struct DenseEffects {
  int N = 0, T = 0, L = 0;
  std::vector<double> v;  // (l, i, t), NaN where no valid cell
  double operator()(int l, int i, int t) const { return v[(static_cast<std::size_t>(l) * N + i) * T + t]; }
  bool valid(int i, int t) const { return !std::isnan((*this)(0, i, t)); }
};

inline DenseEffects densify(const EffectDraws& e, const PanelDataset& data) {
  DenseEffects d{data.N, data.T, static_cast<int>(e.values.rows()), {}};
  d.v.assign(static_cast<std::size_t>(d.L) * d.N * d.T, std::nan(""));
  for (std::size_t c = 0; c < e.cells.size(); ++c) {
    const auto [i, t] = e.cells[c];
    for (int l = 0; l < d.L; ++l) d.v[(static_cast<std::size_t>(l) * d.N + i) * d.T + t] = e.values(l, static_cast<int>(c));
  }
  return d;
}

struct BruteAggregates {
  std::map<int, std::vector<double>> unit;  // unit -> per-draw mean
  std::map<int, std::vector<double>> time;
  std::vector<double> overall;
  std::map<std::pair<int, int>, std::vector<double>> rank;  // (unit, time) -> per-draw rank
  std::map<int, std::vector<double>> unit_rank;
};

inline BruteAggregates brute_force(const DenseEffects& e, const PanelDataset& data) {
  BruteAggregates out;
  out.overall.assign(e.L, 0.0);
  for (int l = 0; l < e.L; ++l) {
    double total = 0.0;
    int count = 0;
    for (int i = 0; i < e.N; ++i) {
      double s = 0.0;
      int n = 0;
      for (int t = data.last_untreated[i]; t < e.T; ++t) {
        if (!e.valid(i, t)) continue;
        s += e(l, i, t);
        total += e(l, i, t);
        ++n;
        ++count;
      }
      if (n > 0) out.unit[i].push_back(s / n);
    }
    out.overall[l] = total / count;
    for (int t = 0; t < e.T; ++t) {
      double s = 0.0;
      int n = 0;
      for (int i = 0; i < e.N; ++i) {
        if (t < data.last_untreated[i] || !e.valid(i, t)) continue;
        s += e(l, i, t);
        ++n;
      }
      if (n > 0) out.time[t].push_back(s / n);
    }
    for (int t = 0; t < e.T; ++t) {
      std::vector<int> group;
      for (int i = 0; i < e.N; ++i) {
        if (t >= data.last_untreated[i] && e.valid(i, t)) group.push_back(i);
      }
      for (int i : group) {
        int below = 0;
        for (int j : group) below += e(l, j, t) <= e(l, i, t);
        out.rank[{i, t}].push_back(below / (group.size() + 1.0));
      }
    }
    for (int i = 0; i < e.N; ++i) {
      double s = 0.0;
      int n = 0;
      for (int t = data.last_untreated[i]; t < e.T; ++t) {
        auto it = out.rank.find({i, t});
        if (it == out.rank.end()) continue;
        s += it->second[l];
        ++n;
      }
      if (n > 0) out.unit_rank[i].push_back(s / n);
    }
  }
  return out;
}

/// Type-7 percentile computed from a freshly sorted copy.
inline double brute_percentile(std::vector<double> x, double p) {
  std::sort(x.begin(), x.end());
  const double pos = p * (x.size() - 1);
  const std::size_t k = static_cast<std::size_t>(pos);
  if (k + 1 >= x.size()) return x.back();
  return x[k] + (pos - k) * (x[k + 1] - x[k]);
}

/// Random panel of treatment times with effect draws on every treated cell.
/// Some cells are excluded (NaN) and values are rounded to create ties.
inline std::pair<PanelDataset, EffectDraws> random_effects(std::uint64_t seed, int N = 9, int T = 10, int L = 40) {
  RngStream rng(seed, 0xCA);
  PanelDataset data = make_empty_panel(N, T, 1, 0, 0);
  for (int i = 0; i < N; ++i) {
    const double u = rng.uniform();
    data.last_untreated[i] = u < 0.3 ? T : 3 + static_cast<int>(rng.uniform() * (T - 4));
  }
  EffectDraws e;
  e.cells = treated_cells(data);
  e.values.resize(L, static_cast<int>(e.cells.size()));
  for (int c = 0; c < e.values.cols(); ++c) {
    const bool excluded = rng.uniform() < 0.1;
    for (int l = 0; l < L; ++l) e.values(l, c) = excluded ? std::nan("") : std::round(rng.normal(0, 2) * 2) / 2;
  }
  return {data, e};
}

}  // namespace cmfa::testing
