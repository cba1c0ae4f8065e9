#include "cmfa/causal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "cmfa/distributions.hpp"
#include "cmfa/error.hpp"

namespace cmfa {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Extra stream-key component separating p_treated draws from the
// counterfactual outcome draws.
constexpr std::uint64_t kTreatedProbKey = 0x7472656174656450ULL;

}  // namespace

const char* estimand_name(Estimand e) {
  switch (e) {
    case Estimand::Alpha: return "alpha";
    case Estimand::Beta: return "beta";
    case Estimand::Gamma: return "gamma";
    case Estimand::Delta: return "delta";
  }
  return "unknown";
}

Estimand parse_estimand(const std::string& s) {
  if (s == "alpha") return Estimand::Alpha;
  if (s == "beta") return Estimand::Beta;
  if (s == "gamma") return Estimand::Gamma;
  if (s == "delta") return Estimand::Delta;
  throw ValidationError("unknown estimand '" + s + "'");
}

const char* level_name(Level l) {
  switch (l) {
    case Level::UnitTime: return "unit_time";
    case Level::Unit: return "unit";
    case Level::Time: return "time";
    case Level::Overall: return "overall";
  }
  return "unknown";
}

std::vector<Cell> treated_cells(const PanelDataset& data) {
  std::vector<Cell> cells;
  for (int i = 0; i < data.N; ++i) {
    for (int t = data.last_untreated[i]; t < data.T; ++t) cells.emplace_back(i, t);
  }
  return cells;
}

CounterfactualDraws predict_counterfactuals(const PosteriorDraws& draws, const PanelDataset& data,
                                            std::uint64_t seed) {
  CounterfactualDraws cf;
  cf.n_draws = static_cast<int>(draws.retained.size());
  const std::vector<Cell> cells = treated_cells(data);
  const int C = static_cast<int>(cells.size());
  for (int o = 0; o < data.D(); ++o) {
    OutcomeCounterfactuals oc;
    oc.outcome = o;
    oc.family = data.family_of(o);
    oc.family_index = data.family_index(o);
    oc.cells = cells;
    oc.untreated.resize(cf.n_draws, C);
    if (oc.family != Family::Normal) oc.rate.resize(cf.n_draws, C);
    cf.outcomes.push_back(std::move(oc));
  }

  for (int l = 0; l < cf.n_draws; ++l) {
    const StateSnapshot& snap = draws.retained[l];
    if (snap.loadings.rows() != data.N || static_cast<int>(snap.factors.size()) != data.D()) {
      throw ValidationError("posterior draws do not match the dataset dimensions");
    }
    for (auto& oc : cf.outcomes) {
      const int d = oc.family_index;
      int prev_unit = -1;
      RngStream rng(seed, 0);
      for (int c = 0; c < C; ++c) {
        const auto [i, t] = cells[c];
        if (i != prev_unit) {
          rng = RngStream(seed, stream_key({static_cast<std::uint64_t>(Block::Predict),
                                            static_cast<std::uint64_t>(l),
                                            static_cast<std::uint64_t>(oc.outcome),
                                            static_cast<std::uint64_t>(i)}));
          prev_unit = i;
        }
        double psi = snap.loadings.row(i).dot(snap.factors[oc.outcome].row(t));
        if (data.P > 0) psi += snap.coef.row(oc.outcome).dot(data.x[i].row(t));
        switch (oc.family) {
          case Family::Normal:
            oc.untreated(l, c) = psi + std::sqrt(snap.noise_var(i, d)) * rng.normal();
            break;
          case Family::Binomial: {
            const double p = expit(psi);
            oc.rate(l, c) = p;
            oc.untreated(l, c) = static_cast<double>(rng.binomial(data.n[d](i, t), p));
            break;
          }
          case Family::NegBin: {
            const double q = std::exp(psi);
            oc.rate(l, c) = q;
            const double w = data.w[d](i, t);
            const double xi = snap.dispersion(draws.pooled_dispersion ? 0 : i, d);
            const double mean = w * q;
            if (!std::isfinite(mean)) throw NumericalError("counterfactual count mean overflow");
            oc.untreated(l, c) = mean > 0.0 ? static_cast<double>(sample_negbin(mean, xi, rng)) : 0.0;
            break;
          }
        }
      }
    }
  }
  draw_treated_probabilities(cf, data, seed);
  return cf;
}

void draw_treated_probabilities(CounterfactualDraws& cf, const PanelDataset& data, std::uint64_t seed) {
  for (auto& oc : cf.outcomes) {
    if (oc.family != Family::Binomial) continue;
    const int d = oc.family_index;
    const int C = static_cast<int>(oc.cells.size());
    oc.p_treated.resize(cf.n_draws, C);
    for (int c = 0; c < C; ++c) {
      const auto [i, t] = oc.cells[c];
      const int k = data.k[d](i, t);
      const int n = data.n[d](i, t);
      RngStream rng(seed, stream_key({kTreatedProbKey, static_cast<std::uint64_t>(oc.outcome),
                                      static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(t)}));
      for (int l = 0; l < cf.n_draws; ++l) {
        oc.p_treated(l, c) = n > 0 ? rng.beta(1.0 + k, 1.0 + n - k) : kNaN;
      }
    }
  }
}

std::vector<EffectDraws> compute_effects(const CounterfactualDraws& cf, const PanelDataset& data) {
  std::vector<EffectDraws> out;
  for (const auto& oc : cf.outcomes) {
    const int d = oc.family_index;
    const int C = static_cast<int>(oc.cells.size());
    auto make = [&](Estimand e) {
      EffectDraws ed;
      ed.outcome = oc.outcome;
      ed.estimand = e;
      ed.cells = oc.cells;
      ed.values.resize(cf.n_draws, C);
      return ed;
    };
    switch (oc.family) {
      case Family::Normal: {
        EffectDraws alpha = make(Estimand::Alpha);
        for (int c = 0; c < C; ++c) {
          const double y = data.y[d](oc.cells[c].first, oc.cells[c].second);
          alpha.values.col(c) = (y - oc.untreated.col(c).array()).matrix();
        }
        out.push_back(std::move(alpha));
        break;
      }
      case Family::Binomial: {
        EffectDraws beta = make(Estimand::Beta);
        EffectDraws gamma = make(Estimand::Gamma);
        for (int c = 0; c < C; ++c) {
          const auto [i, t] = oc.cells[c];
          if (data.n[d](i, t) == 0) {
            beta.values.col(c).setConstant(kNaN);
            gamma.values.col(c).setConstant(kNaN);
            continue;
          }
          beta.values.col(c) = oc.p_treated.col(c) - oc.rate.col(c);
          gamma.values.col(c) = (static_cast<double>(data.k[d](i, t)) - oc.untreated.col(c).array()).matrix();
        }
        out.push_back(std::move(beta));
        out.push_back(std::move(gamma));
        break;
      }
      case Family::NegBin: {
        EffectDraws delta = make(Estimand::Delta);
        for (int c = 0; c < C; ++c) {
          const auto [i, t] = oc.cells[c];
          if (!(data.w[d](i, t) > 0.0)) {
            delta.values.col(c).setConstant(kNaN);
            continue;
          }
          delta.values.col(c) = (static_cast<double>(data.z[d](i, t)) - oc.untreated.col(c).array()).matrix();
        }
        out.push_back(std::move(delta));
        break;
      }
    }
  }
  return out;
}

namespace {

std::vector<char> valid_mask(const EffectDraws& e) {
  std::vector<char> valid(e.cells.size());
  for (std::size_t c = 0; c < e.cells.size(); ++c) {
    valid[c] = e.values.rows() > 0 ? !std::isnan(e.values(0, static_cast<Eigen::Index>(c))) : 1;
  }
  return valid;
}

}  // namespace

AggregateDraws aggregate_effects(const EffectDraws& effects, const PanelDataset& data) {
  AggregateDraws agg;
  const int L = static_cast<int>(effects.values.rows());
  const std::vector<char> valid = valid_mask(effects);
  const int C = static_cast<int>(effects.cells.size());

  // Unit groups are contiguous because cells are ordered by unit then time.
  std::vector<std::vector<int>> unit_cells;
  for (int c = 0; c < C; ++c) {
    if (!valid[c]) continue;
    const int i = effects.cells[c].first;
    if (agg.units.empty() || agg.units.back() != i) {
      agg.units.push_back(i);
      unit_cells.emplace_back();
    }
    unit_cells.back().push_back(c);
  }
  for (const auto& cs : unit_cells) agg.unit_counts.push_back(static_cast<int>(cs.size()));
  std::vector<std::vector<int>> time_cells(data.T);
  for (int c = 0; c < C; ++c) {
    if (valid[c]) time_cells[effects.cells[c].second].push_back(c);
  }
  std::vector<int> time_index;
  for (int t = 0; t < data.T; ++t) {
    if (time_cells[t].empty()) continue;
    agg.times.push_back(t);
    agg.time_counts.push_back(static_cast<int>(time_cells[t].size()));
    time_index.push_back(t);
  }

  agg.unit.resize(L, static_cast<Eigen::Index>(agg.units.size()));
  agg.time.resize(L, static_cast<Eigen::Index>(agg.times.size()));
  agg.overall.resize(L);
  for (int l = 0; l < L; ++l) {
    double total = 0.0;
    int total_count = 0;
    for (std::size_t u = 0; u < unit_cells.size(); ++u) {
      double sum = 0.0;
      for (int c : unit_cells[u]) sum += effects.values(l, c);
      agg.unit(l, static_cast<Eigen::Index>(u)) = sum / static_cast<double>(unit_cells[u].size());
    }
    for (int c = 0; c < C; ++c) {
      if (!valid[c]) continue;
      total += effects.values(l, c);
      ++total_count;
    }
    for (std::size_t k = 0; k < time_index.size(); ++k) {
      double sum = 0.0;
      const auto& cs = time_cells[time_index[k]];
      for (int c : cs) sum += effects.values(l, c);
      agg.time(l, static_cast<Eigen::Index>(k)) = sum / static_cast<double>(cs.size());
    }
    agg.overall(l) = total_count > 0 ? total / total_count : kNaN;
  }
  return agg;
}

RankDraws compute_ranks(const EffectDraws& effects, const PanelDataset& data) {
  RankDraws rk;
  const int L = static_cast<int>(effects.values.rows());
  const std::vector<char> valid = valid_mask(effects);
  std::vector<int> cols;
  for (std::size_t c = 0; c < effects.cells.size(); ++c) {
    if (!valid[c]) continue;
    cols.push_back(static_cast<int>(c));
    rk.cells.push_back(effects.cells[c]);
  }
  const int V = static_cast<int>(cols.size());
  std::vector<std::vector<int>> by_time(data.T);
  for (int k = 0; k < V; ++k) by_time[rk.cells[k].second].push_back(k);

  std::vector<std::vector<int>> unit_groups;
  for (int k = 0; k < V; ++k) {
    const int i = rk.cells[k].first;
    if (rk.units.empty() || rk.units.back() != i) {
      rk.units.push_back(i);
      unit_groups.emplace_back();
    }
    unit_groups.back().push_back(k);
  }

  rk.values.resize(L, V);
  rk.unit.resize(L, static_cast<Eigen::Index>(rk.units.size()));
  for (int l = 0; l < L; ++l) {
    for (int t = 0; t < data.T; ++t) {
      const auto& group = by_time[t];
      const double denom = static_cast<double>(group.size()) + 1.0;
      for (int a : group) {
        const double ea = effects.values(l, cols[a]);
        int count = 0;
        for (int b : group) count += effects.values(l, cols[b]) <= ea;
        rk.values(l, a) = count / denom;
      }
    }
    for (std::size_t u = 0; u < unit_groups.size(); ++u) {
      double sum = 0.0;
      for (int k : unit_groups[u]) sum += rk.values(l, k);
      rk.unit(l, static_cast<Eigen::Index>(u)) = sum / static_cast<double>(unit_groups[u].size());
    }
  }
  return rk;
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

Summary summarize(const Eigen::Ref<const Eigen::VectorXd>& draws) {
  if (draws.size() == 0) throw ValidationError("summarize: no draws");
  std::vector<double> v(draws.data(), draws.data() + draws.size());
  double sum = 0.0;
  for (double x : v) sum += x;
  Summary s;
  s.mean = sum / static_cast<double>(v.size());
  std::sort(v.begin(), v.end());
  s.lo = quantile(v, 0.025);
  s.hi = quantile(v, 0.975);
  return s;
}

namespace {

std::string rank_key(const PanelDataset& data, const EffectDraws& e) {
  return data.outcome_labels[e.outcome] + ":rank_" + estimand_name(e.estimand);
}

}  // namespace

std::vector<RankCorrelation> rank_correlations(const std::vector<RankDraws>& ranks,
                                               const std::vector<EffectDraws>& effects,
                                               const PanelDataset& data) {
  std::vector<std::map<int, double>> means(ranks.size());
  for (std::size_t r = 0; r < ranks.size(); ++r) {
    for (std::size_t u = 0; u < ranks[r].units.size(); ++u) {
      means[r][ranks[r].units[u]] = ranks[r].unit.col(static_cast<Eigen::Index>(u)).mean();
    }
  }
  std::vector<RankCorrelation> out;
  for (std::size_t a = 0; a < ranks.size(); ++a) {
    for (std::size_t b = 0; b < ranks.size(); ++b) {
      std::vector<double> xa, xb;
      for (const auto& [unit, value] : means[a]) {
        auto it = means[b].find(unit);
        if (it == means[b].end()) continue;
        xa.push_back(value);
        xb.push_back(it->second);
      }
      RankCorrelation rc;
      rc.a = rank_key(data, effects[a]);
      rc.b = rank_key(data, effects[b]);
      rc.n_units = static_cast<int>(xa.size());
      if (a == b) {
        rc.correlation = 1.0;
      } else if (xa.size() < 2) {
        rc.correlation = kNaN;
      } else {
        const double n = static_cast<double>(xa.size());
        double ma = 0.0, mb = 0.0;
        for (std::size_t k = 0; k < xa.size(); ++k) {
          ma += xa[k];
          mb += xb[k];
        }
        ma /= n;
        mb /= n;
        double sab = 0.0, saa = 0.0, sbb = 0.0;
        for (std::size_t k = 0; k < xa.size(); ++k) {
          sab += (xa[k] - ma) * (xb[k] - mb);
          saa += (xa[k] - ma) * (xa[k] - ma);
          sbb += (xb[k] - mb) * (xb[k] - mb);
        }
        rc.correlation = (saa > 0 && sbb > 0) ? sab / std::sqrt(saa * sbb) : kNaN;
      }
      out.push_back(rc);
    }
  }
  // Enforce exact symmetry of the reported matrix.
  const std::size_t R = ranks.size();
  for (std::size_t a = 0; a < R; ++a) {
    for (std::size_t b = a + 1; b < R; ++b) out[b * R + a].correlation = out[a * R + b].correlation;
  }
  return out;
}

EffectReport build_report(const CounterfactualDraws& cf, const PanelDataset& data) {
  EffectReport report;
  const std::vector<EffectDraws> effects = compute_effects(cf, data);
  std::vector<RankDraws> all_ranks;
  for (const auto& e : effects) {
    const std::string name = estimand_name(e.estimand);
    const std::vector<char> valid = valid_mask(e);
    for (std::size_t c = 0; c < e.cells.size(); ++c) {
      if (!valid[c]) continue;
      EffectSummaryRow row;
      row.level = Level::UnitTime;
      row.estimand = name;
      row.outcome = e.outcome;
      row.unit = e.cells[c].first;
      row.time = e.cells[c].second;
      row.count = 1;
      row.summary = summarize(e.values.col(static_cast<Eigen::Index>(c)));
      report.effects.push_back(row);
    }
    const AggregateDraws agg = aggregate_effects(e, data);
    for (std::size_t u = 0; u < agg.units.size(); ++u) {
      EffectSummaryRow row;
      row.level = Level::Unit;
      row.estimand = name;
      row.outcome = e.outcome;
      row.unit = agg.units[u];
      row.count = agg.unit_counts[u];
      row.summary = summarize(agg.unit.col(static_cast<Eigen::Index>(u)));
      report.effects.push_back(row);
    }
    for (std::size_t k = 0; k < agg.times.size(); ++k) {
      EffectSummaryRow row;
      row.level = Level::Time;
      row.estimand = name;
      row.outcome = e.outcome;
      row.time = agg.times[k];
      row.count = agg.time_counts[k];
      row.summary = summarize(agg.time.col(static_cast<Eigen::Index>(k)));
      report.effects.push_back(row);
    }
    if (!agg.units.empty()) {
      EffectSummaryRow row;
      row.level = Level::Overall;
      row.estimand = name;
      row.outcome = e.outcome;
      for (int c : agg.time_counts) row.count += c;
      row.summary = summarize(agg.overall);
      report.effects.push_back(row);
    }

    RankDraws rk = compute_ranks(e, data);
    const std::string rname = "rank_" + name;
    for (std::size_t k = 0; k < rk.cells.size(); ++k) {
      EffectSummaryRow row;
      row.level = Level::UnitTime;
      row.estimand = rname;
      row.outcome = e.outcome;
      row.unit = rk.cells[k].first;
      row.time = rk.cells[k].second;
      row.count = 1;
      row.summary = summarize(rk.values.col(static_cast<Eigen::Index>(k)));
      report.ranks.push_back(row);
    }
    for (std::size_t u = 0; u < rk.units.size(); ++u) {
      EffectSummaryRow row;
      row.level = Level::Unit;
      row.estimand = rname;
      row.outcome = e.outcome;
      row.unit = rk.units[u];
      row.summary = summarize(rk.unit.col(static_cast<Eigen::Index>(u)));
      report.ranks.push_back(row);
    }
    all_ranks.push_back(std::move(rk));
  }
  report.correlations = rank_correlations(all_ranks, effects, data);
  return report;
}

}  // namespace cmfa
