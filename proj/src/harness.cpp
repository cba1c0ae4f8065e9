#include "cmfa/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "cmfa/causal.hpp"
#include "cmfa/error.hpp"
#include "cmfa/io.hpp"
#include "cmfa/rng.hpp"
#include "cmfa/samplers.hpp"

namespace cmfa {

namespace fs = std::filesystem;

const char* analysis_name(Analysis a) { return a == Analysis::MV ? "MV" : "UV"; }

StudyConfig StudyConfig::desk_defaults() {
  StudyConfig c;
  for (FitConfig* f : {&c.mv, &c.uv}) {
    f->iterations = 20000;
    f->thin = 20;
    f->burn_in_draws = 200;
    f->checkpoint_path.clear();
  }
  c.mv.max_factors = 12;
  c.uv.max_factors = 8;
  return c;
}

bool is_detection(const UnitResult& r) {
  if (r.level == 1) return r.lo > 0.0 || r.hi < 0.0;
  return r.lo > 0.0;
}

namespace {

std::uint64_t fit_seed(const StudyConfig& cfg, int b, Analysis a) {
  return stream_key({cfg.base_seed, static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(a) + 1}) >> 1;
}

CounterfactualDraws fit_and_predict(const PanelDataset& data, const FitConfig& base, std::uint64_t seed) {
  FitConfig fc = base;
  fc.seed = seed;
  const PosteriorDraws draws = run_chain(data, fc);
  return predict_counterfactuals(draws, data, seed);
}

}  // namespace

std::vector<UnitResult> evaluate_dataset(int b, const StudyConfig& cfg, Analysis analysis) {
  SimScenario sc = cfg.scenario;
  sc.seed = cfg.base_seed + static_cast<std::uint64_t>(b);
  sc.effect_level = 1;
  sc.effects = {};
  const SimOutput gen = generate_dataset(sc);
  const PanelDataset& data = gen.data;
  const int n_treated = data.n_treated();
  if (n_treated == 0) return {};

  const std::uint64_t seed = fit_seed(cfg, b, analysis);
  CounterfactualDraws cf;
  if (analysis == Analysis::MV) {
    cf = fit_and_predict(data, cfg.mv, seed);
  } else {
    for (int o = 0; o < data.D(); ++o) {
      const PanelDataset sub = select_outcomes(data, {o});
      CounterfactualDraws one = fit_and_predict(sub, cfg.uv, seed + static_cast<std::uint64_t>(o));
      for (auto& oc : one.outcomes) {
        oc.outcome = o;
        oc.family_index = data.family_index(o);
        cf.outcomes.push_back(std::move(oc));
      }
      cf.n_draws = one.n_draws;
    }
  }

  std::vector<double> mean_trials(data.N, 0.0), mean_offset(data.N, 0.0);
  for (int i = 0; i < data.N; ++i) {
    const int pre = data.last_untreated[i];
    for (int t = 0; t < pre; ++t) {
      if (data.D2 > 0) mean_trials[i] += data.n[0](i, t);
      if (data.D3 > 0) mean_offset[i] += data.w[0](i, t);
    }
    mean_trials[i] /= pre;
    mean_offset[i] /= pre;
  }

  std::vector<UnitResult> out;
  for (const EffectScenario& es : cfg.scenarios) {
    std::vector<UnitEffectTruth> truth;
    const PanelDataset observed = apply_effects(data, gen.truth, es.effects, &truth);
    std::map<int, const UnitEffectTruth*> truth_by_unit;
    for (const auto& t : truth) truth_by_unit[t.unit] = &t;
    CounterfactualDraws scen = cf;
    draw_treated_probabilities(scen, observed, seed);
    for (const EffectDraws& e : compute_effects(scen, observed)) {
      const AggregateDraws agg = aggregate_effects(e, observed);
      for (std::size_t u = 0; u < agg.units.size(); ++u) {
        const int i = agg.units[u];
        const UnitEffectTruth* t = truth_by_unit.at(i);
        double true_value = 0.0;
        switch (e.estimand) {
          case Estimand::Alpha: true_value = t->alpha; break;
          case Estimand::Beta: true_value = t->beta; break;
          case Estimand::Gamma: true_value = t->gamma; break;
          case Estimand::Delta: true_value = t->delta; break;
        }
        if (std::isnan(true_value)) continue;
        const Summary s = summarize(agg.unit.col(static_cast<Eigen::Index>(u)));
        UnitResult r;
        r.dataset = b;
        r.level = es.level;
        r.analysis = analysis;
        r.estimand = estimand_name(e.estimand);
        r.unit = i;
        r.last_untreated = data.last_untreated[i];
        r.n_treated = n_treated;
        r.mean_trials = mean_trials[i];
        r.mean_offset = mean_offset[i];
        r.truth = true_value;
        r.mean = s.mean;
        r.lo = s.lo;
        r.hi = s.hi;
        out.push_back(r);
      }
    }
  }
  return out;
}

std::vector<MetricsRow> compute_metrics(const std::vector<UnitResult>& results, const std::vector<int>& strata) {
  // Group key: (level, estimand, analysis).
  std::map<std::tuple<int, std::string, int>, std::vector<const UnitResult*>> groups;
  for (const auto& r : results) groups[{r.level, r.estimand, static_cast<int>(r.analysis)}].push_back(&r);

  std::vector<MetricsRow> rows;
  for (const auto& [key, members] : groups) {
    std::set<int> datasets;
    for (const auto* r : members) datasets.insert(r->dataset);
    const double B = static_cast<double>(datasets.size());
    std::vector<std::string> names{"any"};
    for (int s : strata) names.push_back(std::to_string(s));
    for (std::size_t k = 0; k < names.size(); ++k) {
      std::vector<const UnitResult*> sel;
      for (const auto* r : members) {
        if (k == 0 || r->last_untreated == strata[k - 1]) sel.push_back(r);
      }
      if (sel.empty()) continue;
      double wsum = 0.0, bias = 0.0, width = 0.0, det = 0.0;
      std::set<int> ds;
      for (const auto* r : sel) {
        const double w = 1.0 / (B * r->n_treated);
        wsum += w;
        bias += w * (r->mean - r->truth);
        width += w * (r->hi - r->lo);
        det += w * (is_detection(*r) ? 1.0 : 0.0);
        ds.insert(r->dataset);
      }
      MetricsRow row;
      row.level = std::get<0>(key);
      row.estimand = std::get<1>(key);
      row.analysis = static_cast<Analysis>(std::get<2>(key));
      row.stratum = names[k];
      row.bias = bias / wsum;
      double var = 0.0;
      for (const auto* r : sel) {
        const double e = r->mean - r->truth - row.bias;
        var += e * e / (B * r->n_treated);
      }
      row.se = std::sqrt(var / wsum);
      row.ci_width = width / wsum;
      row.detection_rate = det / wsum;
      row.n_units = static_cast<int>(sel.size());
      row.n_datasets = static_cast<int>(ds.size());
      rows.push_back(row);
    }
  }
  return rows;
}

HeatmapGrid stratify_by_history(const std::vector<UnitResult>& results, int level, const std::string& estimand,
                                Analysis analysis, const std::vector<double>& t_edges,
                                const std::vector<double>& x_edges, bool use_offset, int min_datasets) {
  if (t_edges.size() < 2 || x_edges.size() < 2) throw ValidationError("heatmap needs at least one bin per axis");
  HeatmapGrid g;
  g.t_edges = t_edges;
  g.x_edges = x_edges;
  const int nt = static_cast<int>(t_edges.size()) - 1;
  const int nx = static_cast<int>(x_edges.size()) - 1;
  Eigen::MatrixXd wdet = Eigen::MatrixXd::Zero(nt, nx), wsum = Eigen::MatrixXd::Zero(nt, nx);
  std::vector<std::set<int>> ds(static_cast<std::size_t>(nt * nx));
  std::set<int> all_datasets;
  for (const auto& r : results) {
    if (r.level == level && r.estimand == estimand && r.analysis == analysis) all_datasets.insert(r.dataset);
  }
  const double B = static_cast<double>(all_datasets.size());
  auto bin = [](const std::vector<double>& edges, double v) {
    for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
      if (v >= edges[k] && v < edges[k + 1]) return static_cast<int>(k);
    }
    return -1;
  };
  for (const auto& r : results) {
    if (r.level != level || r.estimand != estimand || r.analysis != analysis) continue;
    const int a = bin(t_edges, r.last_untreated);
    const int c = bin(x_edges, use_offset ? r.mean_offset : r.mean_trials);
    if (a < 0 || c < 0) continue;
    const double w = 1.0 / (B * r.n_treated);
    wsum(a, c) += w;
    wdet(a, c) += w * (is_detection(r) ? 1.0 : 0.0);
    ds[static_cast<std::size_t>(a * nx + c)].insert(r.dataset);
  }
  g.detection.resize(nt, nx);
  g.datasets.resize(nt, nx);
  for (int a = 0; a < nt; ++a) {
    for (int c = 0; c < nx; ++c) {
      const int n = static_cast<int>(ds[static_cast<std::size_t>(a * nx + c)].size());
      g.datasets(a, c) = n;
      g.detection(a, c) = (n >= min_datasets && n > 0) ? wdet(a, c) / wsum(a, c)
                                                         : std::numeric_limits<double>::quiet_NaN();
    }
  }
  return g;
}

StudyResult run_study(const StudyConfig& cfg) {
  if (cfg.datasets < 1) throw ValidationError("study: need at least one dataset");
  if (cfg.scenarios.empty()) throw ValidationError("study: no effect scenarios");
  cfg.scenario.validate();
  cfg.mv.validate();
  cfg.uv.validate();
  for (const auto& es : cfg.scenarios) {
    if ((es.level == 1) != es.effects.is_null()) {
      throw ValidationError("study: level 1 must be the null scenario and only level 1 may be");
    }
  }

  const int items = cfg.datasets * 2;
  std::vector<std::vector<UnitResult>> per_item(items);
  std::vector<std::string> errors(items);
  std::atomic<int> next{0};
  std::mutex io_mutex;
  auto worker = [&] {
    for (int k = next++; k < items; k = next++) {
      const int b = k / 2;
      const Analysis a = k % 2 == 0 ? Analysis::MV : Analysis::UV;
      try {
        const std::string path =
            cfg.out_dir.empty() ? std::string()
                                : (fs::path(cfg.out_dir) / "units" /
                                   ("dataset_" + std::to_string(b) + "_" + analysis_name(a) + ".csv"))
                                      .string();
        if (cfg.resume && !path.empty() && fs::exists(path)) {
          per_item[k] = read_unit_results(path);
          continue;
        }
        per_item[k] = evaluate_dataset(b, cfg, a);
        if (!path.empty()) {
          std::lock_guard<std::mutex> lock(io_mutex);
          write_unit_results(per_item[k], path);
        }
      } catch (const std::exception& e) {
        errors[k] = e.what();
        per_item[k].clear();
      }
    }
  };
  const int threads = std::min(thread_cap(cfg.jobs), items);
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  StudyResult res;
  for (int b = 0; b < cfg.datasets; ++b) {
    const int k_mv = 2 * b, k_uv = 2 * b + 1;
    if (!errors[k_mv].empty() || !errors[k_uv].empty()) {
      // A dataset is scored only when both analyses succeeded.
      if (!errors[k_mv].empty()) res.failures.push_back("dataset " + std::to_string(b) + " (MV): " + errors[k_mv]);
      if (!errors[k_uv].empty()) res.failures.push_back("dataset " + std::to_string(b) + " (UV): " + errors[k_uv]);
      continue;
    }
    ++res.datasets_ok;
    for (int k : {k_mv, k_uv}) res.units.insert(res.units.end(), per_item[k].begin(), per_item[k].end());
  }
  res.metrics = compute_metrics(res.units);
  if (!cfg.out_dir.empty()) {
    write_metrics(res.metrics, (fs::path(cfg.out_dir) / "metrics.csv").string());
    std::ofstream f((fs::path(cfg.out_dir) / "failures.txt").string());
    for (const auto& msg : res.failures) f << msg << '\n';
  }
  return res;
}

void write_unit_results(const std::vector<UnitResult>& results, const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open '" + path + "' for writing");
  out << "dataset,level,analysis,estimand,unit,last_untreated,n_treated,mean_trials,mean_offset,truth,mean,lo95,hi95\n";
  for (const auto& r : results) {
    out << r.dataset << ',' << r.level << ',' << analysis_name(r.analysis) << ',' << r.estimand << ',' << r.unit << ','
        << r.last_untreated << ',' << r.n_treated << ',' << format_double(r.mean_trials) << ','
        << format_double(r.mean_offset) << ',' << format_double(r.truth) << ',' << format_double(r.mean) << ','
        << format_double(r.lo) << ',' << format_double(r.hi) << '\n';
  }
}

std::vector<UnitResult> read_unit_results(const std::string& path) {
  const CsvTable t = read_csv(path);
  const std::vector<std::string> want{"dataset", "level", "analysis", "estimand", "unit", "last_untreated", "n_treated",
                                      "mean_trials", "mean_offset", "truth", "mean", "lo95", "hi95"};
  if (t.header != want) throw ValidationError(path + ":1: unexpected header");
  std::vector<UnitResult> out;
  for (const auto& row : t.rows) {
    UnitResult r;
    r.dataset = std::stoi(row[0]);
    r.level = std::stoi(row[1]);
    r.analysis = row[2] == "MV" ? Analysis::MV : Analysis::UV;
    r.estimand = row[3];
    r.unit = std::stoi(row[4]);
    r.last_untreated = std::stoi(row[5]);
    r.n_treated = std::stoi(row[6]);
    r.mean_trials = std::stod(row[7]);
    r.mean_offset = std::stod(row[8]);
    r.truth = std::stod(row[9]);
    r.mean = std::stod(row[10]);
    r.lo = std::stod(row[11]);
    r.hi = std::stod(row[12]);
    out.push_back(r);
  }
  return out;
}

void write_metrics(const std::vector<MetricsRow>& rows, const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open '" + path + "' for writing");
  out << "level,estimand,stratum,analysis,bias,se,ci_width,detection_rate,n_units,n_datasets\n";
  for (const auto& r : rows) {
    out << r.level << ',' << r.estimand << ',' << r.stratum << ',' << analysis_name(r.analysis) << ','
        << format_double(r.bias) << ',' << format_double(r.se) << ',' << format_double(r.ci_width) << ','
        << format_double(r.detection_rate) << ',' << r.n_units << ',' << r.n_datasets << '\n';
  }
}

StudyConfig read_study_manifest(const std::string& path) {
  StudyConfig cfg = StudyConfig::desk_defaults();
  KeyValues mv, uv, sim;
  bool custom_scenarios = false;
  for (const auto& [key, value] : read_key_values(path)) {
    if (key.rfind("mv.", 0) == 0) {
      mv.emplace_back(key.substr(3), value);
    } else if (key.rfind("uv.", 0) == 0) {
      uv.emplace_back(key.substr(3), value);
    } else if (key.rfind("sim.", 0) == 0) {
      sim.emplace_back(key.substr(4), value);
    } else if (key == "datasets") {
      cfg.datasets = std::stoi(value);
    } else if (key == "base_seed") {
      cfg.base_seed = std::stoull(value);
    } else if (key == "jobs") {
      cfg.jobs = std::stoi(value);
    } else if (key == "min_datasets_per_cell") {
      cfg.min_datasets_per_cell = std::stoi(value);
    } else if (key == "scenario") {
      if (!custom_scenarios) cfg.scenarios.clear();
      custom_scenarios = true;
      std::istringstream in(value);
      EffectScenario es;
      if (!(in >> es.level >> es.effects.alpha >> es.effects.beta >> es.effects.delta)) {
        throw ValidationError(path + ": scenario expects 'level alpha beta delta'");
      }
      cfg.scenarios.push_back(es);
    } else {
      throw ValidationError(path + ": unknown key '" + key + "'");
    }
  }
  apply_fit_config(mv, cfg.mv, path + " (mv)");
  apply_fit_config(uv, cfg.uv, path + " (uv)");
  apply_scenario(sim, cfg.scenario, path + " (sim)");
  return cfg;
}

}  // namespace cmfa
