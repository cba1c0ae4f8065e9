#include "cmfa/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "cmfa/error.hpp"

namespace cmfa {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

[[noreturn]] void fail_at(const std::string& path, int line, const std::string& msg) {
  throw ValidationError(path + ":" + std::to_string(line) + ": " + msg);
}

std::ofstream open_out(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open '" + path + "' for writing");
  return out;
}

double parse_real(const std::string& s, const std::string& path, int line, const char* what) {
  const std::string t = trim(s);
  double v = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    // from_chars rejects "nan"/"inf" spelled differently on some platforms.
    if (t == "nan" || t == "NaN" || t == "NA") return kNaN;
    fail_at(path, line, std::string("invalid ") + what + " '" + s + "'");
  }
  return v;
}

std::int64_t parse_int(const std::string& s, const std::string& path, int line, const char* what) {
  const std::string t = trim(s);
  std::int64_t v = 0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    // Accept integral reals such as "12.0".
    const double d = parse_real(s, path, line, what);
    if (!std::isfinite(d) || d != std::floor(d)) fail_at(path, line, std::string("invalid ") + what + " '" + s + "'");
    return static_cast<std::int64_t>(d);
  }
  return v;
}

void expect_header(const CsvTable& t, const std::vector<std::string>& want, const std::string& path) {
  if (t.header != want) {
    std::string w;
    for (const auto& h : want) w += (w.empty() ? "" : ",") + h;
    fail_at(path, 1, "header must be '" + w + "'");
  }
}

}  // namespace

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!have_header && lineno == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) {
      line = line.substr(3);  // UTF-8 byte order mark
    }
    if (trim(line).empty()) continue;
    std::vector<std::string> fields = split(line, ',');
    for (auto& f : fields) f = trim(f);
    if (!have_header) {
      t.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != t.header.size()) {
      fail_at(path, lineno, "expected " + std::to_string(t.header.size()) + " fields, found " +
                                std::to_string(fields.size()));
    }
    t.rows.push_back(std::move(fields));
    t.lines.push_back(lineno);
  }
  if (!have_header) throw ValidationError(path + ": empty file");
  return t;
}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// ---------------------------------------------------------------------------
// Datasets

PanelDataset load_dataset(const std::string& outcomes_path, const std::string& treatment_path,
                          const std::string& covariates_path) {
  const CsvTable out_t = read_csv(outcomes_path);
  expect_header(out_t, {"unit_id", "time", "outcome", "family", "value", "trials", "offset"}, outcomes_path);
  const CsvTable trt_t = read_csv(treatment_path);
  expect_header(trt_t, {"unit_id", "last_untreated_time"}, treatment_path);

  // Units in treatment-file order.
  std::unordered_map<std::string, int> unit_index;
  std::vector<std::string> units;
  std::vector<std::int64_t> last_untreated;
  std::vector<int> trt_lines;
  for (std::size_t r = 0; r < trt_t.rows.size(); ++r) {
    const auto& row = trt_t.rows[r];
    const int line = trt_t.lines[r];
    if (row[0].empty()) fail_at(treatment_path, line, "empty unit_id");
    if (unit_index.count(row[0])) fail_at(treatment_path, line, "duplicate unit '" + row[0] + "'");
    unit_index[row[0]] = static_cast<int>(units.size());
    units.push_back(row[0]);
    last_untreated.push_back(parse_int(row[1], treatment_path, line, "last_untreated_time"));
    trt_lines.push_back(line);
  }

  // Outcomes grouped by family, each in first-appearance order.
  struct OutcomeInfo {
    Family family;
    int first_line;
  };
  std::map<std::string, OutcomeInfo> outcome_info;
  std::vector<std::string> outcome_order;
  int T = 0;
  for (std::size_t r = 0; r < out_t.rows.size(); ++r) {
    const auto& row = out_t.rows[r];
    const int line = out_t.lines[r];
    if (!unit_index.count(row[0])) fail_at(outcomes_path, line, "unit '" + row[0] + "' missing from treatment file");
    const std::int64_t t = parse_int(row[1], outcomes_path, line, "time");
    if (t < 1) fail_at(outcomes_path, line, "time must be >= 1");
    T = std::max<int>(T, static_cast<int>(t));
    if (row[2].empty()) fail_at(outcomes_path, line, "empty outcome name");
    Family fam;
    try {
      fam = parse_family(row[3]);
    } catch (const ValidationError&) {
      fail_at(outcomes_path, line, "unknown family '" + row[3] + "'");
    }
    auto it = outcome_info.find(row[2]);
    if (it == outcome_info.end()) {
      outcome_info[row[2]] = {fam, line};
      outcome_order.push_back(row[2]);
    } else if (it->second.family != fam) {
      fail_at(outcomes_path, line, "outcome '" + row[2] + "' was declared " + family_name(it->second.family) +
                                       " on line " + std::to_string(it->second.first_line));
    }
  }
  if (T < 1) throw ValidationError(outcomes_path + ": no data rows");

  std::vector<std::string> normal, binom, count;
  for (const auto& name : outcome_order) {
    switch (outcome_info[name].family) {
      case Family::Normal: normal.push_back(name); break;
      case Family::Binomial: binom.push_back(name); break;
      case Family::NegBin: count.push_back(name); break;
    }
  }
  const int N = static_cast<int>(units.size());

  // Covariate names in first-appearance order.
  CsvTable cov_t;
  std::vector<std::string> cov_names;
  std::unordered_map<std::string, int> cov_index;
  if (!covariates_path.empty()) {
    cov_t = read_csv(covariates_path);
    expect_header(cov_t, {"unit_id", "time", "covariate", "value"}, covariates_path);
    for (std::size_t r = 0; r < cov_t.rows.size(); ++r) {
      const auto& name = cov_t.rows[r][2];
      if (name.empty()) fail_at(covariates_path, cov_t.lines[r], "empty covariate name");
      if (!cov_index.count(name)) {
        cov_index[name] = static_cast<int>(cov_names.size());
        cov_names.push_back(name);
      }
    }
  }
  const int P = static_cast<int>(cov_names.size());

  PanelDataset data = make_empty_panel(N, T, static_cast<int>(normal.size()), static_cast<int>(binom.size()),
                                       static_cast<int>(count.size()), P);
  data.unit_labels = units;
  data.outcome_labels.clear();
  std::unordered_map<std::string, int> local_index;
  for (std::size_t d = 0; d < normal.size(); ++d) local_index[normal[d]] = static_cast<int>(d);
  for (std::size_t d = 0; d < binom.size(); ++d) local_index[binom[d]] = static_cast<int>(d);
  for (std::size_t d = 0; d < count.size(); ++d) local_index[count[d]] = static_cast<int>(d);
  for (const auto* group : {&normal, &binom, &count}) {
    data.outcome_labels.insert(data.outcome_labels.end(), group->begin(), group->end());
  }

  for (int i = 0; i < N; ++i) {
    const std::int64_t lu = last_untreated[i];
    if (lu != T && (lu < 2 || lu > T)) {
      fail_at(treatment_path, trt_lines[i], "last_untreated_time " + std::to_string(lu) + " outside [2, " +
                                                std::to_string(T) + "]");
    }
    data.last_untreated[i] = static_cast<int>(lu);
  }

  std::set<std::tuple<int, int, std::string>> seen;
  for (std::size_t r = 0; r < out_t.rows.size(); ++r) {
    const auto& row = out_t.rows[r];
    const int line = out_t.lines[r];
    const int i = unit_index[row[0]];
    const int t = static_cast<int>(parse_int(row[1], outcomes_path, line, "time")) - 1;
    if (!seen.emplace(i, t, row[2]).second) {
      fail_at(outcomes_path, line, "duplicate row for (" + row[0] + ", " + row[1] + ", " + row[2] + ")");
    }
    const int d = local_index[row[2]];
    switch (outcome_info[row[2]].family) {
      case Family::Normal: {
        const double y = row[4].empty() ? kNaN : parse_real(row[4], outcomes_path, line, "value");
        if (std::isinf(y)) fail_at(outcomes_path, line, "infinite value");
        data.y[d](i, t) = y;
        break;
      }
      case Family::Binomial: {
        const std::int64_t k = parse_int(row[4], outcomes_path, line, "value");
        const std::int64_t n = parse_int(row[5], outcomes_path, line, "trials");
        if (k < 0 || n < 0) fail_at(outcomes_path, line, "negative count");
        if (k > n) {
          fail_at(outcomes_path, line, "successes " + std::to_string(k) + " exceed trials " + std::to_string(n) +
                                           " at (" + row[0] + ", " + row[1] + ", " + row[2] + ")");
        }
        data.k[d](i, t) = static_cast<int>(k);
        data.n[d](i, t) = static_cast<int>(n);
        break;
      }
      case Family::NegBin: {
        const std::int64_t z = parse_int(row[4], outcomes_path, line, "value");
        if (z < 0) fail_at(outcomes_path, line, "negative count");
        const double w = row[6].empty() ? 1.0 : parse_real(row[6], outcomes_path, line, "offset");
        if (!(w >= 0.0) || !std::isfinite(w)) fail_at(outcomes_path, line, "offset must be a non-negative number");
        data.z[d](i, t) = static_cast<int>(z);
        data.w[d](i, t) = w;
        break;
      }
    }
  }

  if (P > 0) {
    Eigen::MatrixXi filled = Eigen::MatrixXi::Zero(N, T * P);
    for (std::size_t r = 0; r < cov_t.rows.size(); ++r) {
      const auto& row = cov_t.rows[r];
      const int line = cov_t.lines[r];
      auto it = unit_index.find(row[0]);
      if (it == unit_index.end()) fail_at(covariates_path, line, "unknown unit '" + row[0] + "'");
      const std::int64_t t = parse_int(row[1], covariates_path, line, "time");
      if (t < 1 || t > T) fail_at(covariates_path, line, "time outside [1, " + std::to_string(T) + "]");
      const int p = cov_index[row[2]];
      const double v = parse_real(row[3], covariates_path, line, "value");
      if (!std::isfinite(v)) fail_at(covariates_path, line, "covariate values must be finite");
      int& f = filled(it->second, static_cast<int>(t - 1) * P + p);
      if (f) fail_at(covariates_path, line, "duplicate covariate row");
      f = 1;
      data.x[it->second](t - 1, p) = v;
    }
    if (filled.minCoeff() == 0) {
      throw ValidationError(covariates_path + ": covariates must be given for every unit, time and covariate");
    }
  }
  data.validate();
  return data;
}

void write_dataset(const PanelDataset& data, const std::string& outcomes_path, const std::string& treatment_path,
                   const std::string& covariates_path) {
  std::ofstream out = open_out(outcomes_path);
  out << "unit_id,time,outcome,family,value,trials,offset\n";
  for (int o = 0; o < data.D(); ++o) {
    const Family fam = data.family_of(o);
    const int d = data.family_index(o);
    for (int i = 0; i < data.N; ++i) {
      for (int t = 0; t < data.T; ++t) {
        out << data.unit_labels[i] << ',' << t + 1 << ',' << data.outcome_labels[o] << ',' << family_name(fam) << ',';
        switch (fam) {
          case Family::Normal: {
            const double y = data.y[d](i, t);
            out << (std::isnan(y) ? std::string() : format_double(y)) << ",,";
            break;
          }
          case Family::Binomial: out << data.k[d](i, t) << ',' << data.n[d](i, t) << ','; break;
          case Family::NegBin: out << data.z[d](i, t) << ",," << format_double(data.w[d](i, t)); break;
        }
        out << '\n';
      }
    }
  }
  std::ofstream trt = open_out(treatment_path);
  trt << "unit_id,last_untreated_time\n";
  for (int i = 0; i < data.N; ++i) trt << data.unit_labels[i] << ',' << data.last_untreated[i] << '\n';
  if (data.P > 0 && !covariates_path.empty()) {
    std::ofstream cov = open_out(covariates_path);
    cov << "unit_id,time,covariate,value\n";
    for (int i = 0; i < data.N; ++i) {
      for (int t = 0; t < data.T; ++t) {
        for (int p = 0; p < data.P; ++p) {
          cov << data.unit_labels[i] << ',' << t + 1 << ",x" << p + 1 << ',' << format_double(data.x[i](t, p)) << '\n';
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// key=value files

KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail_at(path, lineno, "expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) fail_at(path, lineno, "empty key");
    kv.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return kv;
}

namespace {

double to_real(const std::string& v, const std::string& key, const std::string& source) {
  return parse_real(v, source + " key '" + key + "'", 0, "number");
}

std::int64_t to_int(const std::string& v, const std::string& key, const std::string& source) {
  return parse_int(v, source + " key '" + key + "'", 0, "integer");
}

bool to_bool(const std::string& v, const std::string& key, const std::string& source) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError(source + ": key '" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace

void apply_fit_config(const KeyValues& kv, FitConfig& cfg, const std::string& source) {
  for (const auto& [key, value] : kv) {
    if (key == "max_factors") cfg.max_factors = static_cast<int>(to_int(value, key, source));
    else if (key == "iterations") cfg.iterations = static_cast<int>(to_int(value, key, source));
    else if (key == "thin") cfg.thin = static_cast<int>(to_int(value, key, source));
    else if (key == "burn_in_draws") cfg.burn_in_draws = static_cast<int>(to_int(value, key, source));
    else if (key == "chains") cfg.chains = static_cast<int>(to_int(value, key, source));
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(to_int(value, key, source));
    else if (key == "tpb_shapes") {
      const auto parts = split(value, ' ');
      std::vector<double> vals;
      for (const auto& p : parts) {
        if (!trim(p).empty()) vals.push_back(to_real(p, key, source));
      }
      if (vals.size() != 6) throw ValidationError(source + ": tpb_shapes expects 6 space-separated numbers");
      std::copy(vals.begin(), vals.end(), cfg.tpb_shapes.begin());
    } else if (key == "nu") cfg.nu = to_real(value, key, source);
    else if (key == "a_xi") cfg.a_xi = to_real(value, key, source);
    else if (key == "c_xi") cfg.c_xi = to_real(value, key, source);
    else if (key == "pooled_dispersion") cfg.pooled_dispersion = to_bool(value, key, source);
    else if (key == "smmala_target") cfg.smmala_target = to_real(value, key, source);
    else if (key == "barker_target") cfg.barker_target = to_real(value, key, source);
    else if (key == "smmala_initial_step") cfg.smmala_initial_step = to_real(value, key, source);
    else if (key == "barker_initial_step") cfg.barker_initial_step = to_real(value, key, source);
    else if (key == "sigma2_proposal_sd") cfg.sigma2_proposal_sd = to_real(value, key, source);
    else if (key == "checkpoint_every") cfg.checkpoint_every = static_cast<int>(to_int(value, key, source));
    else if (key == "checkpoint_path") cfg.checkpoint_path = value;
    else throw ValidationError(source + ": unknown key '" + key + "'");
  }
}

void apply_scenario(const KeyValues& kv, SimScenario& sc, const std::string& source) {
  for (const auto& [key, value] : kv) {
    if (key == "N") sc.N = static_cast<int>(to_int(value, key, source));
    else if (key == "T") sc.T = static_cast<int>(to_int(value, key, source));
    else if (key == "t_min") sc.t_min = static_cast<int>(to_int(value, key, source));
    else if (key == "xi_true") sc.xi_true = to_real(value, key, source);
    else if (key == "factor_corr") sc.factor_corr = to_real(value, key, source);
    else if (key == "kappa0") sc.kappa0 = to_real(value, key, source);
    else if (key == "kappa1") sc.kappa1 = to_real(value, key, source);
    else if (key == "kappa2") sc.kappa2 = to_real(value, key, source);
    else if (key == "s1") sc.s1 = to_real(value, key, source);
    else if (key == "s2") sc.s2 = to_real(value, key, source);
    else if (key == "s3") sc.s3 = to_real(value, key, source);
    else if (key == "effect_level") sc.effect_level = static_cast<int>(to_int(value, key, source));
    else if (key == "alpha") sc.effects.alpha = to_real(value, key, source);
    else if (key == "beta") sc.effects.beta = to_real(value, key, source);
    else if (key == "delta") sc.effects.delta = to_real(value, key, source);
    else if (key == "seed") sc.seed = static_cast<std::uint64_t>(to_int(value, key, source));
    else throw ValidationError(source + ": unknown key '" + key + "'");
  }
}

void write_scenario(const SimScenario& sc, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "N = " << sc.N << "\nT = " << sc.T << "\nt_min = " << sc.t_min << "\nxi_true = " << format_double(sc.xi_true)
      << "\nfactor_corr = " << format_double(sc.factor_corr) << "\nkappa0 = " << format_double(sc.kappa0)
      << "\nkappa1 = " << format_double(sc.kappa1) << "\nkappa2 = " << format_double(sc.kappa2)
      << "\ns1 = " << format_double(sc.s1) << "\ns2 = " << format_double(sc.s2) << "\ns3 = " << format_double(sc.s3)
      << "\neffect_level = " << sc.effect_level << "\nalpha = " << format_double(sc.effects.alpha)
      << "\nbeta = " << format_double(sc.effects.beta) << "\ndelta = " << format_double(sc.effects.delta)
      << "\nseed = " << sc.seed << '\n';
}

int thread_cap(int requested) {
  int n = std::max(1, requested);
  if (const char* env = std::getenv("CMFA_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Draws

void write_draws(const PosteriorDraws& draws, const PanelDataset& data, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "draw,parameter,index,value\n";
  for (std::size_t l = 0; l < draws.retained.size(); ++l) {
    const StateSnapshot& s = draws.retained[l];
    auto put = [&](const char* name, const std::string& index, double v) {
      out << l << ',' << name << ',' << index << ',' << format_double(v) << '\n';
    };
    auto idx = [](std::initializer_list<Eigen::Index> parts) {
      std::string r;
      for (auto p : parts) r += (r.empty() ? "" : ":") + std::to_string(p);
      return r;
    };
    put("log_lik", "0", s.log_lik);
    for (Eigen::Index i = 0; i < s.loadings.rows(); ++i) {
      for (Eigen::Index j = 0; j < s.loadings.cols(); ++j) put("loadings", idx({i, j}), s.loadings(i, j));
    }
    for (std::size_t o = 0; o < s.factors.size(); ++o) {
      for (Eigen::Index t = 0; t < s.factors[o].rows(); ++t) {
        for (Eigen::Index j = 0; j < s.factors[o].cols(); ++j) {
          put("factors", idx({static_cast<Eigen::Index>(o), t, j}), s.factors[o](t, j));
        }
      }
    }
    for (Eigen::Index o = 0; o < s.coef.rows(); ++o) {
      for (Eigen::Index p = 0; p < s.coef.cols(); ++p) put("coef", idx({o, p}), s.coef(o, p));
    }
    for (Eigen::Index i = 0; i < s.noise_var.rows(); ++i) {
      for (Eigen::Index d = 0; d < s.noise_var.cols(); ++d) put("noise_var", idx({i, d}), s.noise_var(i, d));
    }
    for (Eigen::Index g = 0; g < s.dispersion.rows(); ++g) {
      for (Eigen::Index d = 0; d < s.dispersion.cols(); ++d) put("dispersion", idx({g, d}), s.dispersion(g, d));
    }
    for (Eigen::Index j = 0; j < s.factor_var.rows(); ++j) {
      for (Eigen::Index o = 0; o < s.factor_var.cols(); ++o) put("factor_var", idx({j, o}), s.factor_var(j, o));
    }
    for (std::size_t j = 0; j < s.dominant_outcome.size(); ++j) {
      put("dominant_outcome", std::to_string(j), s.dominant_outcome[j]);
    }
  }
  (void)data;
}

void write_fit_meta(const PosteriorDraws& draws, const PanelDataset& data, const std::string& path) {
  std::ofstream out = open_out(path);
  const int J = draws.retained.empty() ? draws.config.max_factors
                                       : static_cast<int>(draws.retained.front().loadings.cols());
  out << "key,value\n";
  out << "seed," << draws.seed << '\n';
  out << "chain," << draws.chain << '\n';
  out << "draws," << draws.retained.size() << '\n';
  out << "J," << J << '\n';
  out << "N," << data.N << "\nT," << data.T << "\nD," << data.D() << "\nP," << data.P << '\n';
  out << "pooled_dispersion," << (draws.pooled_dispersion ? 1 : 0) << '\n';
  out << "iterations," << draws.config.iterations << "\nthin," << draws.config.thin << "\nburn_in_draws,"
      << draws.config.burn_in_draws << '\n';
}

PosteriorDraws read_draws(const std::string& draws_path, const std::string& meta_path, const PanelDataset& data) {
  const CsvTable meta = read_csv(meta_path);
  expect_header(meta, {"key", "value"}, meta_path);
  std::map<std::string, std::string> m;
  for (const auto& row : meta.rows) m[row[0]] = row[1];
  auto need = [&](const char* key) {
    auto it = m.find(key);
    if (it == m.end()) throw ValidationError(meta_path + ": missing key '" + key + "'");
    return parse_int(it->second, meta_path, 0, key);
  };
  PosteriorDraws draws;
  draws.seed = static_cast<std::uint64_t>(need("seed"));
  draws.chain = static_cast<std::uint64_t>(need("chain"));
  draws.pooled_dispersion = need("pooled_dispersion") != 0;
  draws.config.iterations = static_cast<int>(need("iterations"));
  draws.config.thin = static_cast<int>(need("thin"));
  draws.config.burn_in_draws = static_cast<int>(need("burn_in_draws"));
  draws.config.seed = draws.seed;
  const int L = static_cast<int>(need("draws"));
  const int J = static_cast<int>(need("J"));
  draws.config.max_factors = J;
  if (need("N") != data.N || need("T") != data.T || need("D") != data.D() || need("P") != data.P) {
    throw ValidationError(meta_path + ": dimensions do not match the stored dataset");
  }
  StateSnapshot shell;
  shell.loadings = Eigen::MatrixXd::Constant(data.N, J, kNaN);
  shell.factors.assign(data.D(), Eigen::MatrixXd::Constant(data.T, J, kNaN));
  shell.coef = Eigen::MatrixXd::Constant(data.D(), data.P, kNaN);
  shell.noise_var = Eigen::MatrixXd::Constant(data.N, data.D1, kNaN);
  shell.dispersion = Eigen::MatrixXd::Constant(draws.pooled_dispersion ? 1 : data.N, data.D3, kNaN);
  shell.factor_var = Eigen::MatrixXd::Constant(J, data.D(), kNaN);
  shell.dominant_outcome.assign(J, -1);
  draws.retained.assign(L, shell);

  const CsvTable t = read_csv(draws_path);
  expect_header(t, {"draw", "parameter", "index", "value"}, draws_path);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const int line = t.lines[r];
    const std::int64_t l = parse_int(row[0], draws_path, line, "draw");
    if (l < 0 || l >= L) fail_at(draws_path, line, "draw index out of range");
    StateSnapshot& s = draws.retained[l];
    std::vector<std::int64_t> ix;
    for (const auto& p : split(row[2], ':')) ix.push_back(parse_int(p, draws_path, line, "index"));
    const double v = parse_real(row[3], draws_path, line, "value");
    auto at = [&](Eigen::MatrixXd& mat, std::size_t a, std::size_t b) -> double& {
      if (ix.size() != 2 || ix[a] < 0 || ix[b] < 0 || ix[a] >= mat.rows() || ix[b] >= mat.cols()) {
        fail_at(draws_path, line, "index out of range");
      }
      return mat(ix[a], ix[b]);
    };
    const std::string& name = row[1];
    if (name == "log_lik") s.log_lik = v;
    else if (name == "loadings") at(s.loadings, 0, 1) = v;
    else if (name == "coef") at(s.coef, 0, 1) = v;
    else if (name == "noise_var") at(s.noise_var, 0, 1) = v;
    else if (name == "dispersion") at(s.dispersion, 0, 1) = v;
    else if (name == "factor_var") at(s.factor_var, 0, 1) = v;
    else if (name == "factors") {
      if (ix.size() != 3 || ix[0] < 0 || ix[0] >= data.D()) fail_at(draws_path, line, "index out of range");
      Eigen::MatrixXd& f = s.factors[ix[0]];
      if (ix[1] < 0 || ix[1] >= f.rows() || ix[2] < 0 || ix[2] >= f.cols()) fail_at(draws_path, line, "index out of range");
      f(ix[1], ix[2]) = v;
    } else if (name == "dominant_outcome") {
      if (ix.size() != 1 || ix[0] < 0 || ix[0] >= J) fail_at(draws_path, line, "index out of range");
      s.dominant_outcome[ix[0]] = static_cast<int>(v);
    } else {
      fail_at(draws_path, line, "unknown parameter '" + name + "'");
    }
  }
  for (int l = 0; l < L; ++l) {
    const StateSnapshot& s = draws.retained[l];
    bool complete = !s.loadings.hasNaN() && !s.coef.hasNaN() && !s.noise_var.hasNaN() && !s.dispersion.hasNaN();
    for (const auto& f : s.factors) complete = complete && !f.hasNaN();
    if (!complete) throw ValidationError(draws_path + ": draw " + std::to_string(l) + " is incomplete");
  }
  return draws;
}

// ---------------------------------------------------------------------------
// Effects

std::vector<std::string> effect_file_names() {
  return {"effects.csv",      "effects_unit_time.csv", "effects_unit.csv",      "effects_time.csv",
          "effects_overall.csv", "ranks.csv",          "rank_correlations.csv"};
}

void write_effects(const EffectReport& report, const PanelDataset& data, const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto path = [&](const char* name) { return (fs::path(out_dir) / name).string(); };
  auto summary = [](const Summary& s) {
    return format_double(s.mean) + ',' + format_double(s.lo) + ',' + format_double(s.hi);
  };
  const auto& units = data.unit_labels;
  const auto& outcomes = data.outcome_labels;

  std::ofstream all = open_out(path("effects.csv"));
  all << "level,unit,time,outcome,estimand,count,mean,lo95,hi95\n";
  std::ofstream ut = open_out(path("effects_unit_time.csv"));
  ut << "unit,time,outcome,estimand,mean,lo95,hi95\n";
  std::ofstream un = open_out(path("effects_unit.csv"));
  un << "unit,outcome,estimand,n_times,mean,lo95,hi95\n";
  std::ofstream tm = open_out(path("effects_time.csv"));
  tm << "time,outcome,estimand,n_units,mean,lo95,hi95\n";
  std::ofstream ov = open_out(path("effects_overall.csv"));
  ov << "outcome,estimand,n_cells,mean,lo95,hi95\n";
  for (const auto& r : report.effects) {
    const std::string unit = r.unit >= 0 ? units[r.unit] : std::string();
    const std::string time = r.time >= 0 ? std::to_string(r.time + 1) : std::string();
    all << level_name(r.level) << ',' << unit << ',' << time << ',' << outcomes[r.outcome] << ',' << r.estimand << ','
        << r.count << ',' << summary(r.summary) << '\n';
    switch (r.level) {
      case Level::UnitTime:
        ut << unit << ',' << time << ',' << outcomes[r.outcome] << ',' << r.estimand << ',' << summary(r.summary) << '\n';
        break;
      case Level::Unit:
        un << unit << ',' << outcomes[r.outcome] << ',' << r.estimand << ',' << r.count << ',' << summary(r.summary) << '\n';
        break;
      case Level::Time:
        tm << time << ',' << outcomes[r.outcome] << ',' << r.estimand << ',' << r.count << ',' << summary(r.summary) << '\n';
        break;
      case Level::Overall:
        ov << outcomes[r.outcome] << ',' << r.estimand << ',' << r.count << ',' << summary(r.summary) << '\n';
        break;
    }
  }
  std::ofstream rk = open_out(path("ranks.csv"));
  rk << "level,unit,time,outcome,estimand,mean,lo95,hi95\n";
  for (const auto& r : report.ranks) {
    rk << level_name(r.level) << ',' << units[r.unit] << ',' << (r.time >= 0 ? std::to_string(r.time + 1) : "") << ','
       << outcomes[r.outcome] << ',' << r.estimand << ',' << summary(r.summary) << '\n';
  }
  std::ofstream rc = open_out(path("rank_correlations.csv"));
  rc << "rank_a,rank_b,n_units,correlation\n";
  for (const auto& c : report.correlations) {
    rc << c.a << ',' << c.b << ',' << c.n_units << ',' << format_double(c.correlation) << '\n';
  }
}

void write_diagnostics(const ChainDiagnostics& diag, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream csv = open_out((fs::path(out_dir) / "diagnostics.csv").string());
  csv << "kind,name,value,mean,sd,ess,r_hat\n";
  for (const auto& a : diag.acceptance) {
    csv << "acceptance," << a.block << ',' << format_double(a.rate) << ",,,,\n";
  }
  for (const auto& [name, step] : diag.final_steps) csv << "step_size," << name << ',' << format_double(step) << ",,,,\n";
  for (const auto& s : diag.scalars) {
    csv << "scalar," << s.name << ",," << format_double(s.mean) << ',' << format_double(s.sd) << ','
        << format_double(s.ess) << ',' << format_double(s.r_hat) << '\n';
  }
  std::ofstream txt = open_out((fs::path(out_dir) / "diagnostics.txt").string());
  txt << "Acceptance rates (sampling phase)\n";
  for (const auto& a : diag.acceptance) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "  %-14s %6.3f  (%lld attempts)\n", a.block.c_str(), a.rate,
                  static_cast<long long>(a.attempts));
    txt << buf;
  }
  txt << "Tracked scalars\n";
  for (const auto& s : diag.scalars) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "  %-16s mean %12.5g  sd %10.4g  ess %8.1f  r_hat %6.3f\n", s.name.c_str(), s.mean,
                  s.sd, s.ess, s.r_hat);
    txt << buf;
  }
  for (const auto& f : diag.failures) txt << "warning: " << f << '\n';
}

void write_geweke(const GewekeResult& result, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "statistic,mean_marginal,mean_successive,ess_successive,z\n";
  for (const auto& s : result.stats) {
    out << s.name << ',' << format_double(s.mean_marginal) << ',' << format_double(s.mean_successive) << ','
        << format_double(s.ess_successive) << ',' << format_double(s.z) << '\n';
  }
}

void write_truth(const SimOutput& sim, const std::string& units_path, const std::string& cells_path) {
  std::ofstream u = open_out(units_path);
  u << "unit_id,last_untreated_time,alpha,beta,gamma,delta\n";
  for (const auto& e : sim.unit_effects) {
    u << sim.data.unit_labels[e.unit] << ',' << e.last_untreated << ',' << format_double(e.alpha) << ','
      << format_double(e.beta) << ',' << format_double(e.gamma) << ',' << format_double(e.delta) << '\n';
  }
  std::ofstream c = open_out(cells_path);
  c << "unit_id,time,mu,p,q\n";
  for (int i = 0; i < sim.data.N; ++i) {
    for (int t = 0; t < sim.data.T; ++t) {
      c << sim.data.unit_labels[i] << ',' << t + 1 << ',' << format_double(sim.truth.mu(i, t)) << ','
        << format_double(sim.truth.p(i, t)) << ',' << format_double(sim.truth.q(i, t)) << '\n';
    }
  }
}

}  // namespace cmfa
