#include "cmfa/panel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cmfa/error.hpp"

namespace cmfa {

const char* family_name(Family f) {
  switch (f) {
    case Family::Normal: return "normal";
    case Family::Binomial: return "binomial";
    case Family::NegBin: return "negbin";
  }
  return "unknown";
}

Family parse_family(const std::string& s) {
  if (s == "normal") return Family::Normal;
  if (s == "binomial") return Family::Binomial;
  if (s == "negbin") return Family::NegBin;
  throw ValidationError("unknown family '" + s + "'");
}

int PanelDataset::n_control() const {
  return static_cast<int>(std::count(last_untreated.begin(), last_untreated.end(), T));
}

int PanelDataset::T_min() const {
  if (last_untreated.empty()) return T;
  return *std::min_element(last_untreated.begin(), last_untreated.end());
}

Family PanelDataset::family_of(int outcome) const {
  if (outcome < D1) return Family::Normal;
  if (outcome < D1 + D2) return Family::Binomial;
  return Family::NegBin;
}

int PanelDataset::family_index(int outcome) const {
  if (outcome < D1) return outcome;
  if (outcome < D1 + D2) return outcome - D1;
  return outcome - D1 - D2;
}

int PanelDataset::outcome_index(Family f, int d) const {
  switch (f) {
    case Family::Normal: return d;
    case Family::Binomial: return D1 + d;
    case Family::NegBin: return D1 + D2 + d;
  }
  return -1;
}

namespace {

std::string cell(int i, int t, int d) {
  return "(unit " + std::to_string(i) + ", time " + std::to_string(t + 1) + ", outcome " +
         std::to_string(d) + ")";
}

}  // namespace

void PanelDataset::validate() const {
  if (N < 0 || T < 1 || D1 < 0 || D2 < 0 || D3 < 0 || P < 0) {
    throw ValidationError("panel: invalid dimensions");
  }
  auto check_shape = [&](const auto& mats, int count, const char* what) {
    if (static_cast<int>(mats.size()) != count) {
      throw ValidationError(std::string("panel: wrong number of ") + what + " arrays");
    }
    for (const auto& m : mats) {
      if (m.rows() != N || m.cols() != T) {
        throw ValidationError(std::string("panel: ") + what + " array has wrong shape");
      }
    }
  };
  check_shape(y, D1, "y");
  check_shape(k, D2, "k");
  check_shape(n, D2, "n");
  check_shape(z, D3, "z");
  check_shape(w, D3, "w");
  if (static_cast<int>(x.size()) != N) throw ValidationError("panel: covariates must have N entries");
  for (const auto& xi : x) {
    if (xi.rows() != T || xi.cols() != P) throw ValidationError("panel: covariate shape mismatch");
  }
  if (static_cast<int>(last_untreated.size()) != N) {
    throw ValidationError("panel: last_untreated must have N entries");
  }
  if (static_cast<int>(unit_labels.size()) != N) throw ValidationError("panel: unit_labels size");
  if (static_cast<int>(outcome_labels.size()) != D()) throw ValidationError("panel: outcome_labels size");
  for (int i = 0; i < N; ++i) {
    if (last_untreated[i] < 1 || last_untreated[i] > T) {
      throw ValidationError("panel: last untreated time out of range for unit " + unit_labels[i]);
    }
  }
  for (int d = 0; d < D2; ++d) {
    for (int i = 0; i < N; ++i) {
      for (int t = 0; t < T; ++t) {
        if (n[d](i, t) < 0 || k[d](i, t) < 0) throw ValidationError("panel: negative count at " + cell(i, t, d));
        if (k[d](i, t) > n[d](i, t)) throw ValidationError("panel: k > n at " + cell(i, t, d));
      }
    }
  }
  for (int d = 0; d < D3; ++d) {
    for (int i = 0; i < N; ++i) {
      for (int t = 0; t < T; ++t) {
        if (z[d](i, t) < 0) throw ValidationError("panel: negative count at " + cell(i, t, d));
        if (!(w[d](i, t) >= 0.0) || !std::isfinite(w[d](i, t))) {
          throw ValidationError("panel: invalid offset at " + cell(i, t, d));
        }
      }
    }
  }
}

PanelDataset make_empty_panel(int N, int T, int D1, int D2, int D3, int P) {
  PanelDataset p;
  p.N = N;
  p.T = T;
  p.D1 = D1;
  p.D2 = D2;
  p.D3 = D3;
  p.P = P;
  p.y.assign(D1, Eigen::MatrixXd::Constant(N, T, std::numeric_limits<double>::quiet_NaN()));
  p.k.assign(D2, Eigen::MatrixXi::Zero(N, T));
  p.n.assign(D2, Eigen::MatrixXi::Zero(N, T));
  p.z.assign(D3, Eigen::MatrixXi::Zero(N, T));
  p.w.assign(D3, Eigen::MatrixXd::Zero(N, T));
  p.x.assign(N, Eigen::MatrixXd::Zero(T, P));
  p.last_untreated.assign(N, T);
  for (int i = 0; i < N; ++i) p.unit_labels.push_back("u" + std::to_string(i + 1));
  for (int d = 0; d < D1; ++d) p.outcome_labels.push_back("normal" + std::to_string(d + 1));
  for (int d = 0; d < D2; ++d) p.outcome_labels.push_back("binomial" + std::to_string(d + 1));
  for (int d = 0; d < D3; ++d) p.outcome_labels.push_back("count" + std::to_string(d + 1));
  return p;
}

PanelDataset select_outcomes(const PanelDataset& data, const std::vector<int>& outcomes) {
  std::vector<int> sorted = outcomes;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  PanelDataset out = data;
  out.y.clear();
  out.k.clear();
  out.n.clear();
  out.z.clear();
  out.w.clear();
  out.outcome_labels.clear();
  out.D1 = out.D2 = out.D3 = 0;
  for (int o : sorted) {
    if (o < 0 || o >= data.D()) throw ValidationError("select_outcomes: index out of range");
    const int d = data.family_index(o);
    switch (data.family_of(o)) {
      case Family::Normal:
        out.y.push_back(data.y[d]);
        ++out.D1;
        break;
      case Family::Binomial:
        out.k.push_back(data.k[d]);
        out.n.push_back(data.n[d]);
        ++out.D2;
        break;
      case Family::NegBin:
        out.z.push_back(data.z[d]);
        out.w.push_back(data.w[d]);
        ++out.D3;
        break;
    }
    out.outcome_labels.push_back(data.outcome_labels[o]);
  }
  return out;
}

PanelDataset permute_units(const PanelDataset& data, const std::vector<int>& order) {
  if (static_cast<int>(order.size()) != data.N) throw ValidationError("permute_units: bad order");
  PanelDataset out = data;
  auto rows = [&](const auto& src, auto& dst) {
    for (int r = 0; r < data.N; ++r) dst.row(r) = src.row(order[r]);
  };
  for (int d = 0; d < data.D1; ++d) rows(data.y[d], out.y[d]);
  for (int d = 0; d < data.D2; ++d) {
    rows(data.k[d], out.k[d]);
    rows(data.n[d], out.n[d]);
  }
  for (int d = 0; d < data.D3; ++d) {
    rows(data.z[d], out.z[d]);
    rows(data.w[d], out.w[d]);
  }
  for (int r = 0; r < data.N; ++r) {
    out.x[r] = data.x[order[r]];
    out.last_untreated[r] = data.last_untreated[order[r]];
    out.unit_labels[r] = data.unit_labels[order[r]];
  }
  return out;
}

namespace {

bool same_real(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double u = a.data()[i];
    const double v = b.data()[i];
    if (!(u == v || (std::isnan(u) && std::isnan(v)))) return false;
  }
  return true;
}

template <typename V>
bool same_all(const V& a, const V& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if constexpr (std::is_same_v<typename V::value_type, Eigen::MatrixXd>) {
      if (!same_real(a[i], b[i])) return false;
    } else {
      if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols() || a[i] != b[i]) return false;
    }
  }
  return true;
}

}  // namespace

bool operator==(const PanelDataset& a, const PanelDataset& b) {
  return a.N == b.N && a.T == b.T && a.D1 == b.D1 && a.D2 == b.D2 && a.D3 == b.D3 && a.P == b.P &&
         same_all(a.y, b.y) && same_all(a.k, b.k) && same_all(a.n, b.n) && same_all(a.z, b.z) &&
         same_all(a.w, b.w) && same_all(a.x, b.x) && a.last_untreated == b.last_untreated &&
         a.unit_labels == b.unit_labels && a.outcome_labels == b.outcome_labels;
}

}  // namespace cmfa
