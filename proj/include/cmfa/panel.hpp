#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cmfa {

enum class Family { Normal, Binomial, NegBin };

const char* family_name(Family f);
Family parse_family(const std::string& s);

/// Mixed-type panel: N units, T periods, D1 normal, D2 binomial and D3
/// count outcomes, P covariates.
///
/// Every array is dense over (unit, time). A cell that carries no
/// information is encoded as NaN (normal), n = 0 (binomial) or w = 0
/// (count). Times are stored 0-based; unit i is untreated for t < last_untreated[i].
struct PanelDataset {
  int N = 0;
  int T = 0;
  int D1 = 0;
  int D2 = 0;
  int D3 = 0;
  int P = 0;

  std::vector<Eigen::MatrixXd> y;       // D1 entries, N x T
  std::vector<Eigen::MatrixXi> k;       // D2 entries, N x T successes
  std::vector<Eigen::MatrixXi> n;       // D2 entries, N x T trials
  std::vector<Eigen::MatrixXi> z;       // D3 entries, N x T counts
  std::vector<Eigen::MatrixXd> w;       // D3 entries, N x T offsets
  std::vector<Eigen::MatrixXd> x;       // N entries, T x P covariates
  std::vector<int> last_untreated;      // T_i in 1..T; T means control
  std::vector<std::string> unit_labels;
  std::vector<std::string> outcome_labels;  // D entries: normal, binomial, count

  int D() const { return D1 + D2 + D3; }
  bool is_control(int i) const { return last_untreated[i] == T; }
  bool is_pre(int i, int t) const { return t < last_untreated[i]; }
  int n_control() const;
  int n_treated() const { return N - n_control(); }
  int T_min() const;

  Family family_of(int outcome) const;
  // Index within the outcome's own family.
  int family_index(int outcome) const;
  int outcome_index(Family f, int d) const;

  /// Throws ValidationError if any structural invariant fails.
  void validate() const;
};

/// Allocates an all-missing panel (y = NaN, n = k = z = 0, w = 0) with
/// every unit marked as control and default labels.
PanelDataset make_empty_panel(int N, int T, int D1, int D2, int D3, int P = 0);

/// Keeps only the listed outcomes (global indices), preserving family order.
PanelDataset select_outcomes(const PanelDataset& data, const std::vector<int>& outcomes);

/// Reorders units: unit r of the result is unit order[r] of the input.
PanelDataset permute_units(const PanelDataset& data, const std::vector<int>& order);

bool operator==(const PanelDataset& a, const PanelDataset& b);

}  // namespace cmfa
