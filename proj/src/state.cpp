#include "cmfa/state.hpp"

#include <cmath>
#include <sstream>

#include "cmfa/error.hpp"

namespace cmfa {

void FitConfig::validate() const {
  if (max_factors < 1) throw ValidationError("config: max_factors must be positive");
  if (iterations < 1 || thin < 1 || burn_in_draws < 0 || chains < 1) {
    throw ValidationError("config: iterations, thin and chains must be positive");
  }
  if (iterations % thin != 0) throw ValidationError("config: iterations must be divisible by thin");
  if (burn_in_draws >= iterations / thin) {
    throw ValidationError("config: burn_in_draws must be smaller than iterations/thin");
  }
  for (double s : tpb_shapes) {
    if (!(s > 0)) throw ValidationError("config: TPB shapes must be positive");
  }
  if (!(nu > 0) || !(a_xi > 0) || !(c_xi > 0)) throw ValidationError("config: nu, a_xi, c_xi must be positive");
  if (!(smmala_target > 0 && smmala_target < 1) || !(barker_target > 0 && barker_target < 1)) {
    throw ValidationError("config: acceptance targets must lie in (0,1)");
  }
  if (!(sigma2_proposal_sd > 0)) throw ValidationError("config: sigma2_proposal_sd must be positive");
}

LatentState make_state_shell(const PanelDataset& data, const FitConfig& config) {
  const int J = config.max_factors;
  const int D = data.D();
  LatentState s;
  s.J = J;
  s.pooled_dispersion = config.pooled_dispersion;
  s.loadings = Eigen::MatrixXd::Zero(data.N, J);
  s.factors.assign(D, Eigen::MatrixXd::Zero(data.T, J));
  s.coef = Eigen::MatrixXd::Zero(D, data.P);
  s.noise_var = Eigen::MatrixXd::Ones(data.N, data.D1);
  s.dispersion = Eigen::MatrixXd::Constant(config.pooled_dispersion ? 1 : data.N, data.D3, config.c_xi);
  s.dispersion_rate = config.a_xi / config.c_xi;
  s.loading_var = Eigen::MatrixXd::Ones(data.N, J);
  s.loading_var_rate = Eigen::MatrixXd::Ones(data.N, J);
  s.column_scale = Eigen::VectorXd::Ones(J);
  s.column_scale_rate = Eigen::VectorXd::Ones(J);
  s.global_scale = 1.0;
  s.global_scale_rate = 1.0;
  s.factor_var = Eigen::MatrixXd::Constant(J, D, 0.5);
  s.dominant_outcome.assign(J, 0);
  for (int j = 0; j < J && D > 0; ++j) s.factor_var(j, 0) = 1.0;
  s.pg_aux.assign(data.D2, Eigen::MatrixXd::Zero(data.N, data.T));
  s.crt_aux.assign(data.D3, Eigen::MatrixXi::Zero(data.N, data.T));
  s.lambda_step = Eigen::VectorXd::Constant(data.N, config.smmala_initial_step);
  s.count_factor_step = Eigen::MatrixXd::Constant(data.T, data.D3, config.smmala_initial_step);
  s.count_coef_step = Eigen::VectorXd::Constant(data.D3, config.smmala_initial_step);
  s.barker_step = Eigen::MatrixXd::Constant(s.dispersion.rows(), data.D3, config.barker_initial_step);
  return s;
}

std::string check_state(const LatentState& s, const PanelDataset& data) {
  std::ostringstream err;
  const int D = data.D();
  const int J = s.J;
  if (s.loadings.rows() != data.N || s.loadings.cols() != J) return "loadings shape";
  if (static_cast<int>(s.factors.size()) != D) return "factor count";
  for (const auto& f : s.factors) {
    if (f.rows() != data.T || f.cols() != J) return "factor shape";
    if (!f.allFinite()) return "non-finite factor";
  }
  if (!s.loadings.allFinite()) return "non-finite loading";
  if (s.factor_var.rows() != J || s.factor_var.cols() != D) return "factor_var shape";
  if (static_cast<int>(s.dominant_outcome.size()) != J) return "dominant_outcome size";
  for (int j = 0; j < J; ++j) {
    const int m = s.dominant_outcome[j];
    if (m < 0 || m >= D) return "dominant outcome out of range";
    if (s.factor_var(j, m) != 1.0) {
      err << "factor_var(" << j << ", dominant) != 1";
      return err.str();
    }
    for (int l = 0; l < D; ++l) {
      if (!(s.factor_var(j, l) > 0.0 && s.factor_var(j, l) <= 1.0)) return "factor_var outside (0,1]";
    }
    if (!(s.column_scale(j) > 0.0) || !std::isfinite(s.column_scale(j))) return "zeta outside (0,1)";
  }
  if (!(s.loading_var.array() > 0.0).all() || !s.loading_var.allFinite()) return "phi outside (0,1)";
  if (!(s.global_scale > 0.0) || !std::isfinite(s.global_scale)) return "rho outside (0,1)";
  if (s.noise_var.rows() != data.N || s.noise_var.cols() != data.D1) return "noise_var shape";
  if (!(s.noise_var.array() > 0.0).all() || !(s.noise_var.array() <= 100.0).all()) {
    return "sigma2 outside (0,100]";
  }
  if (!(s.dispersion.array() > 0.0).all() || !s.dispersion.allFinite()) return "xi not positive";
  if (!(s.dispersion_rate > 0.0)) return "b_xi not positive";
  for (int d = 0; d < data.D2; ++d) {
    for (int i = 0; i < data.N; ++i) {
      for (int t = 0; t < data.last_untreated[i]; ++t) {
        const double om = s.pg_aux[d](i, t);
        if (om < 0.0) return "negative omega";
        if ((om == 0.0) != (data.n[d](i, t) == 0)) return "omega zero iff n zero violated";
      }
    }
  }
  for (int d = 0; d < data.D3; ++d) {
    for (int i = 0; i < data.N; ++i) {
      for (int t = 0; t < data.last_untreated[i]; ++t) {
        const int l = s.crt_aux[d](i, t);
        if (l < 0 || l > data.z[d](i, t)) return "CRT count out of range";
      }
    }
  }
  return {};
}

}  // namespace cmfa
