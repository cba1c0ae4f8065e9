#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cmfa/model.hpp"
#include "cmfa/panel.hpp"
#include "cmfa/rng.hpp"
#include "cmfa/state.hpp"

namespace cmfa {

/// Stream identifiers for each block of the sweep. Every random draw made
/// inside a block for entity e at iteration it comes from
/// RngStream(seed, stream_key({chain, it, block, e})).
enum class Block : std::uint64_t {
  Init = 1,
  Omega,
  Crt,
  NormalFactor,
  NormalCoef,
  BinomialFactor,
  BinomialCoef,
  CountFactor,
  CountCoef,
  Loadings,
  NoiseVar,
  Dispersion,
  DispersionRate,
  Shrinkage,
  FactorVar,
  Prior,
  Data,
  Predict,
};

struct BlockStats {
  std::int64_t attempts = 0;
  std::int64_t accepts = 0;
  double rate() const { return attempts > 0 ? static_cast<double>(accepts) / attempts : 0.0; }
  void add(bool accepted) {
    ++attempts;
    accepts += accepted;
  }
};

/// Metropolis acceptance counters, sampling phase only.
struct AcceptanceStats {
  BlockStats loadings;
  BlockStats count_factor;
  BlockStats count_coef;
  BlockStats noise_var;
  BlockStats dispersion;
};

struct SweepContext {
  std::uint64_t seed = 1;
  std::uint64_t chain = 0;
  std::int64_t iteration = 0;
  bool adapt = false;  // Robbins-Monro step tuning active (burn-in)
  AcceptanceStats* stats = nullptr;

  RngStream stream(Block block, std::uint64_t entity) const {
    return RngStream(seed, stream_key({chain, static_cast<std::uint64_t>(iteration),
                                       static_cast<std::uint64_t>(block), entity}));
  }
};

// Individual blocks of the sweep, in the order gibbs_sweep runs them.
void update_omega(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);
void update_L(LatentState& s, const PanelDataset& data, const SweepContext& ctx);
void update_f(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);
void update_g(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);
void update_eta1(LatentState& s, const PanelDataset& data, const SweepContext& ctx);
void update_eta2(LatentState& s, const PanelDataset& data, const SweepContext& ctx);
void update_h(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);
void update_eta3(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);
void update_lambda(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);
void update_sigma2(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);
void update_xi(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);
void update_shrinkage(LatentState& s, const FitConfig& cfg, const SweepContext& ctx);
void update_M_and_v(LatentState& s, const PanelDataset& data, const SweepContext& ctx);

/// One full iteration of the block sampler.
void gibbs_sweep(LatentState& s, const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);

/// One SMMALA Metropolis step on `x` targeting `target` with step size eps.
/// Returns the acceptance probability; x is replaced by the proposal when
/// accepted (reported through `accepted`).
double smmala_step(const PoissonGaussianTarget& target, Eigen::VectorXd& x, double eps,
                   RngStream& rng, bool& accepted, SamplerMutation mutation = SamplerMutation::None);

/// Robbins-Monro update of a log step size toward a target acceptance rate.
double adapt_step(double step, double accept_prob, double target, std::int64_t iteration);

/// log of the integral over v in (0,1] of the N(0, v) density of a length-T
/// vector with sum of squares S. Requires T >= 3.
double log_marginal_uniform_variance(double S, int T);

// Prior draw of every model parameter (augmentation left at zero).
LatentState sample_prior_state(const PanelDataset& data, const FitConfig& cfg, const SweepContext& ctx);

/// Replaces every pre-intervention observation with a draw from the model
/// given the state, keeping n, w, covariates and missingness fixed.
void simulate_outcomes(const LatentState& s, PanelDataset& data, const SweepContext& ctx);

LatentState init_state(const PanelDataset& data, const FitConfig& cfg, std::uint64_t chain = 0);

/// Parameters kept for each retained draw.
struct StateSnapshot {
  Eigen::MatrixXd loadings;
  std::vector<Eigen::MatrixXd> factors;
  Eigen::MatrixXd coef;
  Eigen::MatrixXd noise_var;
  Eigen::MatrixXd dispersion;
  Eigen::MatrixXd factor_var;
  std::vector<int> dominant_outcome;
  double log_lik = 0.0;
};

StateSnapshot snapshot(const LatentState& s, double log_lik);

struct StepSummary {
  double loadings_mean = 0.0;
  double count_factor_mean = 0.0;
  double count_coef_mean = 0.0;
  double dispersion_mean = 0.0;
};

struct PosteriorDraws {
  std::vector<StateSnapshot> retained;
  AcceptanceStats acceptance;
  StepSummary final_steps;
  FitConfig config;
  std::uint64_t seed = 0;
  std::uint64_t chain = 0;
  bool pooled_dispersion = false;
};

/// Runs one chain: burn-in with step adaptation, then sampling with frozen
/// steps. Units are processed in label order internally, so relabelling the
/// input permutes the output identically.
PosteriorDraws run_chain(const PanelDataset& data, const FitConfig& cfg, std::uint64_t chain = 0,
                         const std::string& resume_from = {});

/// Runs cfg.chains independent chains (chain ids 0..chains-1), using up to
/// `threads` worker threads.
std::vector<PosteriorDraws> run_chains(const PanelDataset& data, const FitConfig& cfg, int threads = 1);

/// Concatenates the retained draws of several chains.
PosteriorDraws pool_chains(const std::vector<PosteriorDraws>& chains);

// Binary checkpoint ("CMFA1" magic) holding the state, iteration counter
// and draws retained so far.
struct Checkpoint {
  std::int64_t next_iteration = 0;
  LatentState state;
  PosteriorDraws draws;
};
void write_checkpoint(const std::string& path, const Checkpoint& cp);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace cmfa
