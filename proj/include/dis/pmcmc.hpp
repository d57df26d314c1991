#pragma once

#include "dis/models/lorenz.hpp"
#include "dis/types.hpp"

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace dis::pmcmc {

/// State-space model as seen by a bootstrap particle filter.
class StateSpaceModel {
 public:
  virtual ~StateSpaceModel() = default;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t observation_count() const = 0;
  virtual Matrix initial_particles(std::size_t n, Rng& rng) const = 0;
  /// Advances every particle (one per column) from the previous observation time to observation k.
  virtual void propagate(Matrix& particles, std::size_t k, Rng& rng) const = 0;
  virtual double observation_log_density(const Eigen::Ref<const Vector>& x, std::size_t k) const = 0;
};

struct PfResult {
  double log_lik = 0.0;
  bool degenerate = false;  // every weight was zero at some observation
};

/// Bootstrap particle filter with multinomial resampling after every observation.
PfResult pf_loglik(const StateSpaceModel& model, std::size_t n_particles, Rng& rng);

/// The discretised Lorenz SDE at fixed θ, observed through N(x, σ²I).
class LorenzStateSpace final : public StateSpaceModel {
 public:
  LorenzStateSpace(const models::LorenzSpec& spec, const Matrix& observations, Vector theta);
  std::size_t state_dim() const override { return 3; }
  std::size_t observation_count() const override { return spec_->obs_steps.size(); }
  Matrix initial_particles(std::size_t n, Rng& rng) const override;
  void propagate(Matrix& particles, std::size_t k, Rng& rng) const override;
  double observation_log_density(const Eigen::Ref<const Vector>& x, std::size_t k) const override;

 private:
  const models::LorenzSpec* spec_;
  const Matrix* obs_;
  Vector theta_;
  double sigma_;
};

using LogLikEstimator = std::function<double(const Vector& theta, std::size_t n_particles, Rng& rng)>;
using LogPrior = std::function<double(const Vector& theta)>;

struct TuneResult {
  std::size_t n_particles = 0;
  bool achieved = false;
  std::vector<std::pair<std::size_t, double>> sd_table;  // (N_PF, sd of log-lik)
};

/// Smallest candidate whose log-likelihood standard deviation at theta_ref is <= target_sd;
/// the largest candidate (achieved = false) when none qualifies.
TuneResult tune_npf(const LogLikEstimator& loglik, const Vector& theta_ref, const std::vector<std::size_t>& candidates,
                    std::size_t replicates, double target_sd, std::uint64_t seed);

struct PmcmcConfig {
  std::size_t iterations = 20000;
  std::size_t n_particles = 50;
  Matrix proposal_cov;
  Vector initial_theta;
  std::uint64_t seed = 1;
};

struct Chain {
  Matrix thetas;                 // dim x iterations
  Vector log_liks;
  std::vector<bool> accepted;
  double acceptance_rate = 0.0;
  std::size_t likelihood_evaluations = 0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(thetas.cols()); }
};

/// Particle-marginal Metropolis–Hastings with a Gaussian random walk. The likelihood
/// estimate of the current state is stored and reused until a proposal is accepted.
Chain pmcmc_run(const LogLikEstimator& loglik, const LogPrior& log_prior, const PmcmcConfig& config);

/// Posterior covariance estimate from a chain (after discarding `burn_in` draws).
Matrix chain_covariance(const Chain& chain, std::size_t burn_in = 0);
Vector chain_mean(const Chain& chain, std::size_t burn_in = 0);

/// Univariate batch-means effective sample size per coordinate.
Vector batch_means_ess(const Chain& chain, std::size_t burn_in = 0);
inline constexpr const char* kEssMethod = "batch_means_sqrt_n";

/// CSV: iteration, theta_1..theta_d, log_lik, accepted.
void write_chain_csv(std::ostream& out, const Chain& chain);

/// Adapters for the Lorenz model.
LogLikEstimator lorenz_loglik(const models::LorenzSpec& spec, const Matrix& observations);
LogPrior lorenz_log_prior(const models::LorenzSpec& spec);

}  // namespace dis::pmcmc
