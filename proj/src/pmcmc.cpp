#include "dis/pmcmc.hpp"

#include "dis/errors.hpp"
#include "dis/montecarlo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dis::pmcmc {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

}  // namespace

PfResult pf_loglik(const StateSpaceModel& model, std::size_t n_particles, Rng& rng) {
  require(n_particles >= 2, "a particle filter needs at least two particles");
  PfResult result;
  Matrix particles = model.initial_particles(n_particles, rng);
  Vector log_w(idx(n_particles));
  for (std::size_t k = 0; k < model.observation_count(); ++k) {
    model.propagate(particles, k, rng);
    for (std::size_t j = 0; j < n_particles; ++j) {
      log_w[idx(j)] = model.observation_log_density(particles.col(idx(j)), k);
    }
    const double top = log_w.maxCoeff();
    if (!std::isfinite(top)) {
      result.log_lik = kNegInf;
      result.degenerate = true;
      return result;
    }
    const Vector w = (log_w.array() - top).exp().matrix();
    result.log_lik += top + std::log(w.mean());
    if (k + 1 < model.observation_count()) {
      const auto picks = mc::resample(w, n_particles, rng);
      Matrix next(particles.rows(), particles.cols());
      for (std::size_t j = 0; j < n_particles; ++j) next.col(idx(j)) = particles.col(idx(picks[j]));
      particles = std::move(next);
    }
  }
  return result;
}

LorenzStateSpace::LorenzStateSpace(const models::LorenzSpec& spec, const Matrix& observations, Vector theta)
    : spec_(&spec), obs_(&observations), theta_(std::move(theta)) {
  require(static_cast<std::size_t>(theta_.size()) == spec.param_dim(), "theta has the wrong dimension");
  sigma_ = spec.sigma_of(theta_);
}

Matrix LorenzStateSpace::initial_particles(std::size_t n, Rng&) const {
  Matrix p(3, idx(n));
  p.colwise() = spec_->x0;
  return p;
}

void LorenzStateSpace::propagate(Matrix& particles, std::size_t k, Rng& rng) const {
  const std::size_t from = k == 0 ? 0 : spec_->obs_steps[k - 1];
  const std::size_t to = spec_->obs_steps[k];
  const double sd = std::sqrt(spec_->diffusion * spec_->dt);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index j = 0; j < particles.cols(); ++j) {
    models::State3 x = particles.col(j);
    for (std::size_t i = from; i < to; ++i) {
      models::State3 e{normal(rng), normal(rng), normal(rng)};
      x = x + models::lorenz_drift(x, theta_) * spec_->dt + sd * e;
    }
    particles.col(j) = x;
  }
}

double LorenzStateSpace::observation_log_density(const Eigen::Ref<const Vector>& x, std::size_t k) const {
  if (!x.allFinite() || x.cwiseAbs().maxCoeff() > spec_->guard) return kNegInf;
  const double var = sigma_ * sigma_;
  return -1.5 * (kLog2Pi + std::log(var)) - (obs_->col(idx(k)) - x).squaredNorm() / (2.0 * var);
}

TuneResult tune_npf(const LogLikEstimator& loglik, const Vector& theta_ref, const std::vector<std::size_t>& candidates,
                    std::size_t replicates, double target_sd, std::uint64_t seed) {
  require(replicates >= 2, "need at least two replicates to estimate a standard deviation");
  require(!candidates.empty(), "need at least one candidate particle count");
  require(std::is_sorted(candidates.begin(), candidates.end()), "candidates must be ascending");
  TuneResult result;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    Rng rng = derive_rng(seed, c);
    Vector values(idx(replicates));
    for (std::size_t r = 0; r < replicates; ++r) values[idx(r)] = loglik(theta_ref, candidates[c], rng);
    double sd = std::numeric_limits<double>::infinity();
    if (values.allFinite()) {
      const double mean = values.mean();
      sd = std::sqrt((values.array() - mean).square().sum() / static_cast<double>(replicates - 1));
    }
    result.sd_table.emplace_back(candidates[c], sd);
    if (!result.achieved && sd <= target_sd) {
      result.achieved = true;
      result.n_particles = candidates[c];
      break;
    }
  }
  if (!result.achieved) result.n_particles = candidates.back();
  return result;
}

Chain pmcmc_run(const LogLikEstimator& loglik, const LogPrior& log_prior, const PmcmcConfig& config) {
  const auto d = config.initial_theta.size();
  require(d >= 1, "initial theta is empty");
  require(config.proposal_cov.rows() == d && config.proposal_cov.cols() == d, "proposal covariance has the wrong shape");
  require((config.proposal_cov - config.proposal_cov.transpose()).cwiseAbs().maxCoeff() <=
              1e-12 * std::max(1.0, config.proposal_cov.cwiseAbs().maxCoeff()),
          "proposal covariance must be symmetric");
  Eigen::LLT<Matrix> llt(config.proposal_cov);
  require(llt.info() == Eigen::Success, "proposal covariance must be positive definite");
  const Matrix chol = llt.matrixL();

  Rng rng = derive_rng(config.seed, 0x706d636dULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  Chain chain;
  chain.thetas.resize(d, idx(config.iterations));
  chain.log_liks.resize(idx(config.iterations));
  chain.accepted.assign(config.iterations, false);

  Vector current = config.initial_theta;
  double current_prior = log_prior(current);
  require(std::isfinite(current_prior), "initial theta has zero prior density");
  double current_ll = loglik(current, config.n_particles, rng);
  ++chain.likelihood_evaluations;
  std::size_t accepts = 0;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    Vector z(d);
    for (Eigen::Index k = 0; k < d; ++k) z[k] = normal(rng);
    const Vector proposal = current + chol * z;
    const double prop_prior = log_prior(proposal);
    bool accept = false;
    if (std::isfinite(prop_prior)) {
      const double prop_ll = loglik(proposal, config.n_particles, rng);
      ++chain.likelihood_evaluations;
      const double log_ratio = (prop_ll + prop_prior) - (current_ll + current_prior);
      if (std::isfinite(prop_ll) && (log_ratio >= 0.0 || std::log(uniform(rng)) < log_ratio)) {
        accept = true;
        current = proposal;
        current_prior = prop_prior;
        current_ll = prop_ll;
      } else if (!std::isfinite(current_ll) && std::isfinite(prop_ll)) {
        accept = true;
        current = proposal;
        current_prior = prop_prior;
        current_ll = prop_ll;
      }
    }
    if (accept) ++accepts;
    chain.thetas.col(idx(it)) = current;
    chain.log_liks[idx(it)] = current_ll;
    chain.accepted[it] = accept;
  }
  chain.acceptance_rate = config.iterations > 0 ? static_cast<double>(accepts) / static_cast<double>(config.iterations) : 0.0;
  return chain;
}

Vector chain_mean(const Chain& chain, std::size_t burn_in) {
  require(burn_in < chain.size(), "burn-in exceeds chain length");
  return chain.thetas.rightCols(idx(chain.size() - burn_in)).rowwise().mean();
}

Matrix chain_covariance(const Chain& chain, std::size_t burn_in) {
  require(burn_in + 1 < chain.size(), "chain too short for a covariance estimate");
  const Matrix x = chain.thetas.rightCols(idx(chain.size() - burn_in));
  const Matrix centred = x.colwise() - x.rowwise().mean();
  return centred * centred.transpose() / static_cast<double>(x.cols() - 1);
}

Vector batch_means_ess(const Chain& chain, std::size_t burn_in) {
  require(burn_in < chain.size(), "burn-in exceeds chain length");
  const Matrix x = chain.thetas.rightCols(idx(chain.size() - burn_in));
  const auto n = static_cast<std::size_t>(x.cols());
  const std::size_t batch = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(n))));
  const std::size_t batches = n / batch;
  require(batches >= 2, "chain too short for batch means");
  Vector ess(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Vector row = x.row(r).head(idx(batches * batch));
    const double mean = row.mean();
    const double var = (row.array() - mean).square().sum() / static_cast<double>(row.size() - 1);
    double bm = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const double bmean = row.segment(idx(b * batch), idx(batch)).mean();
      bm += (bmean - mean) * (bmean - mean);
    }
    const double sigma2 = static_cast<double>(batch) * bm / static_cast<double>(batches - 1);
    ess[r] = sigma2 > 0.0 ? static_cast<double>(row.size()) * var / sigma2 : 0.0;
  }
  return ess;
}

void write_chain_csv(std::ostream& out, const Chain& chain) {
  out << "iteration";
  for (Eigen::Index k = 0; k < chain.thetas.rows(); ++k) out << ",theta_" << (k + 1);
  out << ",log_lik,accepted\n";
  out.precision(17);
  for (std::size_t it = 0; it < chain.size(); ++it) {
    out << it;
    for (Eigen::Index k = 0; k < chain.thetas.rows(); ++k) out << ',' << chain.thetas(k, idx(it));
    out << ',' << chain.log_liks[idx(it)] << ',' << (chain.accepted[it] ? 1 : 0) << '\n';
  }
}

LogLikEstimator lorenz_loglik(const models::LorenzSpec& spec, const Matrix& observations) {
  return [&spec, &observations](const Vector& theta, std::size_t n_particles, Rng& rng) {
    LorenzStateSpace model(spec, observations, theta);
    return pf_loglik(model, n_particles, rng).log_lik;
  };
}

LogPrior lorenz_log_prior(const models::LorenzSpec& spec) {
  return [&spec](const Vector& theta) {
    double lp = 0.0;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      if (!(theta[k] > 0.0)) return kNegInf;
      lp += std::log(spec.prior_rate) - spec.prior_rate * theta[k];
    }
    return lp;
  };
}

}  // namespace dis::pmcmc
