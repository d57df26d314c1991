#pragma once

#include "dis/montecarlo.hpp"
#include "dis/optim.hpp"
#include "dis/target.hpp"
#include "dis/types.hpp"

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace dis {

struct DisConfig {
  std::size_t n_samples = 4000;     // N
  std::size_t target_ess = 2000;    // M
  std::size_t batch_size = 100;     // n
  std::size_t batches = 0;          // B; 0 means M / n
  double eps0 = 1.0;
  double target_eps = 0.0;          // stop once ε <= target_eps
  std::size_t max_iters = 1000;
  double max_wall_seconds = 0.0;    // 0 disables the wall-time stop
  AdamSettings adam;
  double l1_strength = 1e-4;
  double truncation_target = 0.1;
  std::optional<double> eps_floor;  // defaults to the target's domain floor
  double ess_fallback_fraction = 0.9;
  std::size_t max_retries = 3;
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  std::size_t effective_batches() const;
  void validate() const;
};

nlohmann::json to_json(const DisConfig& c);
DisConfig dis_config_from_json(const nlohmann::json& j, const DisConfig& defaults = {});

struct TraceRow {
  std::size_t t = 0;
  double eps = 0.0;
  double eps_prev = 0.0;
  double ess_prev = 0.0;     // ESS of this iteration's sample at ε_{t-1}
  double ess = 0.0;          // ... and at ε_t
  double log_omega = 0.0;    // log of the truncation threshold
  double max_norm_weight = 0.0;
  double log_z_hat = 0.0;
  double mean_log_q = 0.0;   // mean log q over the resampled training points
  double grad_norm = 0.0;    // mean over batches of the ascent-direction norm
  double objective = 0.0;    // self-normalised estimate of E_{p_ε}[log q] at iteration start
  std::size_t retries = 0;
  double wall_seconds = 0.0; // cumulative since the run started
};

/// `include_timing` = false drops wall-clock fields so that traces are reproducible byte for byte.
nlohmann::json to_json(const TraceRow& r, bool include_timing = true);

using DisTrace = std::vector<TraceRow>;

/// ESS(ε) for a fixed sample with cached target terms.
double ess_at(const std::vector<TemperTerms>& terms, const Vector& log_q, const TemperedTarget& target, double eps);

struct EpsSelection {
  double eps = 0.0;
  double ess_prev = 0.0;
  double ess = 0.0;
  std::size_t bisection_steps = 0;
};

/// Keeps ε_{t-1} when ESS(ε_{t-1}) < M; otherwise bisects on [floor, ε_{t-1}] for the smallest ε
/// with ESS(ε) >= M. Never returns more than ε_{t-1}.
EpsSelection select_epsilon(const std::vector<TemperTerms>& terms, const Vector& log_q, const TemperedTarget& target,
                            double eps_prev, double target_ess, double floor, double fallback_fraction = 0.9);

/// Target terms for every column, evaluated in parallel with a fixed chunking.
std::vector<TemperTerms> evaluate_terms(const TemperedTarget& target, const Batch& xis, std::size_t threads);

/// Draws N points from q and weights them against p_ε (untruncated and auto-truncated).
mc::WeightedSample weighted_sample(const Proposal& q, const TemperedTarget& target, double eps, std::size_t n,
                                   double truncation_target, Rng& rng);
mc::WeightedSample weight_draws(ProposalDraw draw, const std::vector<TemperTerms>& terms,
                                const TemperedTarget& target, double eps, double truncation_target);

/// A gradient exp(log_scale) * direction, kept split because weights span many orders of magnitude.
struct ScaledGradient {
  Vector direction;
  double log_scale = 0.0;
};

/// g1 = (1/N) Σ w_i ∇log q(ξ_i).
ScaledGradient gradient_g1(const Proposal& q, const mc::WeightedSample& s);
/// g2 = (1/N) Σ w̃_i ∇log q(ξ_i).
ScaledGradient gradient_g2(const Proposal& q, const mc::WeightedSample& s);
/// g3 = S/(nN) Σ_j ∇log q(ξ̃_j) over n resampled points.
ScaledGradient gradient_g3(const Proposal& q, const mc::WeightedSample& s, std::size_t n, Rng& rng);

struct IterationOutcome {
  TraceRow row;
};

/// Mutable optimisation state: current ε, optimiser moments, RNG stream.
struct DisState {
  double eps = 1.0;
  std::size_t t = 0;
  Adam adam;
  Rng rng;
};

/// One outer iteration: sample from the frozen proposal, choose ε_t, truncate, then B
/// resampled Adam steps. Degenerate samples are redrawn up to config.max_retries times.
IterationOutcome dis_iteration(Proposal& q, const TemperedTarget& target, const DisConfig& config, DisState& state);

struct PretrainConfig {
  std::size_t batch_size = 100;
  double ess_fraction = 0.5;
  std::size_t max_steps = 2000;
  std::size_t check_every = 10;
  std::size_t check_samples = 4000;
  AdamSettings adam;
};

nlohmann::json to_json(const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j, const PretrainConfig& defaults = {});

struct PretrainResult {
  std::size_t steps = 0;
  double ess_fraction = 0.0;
  bool reached_threshold = false;
  std::vector<std::pair<std::size_t, double>> ess_history;  // (step, ESS/N)
};

using PretrainObserver = std::function<void(std::size_t step, const Proposal& q)>;

/// Maximum-likelihood fit of q to exact draws from p_{ε0} until the IS check reaches the ESS threshold.
PretrainResult pretrain(Proposal& q, const TemperedTarget& target, double eps0, const PretrainConfig& config, Rng& rng,
                        const PretrainObserver& observer = {});

enum class RunStatus { ReachedTarget, IterationCap, WallTime, Failed };
std::string to_string(RunStatus s);

struct RunResult {
  DisTrace trace;
  mc::WeightedSample final_sample;
  RunStatus status = RunStatus::IterationCap;
  std::string error;
  double wall_seconds = 0.0;
};

using IterationObserver = std::function<void(const TraceRow& row, const Proposal& q)>;

/// Outer loop of distilled importance sampling.
RunResult run(Proposal& q, const TemperedTarget& target, const DisConfig& config,
              const IterationObserver& observer = {});

}  // namespace dis
