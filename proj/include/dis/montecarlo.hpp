#pragma once

#include "dis/types.hpp"

#include <cstddef>
#include <vector>

namespace dis::mc {

/// Importance weights kept as exp(log_offset) * mantissa so that relative weights stay
/// exact across extreme dynamic ranges.
struct Weights {
  Vector mantissa;           // w_i / exp(log_offset), max entry 1 (or all 0)
  double log_offset = 0.0;   // max_i log w_i, -inf when every weight is 0

  std::size_t size() const noexcept { return static_cast<std::size_t>(mantissa.size()); }
  bool degenerate() const { return !(mantissa.sum() > 0.0); }
  Vector normalised() const;
};

/// w_i = exp(log_p_tilde_i - log_q_i). Entries with log_p_tilde = -inf get weight 0.
/// Throws SupportViolation when log_q_i = -inf (or NaN) but the target is positive.
Weights compute_weights(const Vector& log_p_tilde, const Vector& log_q);

struct EssReport {
  double ess = 0.0;            // (Σw)²/Σw², 0 when all weights are 0
  std::size_t n = 0;
  double max_norm_weight = 0.0;
};

EssReport ess(const Vector& w);

struct Truncation {
  Vector w_trunc;        // min(w_i, ω), same scale as the input
  double omega = 0.0;
  double max_norm_weight = 0.0;
  bool feasible = true;  // false when no ω attains the target
};

/// Chooses ω so that max_i w̃_i / Σ w̃ <= target_max_norm. If the raw weights already
/// satisfy the bound ω = max w (no-op); if no ω can, ω = smallest positive weight.
Truncation auto_truncate(const Vector& w, double target_max_norm = 0.1);

/// n multinomial draws of indices with P(j) ∝ w_j.
std::vector<std::size_t> resample(const Vector& w, std::size_t n, Rng& rng);

/// Σ w_i h_i / Σ w_i.
double self_normalised_estimate(const Vector& w, const Vector& h);

/// Standard error of the self-normalised estimate (delta method).
double self_normalised_std_error(const Vector& w, const Vector& h);

/// log((1/N) Σ w_i) for weights in (log_offset, mantissa) form; -inf when all zero.
double log_normalising_constant(const Weights& w);

/// Full IS sample: draws plus raw and truncated weights.
struct WeightedSample {
  Batch xis;
  Vector log_q;
  Vector log_p_tilde;
  Weights weights;
  Truncation truncation;
  double eps = 0.0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(xis.cols()); }
  /// S / exp(log_offset), the truncated weight total in mantissa units.
  double truncated_total() const { return truncation.w_trunc.sum(); }
  double log_z_hat() const { return log_normalising_constant(weights); }
};

}  // namespace dis::mc
