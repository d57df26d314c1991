#pragma once

#include "dis/nn.hpp"
#include "dis/types.hpp"

#include <limits>
#include <memory>
#include <json.hpp>
#include <string>

namespace dis {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// The two ε-dependent pieces of a tempered log-density. How they combine is
/// up to the target's tempering scheme.
struct TemperTerms {
  double base = 0.0;
  double tempered = 0.0;
};

/// Tempering parameter range. Smaller ε means less tempering.
struct EpsDomain {
  double lower = 0.0;      // smallest valid ε (0 when the exact posterior is reachable)
  double upper = 1.0;      // largest meaningful ε
  double floor = 0.0;      // lowest value ε-selection will search down to
};

/// Unnormalised tempered density log p̃_ε(ξ).
class TemperedTarget {
 public:
  virtual ~TemperedTarget() = default;

  virtual std::string name() const = 0;
  virtual std::size_t dim() const = 0;
  virtual EpsDomain eps_domain() const = 0;

  /// ε-independent evaluation; must be pure and thread-safe.
  virtual TemperTerms terms(const Eigen::Ref<const Vector>& xi) const = 0;
  virtual double combine(const TemperTerms& t, double eps) const = 0;

  double log_p_tilde(const Eigen::Ref<const Vector>& xi, double eps) const { return combine(terms(xi), eps); }

  /// Exact draws from p_ε for the initial ε, when available (used by pretraining).
  virtual bool has_initial_sampler() const { return false; }
  virtual Batch sample_initial(Rng& rng, std::size_t n) const;

  /// Model parameters in their natural scale (reported in posterior output).
  virtual Vector parameters(const Eigen::Ref<const Vector>& xi) const { return xi; }
  virtual std::size_t parameter_dim() const { return dim(); }
};

/// Draws from a proposal together with their log-densities.
struct ProposalDraw {
  Batch xis;        // dim x n
  Vector log_q;     // n
};

/// Trainable density q(ξ; φ) with full support.
class Proposal {
 public:
  virtual ~Proposal() = default;

  virtual std::size_t dim() const = 0;
  virtual ProposalDraw sample(Rng& rng, std::size_t n) const = 0;
  virtual Vector log_prob(const Batch& xis) const = 0;

  /// grad += Σ_j coeffs_j ∇φ log q(ξ_j; φ) with ξ held fixed; returns log q(ξ_j; φ).
  virtual Vector accumulate_grad(const Batch& xis, const Vector& coeffs, GradSpan grad) const = 0;

  virtual nn::ParamVector& params() = 0;
  virtual const nn::ParamVector& params() const = 0;

  virtual std::unique_ptr<Proposal> clone() const = 0;

  /// Architecture description; with params() it fully determines the density.
  virtual nlohmann::json architecture() const = 0;

  void set_threads(std::size_t threads) { threads_ = threads == 0 ? 1 : threads; }
  std::size_t threads() const noexcept { return threads_; }

 protected:
  std::size_t threads_ = 1;
};

}  // namespace dis
