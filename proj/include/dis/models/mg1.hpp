#pragma once

#include "dis/target.hpp"

#include <array>
#include <vector>

namespace dis::models {

/// Standard normal CDF and its log, the latter clamped at the smallest positive normal double.
double normal_cdf(double x);
double log_normal_cdf_clamped(double x);

struct Mg1Simulation {
  std::array<double, 3> theta{};  // (arrival rate, min service, max service)
  Vector inter_departures;        // y, length m
};

/// Lindley recursion: d_i = s_i + max(0, A_i - D_{i-1}).
Vector mg1_inter_departures(const Vector& inter_arrivals, const Vector& service_times);

/// Parameters from standard-normal inputs: θ1 = Φ(ϑ1)/3, θ2 = 10Φ(ϑ2), θ3 = θ2 + 10Φ(ϑ3).
std::array<double, 3> mg1_theta(const Eigen::Ref<const Vector>& vartheta);

/// Simulator on the reparameterised space ξ = (ϑ1..ϑ3, x1..x2m).
Mg1Simulation mg1_simulate(const Eigen::Ref<const Vector>& xi);

/// Same recursion for explicit θ and latent normals x (length 2m).
Vector mg1_simulate_theta(const std::array<double, 3>& theta, const Eigen::Ref<const Vector>& latents);

/// ABC-style tempering: log p̃_ε(ξ) = log N(ξ; 0, I) − ‖y(ξ) − y0‖² / (2ε²).
class Mg1Target final : public TemperedTarget {
 public:
  explicit Mg1Target(Vector observed, double eps_floor = 1e-6);

  std::string name() const override { return "mg1"; }
  std::size_t dim() const override { return 3 + 2 * observations(); }
  EpsDomain eps_domain() const override;

  /// base = log N(ξ; 0, I), tempered = d(ξ)².
  TemperTerms terms(const Eigen::Ref<const Vector>& xi) const override;
  double combine(const TemperTerms& t, double eps) const override;

  /// (θ1, θ2, θ3) from the first three coordinates.
  Vector parameters(const Eigen::Ref<const Vector>& xi) const override;
  std::size_t parameter_dim() const override { return 3; }

  std::size_t observations() const noexcept { return static_cast<std::size_t>(observed_.size()); }
  const Vector& observed() const noexcept { return observed_; }

 private:
  Vector observed_;
  double eps_floor_;
};

}  // namespace dis::models
