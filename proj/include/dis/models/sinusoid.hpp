#pragma once

#include "dis/target.hpp"

namespace dis::models {

/// θ1 ~ U(-π, π), θ2 | θ1 ~ N(sin θ1, 1/200), tempered geometrically toward
/// independent N(0, σ0²) coordinates: p̃_ε = p₁^ε p̃^(1-ε).
class SinusoidTarget final : public TemperedTarget {
 public:
  explicit SinusoidTarget(double sigma0 = 2.0);

  std::string name() const override { return "sinusoid"; }
  std::size_t dim() const override { return 2; }
  EpsDomain eps_domain() const override { return {0.0, 1.0, 0.0}; }

  /// base = log p₁(θ), tempered = log p̃(θ) (−∞ outside |θ1| < π).
  TemperTerms terms(const Eigen::Ref<const Vector>& theta) const override;
  double combine(const TemperTerms& t, double eps) const override;

  bool has_initial_sampler() const override { return true; }
  Batch sample_initial(Rng& rng, std::size_t n) const override;

  double sigma0() const noexcept { return sigma0_; }

 private:
  double sigma0_;
};

}  // namespace dis::models
