#include "dis/models/sinusoid.hpp"

#include "dis/errors.hpp"

#include <cmath>
#include <numbers>

namespace dis::models {

SinusoidTarget::SinusoidTarget(double sigma0) : sigma0_(sigma0) { require(sigma0 > 0.0, "sigma0 must be positive"); }

TemperTerms SinusoidTarget::terms(const Eigen::Ref<const Vector>& theta) const {
  require(theta.size() == 2, "sinusoid target is two-dimensional");
  const double var = sigma0_ * sigma0_;
  TemperTerms t;
  t.base = -std::log(2.0 * std::numbers::pi * var) - theta.squaredNorm() / (2.0 * var);
  if (std::abs(theta[0]) < std::numbers::pi) {
    const double r = theta[1] - std::sin(theta[0]);
    t.tempered = -100.0 * r * r;
  } else {
    t.tempered = kNegInf;
  }
  return t;
}

double SinusoidTarget::combine(const TemperTerms& t, double eps) const {
  if (eps >= 1.0) return t.base;
  if (t.tempered == kNegInf) return kNegInf;
  return eps * t.base + (1.0 - eps) * t.tempered;
}

Batch SinusoidTarget::sample_initial(Rng& rng, std::size_t n) const {
  return sigma0_ * standard_normal_matrix(rng, 2, static_cast<Eigen::Index>(n));
}

}  // namespace dis::models
