#include "dis/models/mg1.hpp"

#include "dis/errors.hpp"
#include "dis/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace dis::models {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double log_normal_cdf_clamped(double x) {
  return std::log(std::max(normal_cdf(x), std::numeric_limits<double>::min()));
}

Vector mg1_inter_departures(const Vector& inter_arrivals, const Vector& service_times) {
  require(inter_arrivals.size() == service_times.size(), "arrival and service vectors differ in length");
  Vector d(inter_arrivals.size());
  double arrival = 0.0;
  double departure = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    arrival += inter_arrivals[i];
    d[i] = service_times[i] + std::max(0.0, arrival - departure);
    departure += d[i];
  }
  return d;
}

std::array<double, 3> mg1_theta(const Eigen::Ref<const Vector>& vartheta) {
  require(vartheta.size() >= 3, "need three reparameterised parameters");
  const double t1 = normal_cdf(vartheta[0]) / 3.0;
  const double t2 = 10.0 * normal_cdf(vartheta[1]);
  const double t3 = t2 + 10.0 * normal_cdf(vartheta[2]);
  return {t1, t2, t3};
}

Vector mg1_simulate_theta(const std::array<double, 3>& theta, const Eigen::Ref<const Vector>& latents) {
  require(latents.size() % 2 == 0, "latent vector must have length 2m");
  const auto m = latents.size() / 2;
  Vector a(m);
  Vector s(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    a[i] = -log_normal_cdf_clamped(latents[i]) / theta[0];
    s[i] = theta[1] + (theta[2] - theta[1]) * normal_cdf(latents[i + m]);
  }
  return mg1_inter_departures(a, s);
}

Mg1Simulation mg1_simulate(const Eigen::Ref<const Vector>& xi) {
  require(xi.size() >= 5 && (xi.size() - 3) % 2 == 0, "M/G/1 input must have length 3 + 2m");
  Mg1Simulation sim;
  sim.theta = mg1_theta(xi.head(3));
  sim.inter_departures = mg1_simulate_theta(sim.theta, xi.tail(xi.size() - 3));
  return sim;
}

Mg1Target::Mg1Target(Vector observed, double eps_floor) : observed_(std::move(observed)), eps_floor_(eps_floor) {
  require(observed_.size() >= 1, "need at least one observation");
  require(eps_floor > 0.0, "M/G/1 epsilon floor must be positive");
}

EpsDomain Mg1Target::eps_domain() const {
  return {0.0, std::numeric_limits<double>::infinity(), eps_floor_};
}

TemperTerms Mg1Target::terms(const Eigen::Ref<const Vector>& xi) const {
  require(static_cast<std::size_t>(xi.size()) == dim(), "M/G/1 input dimension mismatch");
  const auto sim = mg1_simulate(xi);
  TemperTerms t;
  t.base = flow::standard_normal_log_density(xi);
  t.tempered = (sim.inter_departures - observed_).squaredNorm();
  if (!std::isfinite(t.tempered)) t.base = kNegInf;
  return t;
}

double Mg1Target::combine(const TemperTerms& t, double eps) const {
  if (t.base == kNegInf) return kNegInf;
  if (eps <= 0.0) return t.tempered == 0.0 ? t.base : kNegInf;
  if (std::isinf(eps)) return t.base;
  return t.base - t.tempered / (2.0 * eps * eps);
}

Vector Mg1Target::parameters(const Eigen::Ref<const Vector>& xi) const {
  const auto t = mg1_theta(xi.head(3));
  return Vector{{t[0], t[1], t[2]}};
}

}  // namespace dis::models
