#include "dis/errors.hpp"
#include "dis/models/lorenz.hpp"
#include "dis/models/mg1.hpp"
#include "dis/models/sinusoid.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace dis;
using namespace dis::models;

namespace {

constexpr double kPi = std::numbers::pi;

LorenzSpec small_lorenz(bool known_sigma) {
  LorenzSpec s;
  s.steps = 12;
  s.obs_steps = {4, 8, 12};
  if (known_sigma) s.known_sigma = 2.0;
  return s;
}

Matrix fake_observations(const LorenzSpec& s, std::uint64_t seed) {
  Rng rng(seed);
  const Vector theta{{10.0, 28.0, 8.0 / 3.0}};
  const Matrix path = lorenz_simulate_unconditioned(s, theta, rng);
  Matrix obs(3, static_cast<Eigen::Index>(s.obs_steps.size()));
  for (std::size_t k = 0; k < s.obs_steps.size(); ++k) {
    obs.col(static_cast<Eigen::Index>(k)) = path.col(static_cast<Eigen::Index>(s.obs_steps[k]));
  }
  return obs;
}

LorenzProposalArchitecture lorenz_arch(const LorenzSpec& s) {
  LorenzProposalArchitecture a;
  a.theta_flow.dim = s.param_dim();
  a.theta_flow.couplings = 4;
  a.theta_flow.hidden = {8, 8};
  a.theta_flow.permutation = flow::PermutationKind::Random;
  a.theta_flow.permutation_seed = 3;
  a.step_hidden = {16, 16};
  return a;
}

}  // namespace

TEST_CASE("sinusoid examples") {
  SinusoidTarget t(2.0);
  CHECK(t.log_p_tilde(Vector{{0.0, 0.0}}, 0.0) == 0.0);
  CHECK(t.log_p_tilde(Vector{{kPi / 2, 1.0}}, 0.0) == 0.0);
  CHECK(t.log_p_tilde(Vector{{1.0, 1.0}}, 1.0) == doctest::Approx(-std::log(2 * kPi * 4) - 2.0 / 8.0).epsilon(1e-15));
  CHECK(t.log_p_tilde(Vector{{4.0, 0.0}}, 0.5) == kNegInf);
  // At ε = 1 the indicator is ignored.
  CHECK(std::isfinite(t.log_p_tilde(Vector{{4.0, 0.0}}, 1.0)));
  // Conditional N(sin θ1, 1/200): −100 r².
  CHECK(t.log_p_tilde(Vector{{0.3, std::sin(0.3) + 0.1}}, 0.0) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("sinusoid tempering is continuous and hits both ends") {
  SinusoidTarget t(2.0);
  Rng rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int k = 0; k < 200; ++k) {
    const Vector th{{u(rng), u(rng)}};
    const auto terms = t.terms(th);
    CHECK(t.combine(terms, 1.0) == terms.base);
    CHECK(t.combine(terms, 0.0) == terms.tempered);
    const double a = t.combine(terms, 0.4);
    const double b = t.combine(terms, 0.4 + 1e-9);
    CHECK(std::abs(a - b) <= 1e-9 * (std::abs(terms.base) + std::abs(terms.tempered)) + 1e-12);
  }
  Rng s(2);
  const Batch draws = t.sample_initial(s, 50000);
  CHECK(std::abs(std::sqrt(draws.row(0).squaredNorm() / 50000.0) - 2.0) < 0.03);
}

TEST_CASE("M/G/1 parameter map") {
  const auto th = mg1_theta(Vector::Zero(3));
  CHECK(th[0] == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
  CHECK(th[1] == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(th[2] == doctest::Approx(10.0).epsilon(1e-15));

  Rng rng(3);
  std::vector<double> theta1;
  for (int k = 0; k < 100000; ++k) theta1.push_back(mg1_theta(standard_normal_matrix(rng, 3, 1))[0]);
  const double p = oracle::ks_one_sample_p(theta1, [](double x) { return std::clamp(3.0 * x, 0.0, 1.0); });
  CHECK(p > 0.01);
}

TEST_CASE("saturated queue") {
  const Vector s{{2.0, 3.0, 1.5, 4.0}};
  const Vector a{{0.5, 1e-300, 1e-300, 1e-300}};
  const Vector d = mg1_inter_departures(a, s);
  CHECK(d[0] == 2.0 + 0.5);
  for (Eigen::Index i = 1; i < 4; ++i) CHECK(d[i] == s[i]);
}

TEST_CASE("Lindley recursion by hand") {
  // Arrivals 1, 5, 6; services 2, 1, 3. Departures 3, 6, 9.
  const Vector d = mg1_inter_departures(Vector{{1.0, 4.0, 1.0}}, Vector{{2.0, 1.0, 3.0}});
  CHECK(d[0] == 3.0);
  CHECK(d[1] == 3.0);
  CHECK(d[2] == 3.0);
}

TEST_CASE("inter-arrival means follow the rate") {
  // With zero service time the inter-departures are the inter-arrivals.
  Rng rng(4);
  for (double rate : {0.05, 0.1, 0.3}) {
    std::vector<double> gaps;
    for (int k = 0; k < 2000; ++k) {
      const Vector y = mg1_simulate_theta({rate, 0.0, 0.0}, standard_normal_matrix(rng, 40, 1));
      for (Eigen::Index i = 0; i < y.size(); ++i) gaps.push_back(y[i]);
    }
    const double m = oracle::mean(gaps);
    const double se = oracle::sample_sd(gaps) / std::sqrt(static_cast<double>(gaps.size()));
    CHECK(std::abs(m - 1.0 / rate) < 4 * se);
    // Exp(rate): sd equals the mean.
    CHECK(oracle::sample_sd(gaps) == doctest::Approx(1.0 / rate).epsilon(0.03));
  }
}

TEST_CASE("inter-arrival means by theta1 bin under the prior") {
  Rng rng(5);
  const int bins = 4;
  std::vector<std::vector<double>> ratio(bins);
  for (int k = 0; k < 40000; ++k) {
    Vector xi = standard_normal_matrix(rng, 3 + 2 * 10, 1);
    const auto th = mg1_theta(xi.head(3));
    // Zero service time isolates the arrival process.
    const Vector y = mg1_simulate_theta({th[0], 0.0, 0.0}, xi.tail(20));
    const int b = std::min(bins - 1, static_cast<int>(th[0] * 3.0 * bins));
    ratio[static_cast<std::size_t>(b)].push_back(y.mean() * th[0]);
  }
  for (const auto& r : ratio) {
    REQUIRE(r.size() > 1000);
    CHECK(std::abs(oracle::mean(r) - 1.0) < 4 * oracle::sample_sd(r) / std::sqrt(static_cast<double>(r.size())));
  }
}

TEST_CASE("M/G/1 simulator invariants") {
  Rng rng(6);
  for (int k = 0; k < 200; ++k) {
    const Vector xi = standard_normal_matrix(rng, 43, 1) * 2.0;
    const auto a = mg1_simulate(xi);
    const auto b = mg1_simulate(xi);
    CHECK(a.inter_departures == b.inter_departures);
    CHECK(a.inter_departures.size() == 20);
    CHECK(a.inter_departures.minCoeff() >= a.theta[1]);
    CHECK(a.theta[2] >= a.theta[1]);
  }
  // Φ underflow is clamped, not infinite.
  Vector extreme = Vector::Zero(43);
  extreme[3] = -60.0;
  CHECK(mg1_simulate(extreme).inter_departures.allFinite());
}

TEST_CASE("M/G/1 tempered density") {
  Rng rng(7);
  const Vector xi = standard_normal_matrix(rng, 43, 1);
  const Vector y0 = mg1_simulate(xi).inter_departures;
  Mg1Target t(y0);
  const double prior = -0.5 * 43 * std::log(2 * kPi) - 0.5 * xi.squaredNorm();
  CHECK(t.log_p_tilde(xi, 0.5) == doctest::Approx(prior).epsilon(1e-14));

  const Vector other = standard_normal_matrix(rng, 43, 1);
  const double lp_other = -0.5 * 43 * std::log(2 * kPi) - 0.5 * other.squaredNorm();
  const double pen1 = lp_other - t.log_p_tilde(other, 2.0);
  const double pen2 = lp_other - t.log_p_tilde(other, 1.0);
  CHECK(pen1 > 0.0);
  CHECK(pen2 == doctest::Approx(4.0 * pen1).epsilon(1e-12));
  CHECK(t.log_p_tilde(other, 1e8) == doctest::Approx(lp_other).epsilon(1e-10));
  CHECK(t.parameters(other).size() == 3);
  CHECK_THROWS_AS(Mg1Target(Vector::Zero(0)), ContractError);
}

TEST_CASE("Lorenz drift and first deterministic step") {
  const Vector theta{{10.0, 28.0, 8.0 / 3.0}};
  const State3 x0{-30.0, 0.0, 30.0};
  const State3 a = lorenz_drift(x0, theta);
  CHECK(a[0] == doctest::Approx(300.0));
  CHECK(a[1] == doctest::Approx(60.0));
  CHECK(a[2] == doctest::Approx(-80.0));
  LorenzSpec s;
  const Matrix path = lorenz_path_from_noise(s, theta, Matrix::Zero(3, 100), 0.0);
  CHECK(path(0, 1) == doctest::Approx(-24.0));
  CHECK(path(1, 1) == doctest::Approx(1.2));
  CHECK(path(2, 1) == doctest::Approx(28.4));

  CHECK(lorenz_drift(State3::Zero(), Vector{{3.0, 1.0, 7.0}}).norm() == 0.0);
  LorenzSpec origin;
  origin.x0 = State3::Zero();
  CHECK(lorenz_path_from_noise(origin, theta, Matrix::Zero(3, 100), 0.0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("seeded Lorenz paths are reproducible") {
  const LorenzSpec s;
  const Vector theta{{10.0, 28.0, 8.0 / 3.0}};
  Rng a(8), b(8);
  CHECK(lorenz_simulate_unconditioned(s, theta, a) == lorenz_simulate_unconditioned(s, theta, b));
}

TEST_CASE("Lorenz target terms") {
  const auto s = small_lorenz(false);
  LorenzTarget t(s, fake_observations(s, 9));
  Rng rng(10);
  const Vector theta{{9.0, 27.0, 3.0, 1.5}};
  const Matrix noise = standard_normal_matrix(rng, 3, 12);
  const Matrix path = lorenz_path_from_noise(s, theta, noise, s.diffusion);
  Vector xi(t.dim());
  xi.head(4) = theta;
  xi.tail(36) = Eigen::Map<const Vector>(path.data() + 3, 36);
  CHECK(t.path_of(xi) == path);

  // Reparameterisation identity: path density = Gaussian density of the increments / Jacobian.
  const double var = s.diffusion * s.dt;
  double noise_lp = 0.0;
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise_lp += -0.5 * std::log(2 * kPi) - 0.5 * noise.data()[i] * noise.data()[i];
  CHECK(t.log_path_density(theta, path) == doctest::Approx(noise_lp - 18.0 * std::log(var)).epsilon(1e-12));

  const double prior = 4 * std::log(0.1) - 0.1 * theta.sum();
  CHECK(t.log_prior(theta) == doctest::Approx(prior).epsilon(1e-14));
  CHECK(t.log_p_tilde(xi, 1.0) == doctest::Approx(prior + t.log_path_density(theta, path)).epsilon(1e-14));
  const double obs = t.log_observation_density(theta, path);
  CHECK(t.log_p_tilde(xi, 0.25) == doctest::Approx(prior + t.log_path_density(theta, path) + 0.75 * obs).epsilon(1e-13));

  // σ doubled at fixed residuals.
  double r2 = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    r2 += (t.observations().col(static_cast<Eigen::Index>(k)) - path.col(static_cast<Eigen::Index>(s.obs_steps[k]))).squaredNorm();
  }
  Vector theta2 = theta;
  theta2[3] *= 2.0;
  const double expected = obs - 3.0 * 3.0 * std::log(2.0) + r2 * (1.0 / (2 * 1.5 * 1.5) - 1.0 / (2 * 3.0 * 3.0));
  CHECK(t.log_observation_density(theta2, path) == doctest::Approx(expected).epsilon(1e-12));

  Vector bad = xi;
  bad[1] = -1.0;
  CHECK(t.log_p_tilde(bad, 0.0) == kNegInf);
  Vector blown = xi;
  blown[4 + 3 * 5 + 1] = 1001.0;
  CHECK(t.log_p_tilde(blown, 0.0) == kNegInf);
  CHECK(t.log_p_tilde(blown, 1.0) == kNegInf);
}

TEST_CASE("Lorenz initial sampler matches the prior and unconditioned model") {
  const auto s = small_lorenz(true);
  LorenzTarget t(s, fake_observations(s, 11));
  Rng rng(12);
  const Batch draws = t.sample_initial(rng, 4000);
  std::vector<double> th1;
  for (Eigen::Index j = 0; j < draws.cols(); ++j) th1.push_back(draws(0, j));
  CHECK(oracle::ks_one_sample_p(th1, [](double x) { return x <= 0 ? 0.0 : 1.0 - std::exp(-0.1 * x); }) > 0.01);
}

TEST_CASE("gamma transform") {
  CHECK(gamma_transform(0.0) == 10.0);
  CHECK(gamma_transform(-50.0) > 0.0);
  CHECK(gamma_transform(5.0) > gamma_transform(4.0));
}

TEST_CASE("zero step network gives beta = 0 and gamma = 10") {
  const auto s = small_lorenz(true);
  LorenzProposal q(s, fake_observations(s, 13), lorenz_arch(s));
  Rng rng(14);
  for (std::size_t i = 0; i < s.steps; i += 3) {
    const auto [beta, gamma] = q.step_outputs(i, standard_normal_matrix(rng, 3, 1) * 10.0, Vector{{10.0, 28.0, 2.7}});
    CHECK(beta.norm() == 0.0);
    CHECK(gamma == 10.0);
  }
}

TEST_CASE("zero-init proposal reproduces the unconditioned SDE law") {
  LorenzSpec s;  // m = 100
  s.known_sigma = 2.0;
  LorenzProposalArchitecture arch = lorenz_arch(s);
  LorenzProposal q(s, fake_observations(s, 15), arch);
  Rng rng(16);
  const auto draw = q.sample(rng, 10000);
  // Reference: θ = exp(z) from the same zero θ-flow, then the plain simulator. Paths that
  // leave the guard box by step 50 carry zero weight either way and map to one sentinel.
  const double sentinel = 1e300;
  auto tripped = [&](const Matrix& path) {
    return !path.leftCols(51).allFinite() || path.leftCols(51).cwiseAbs().maxCoeff() > s.guard;
  };
  Rng ref(17);
  std::vector<std::vector<double>> a(3), b(3);
  std::size_t n_tripped = 0;
  for (Eigen::Index j = 0; j < draw.xis.cols(); ++j) {
    const Vector theta = standard_normal_matrix(ref, 3, 1).array().exp();
    const Matrix path = lorenz_simulate_unconditioned(s, theta, ref);
    Matrix qpath(3, 101);
    qpath.col(0) = s.x0;
    qpath.rightCols(100) = Eigen::Map<const Matrix>(draw.xis.col(j).data() + 3, 3, 100);
    const bool tq = tripped(qpath);
    n_tripped += tq;
    for (int c = 0; c < 3; ++c) {
      a[static_cast<std::size_t>(c)].push_back(tq ? sentinel : qpath(c, 50));
      b[static_cast<std::size_t>(c)].push_back(tripped(path) ? sentinel : path(c, 50));
    }
  }
  CHECK(n_tripped < 5000);
  for (int c = 0; c < 3; ++c) CHECK(oracle::ks_two_sample_p(a[static_cast<std::size_t>(c)], b[static_cast<std::size_t>(c)]) > 0.01);
}

TEST_CASE("zero step network: weights at eps = 1 depend on theta only") {
  const auto s = small_lorenz(true);
  LorenzTarget t(s, fake_observations(s, 18));
  Rng init(19);
  auto q = LorenzProposal::init_identity(s, t.observations(), lorenz_arch(s), init);
  // Zero the step network so only the θ-flow is non-trivial.
  for (const auto& sl : q.params().layout()) {
    if (sl.name.rfind("step", 0) == 0) {
      for (auto& v : q.params().view(sl)) v = 0.0;
    }
  }
  Rng rng(20);
  const auto draw = q.sample(rng, 200);
  const auto theta_lq = q.theta_flow().log_prob(q.params().span(), Batch(draw.xis.topRows(3).array().log()));
  for (Eigen::Index j = 0; j < 200; ++j) {
    const Vector theta = draw.xis.col(j).head(3);
    if (t.guard_tripped(t.path_of(draw.xis.col(j)))) continue;
    const double log_w = t.log_p_tilde(draw.xis.col(j), 1.0) - draw.log_q[j];
    // q(θ) = q_η(log θ) / Π θ_k.
    const double log_q_theta = theta_lq[j] - theta.array().log().sum();
    CHECK(log_w == doctest::Approx(t.log_prior(theta) - log_q_theta).epsilon(1e-9));
  }
}

TEST_CASE("Lorenz proposal log density recomputes from its samples") {
  const auto s = small_lorenz(false);
  LorenzProposal q(s, fake_observations(s, 21), lorenz_arch(s));
  Rng prng(22);
  std::normal_distribution<double> n01(0.0, 0.05);
  for (Eigen::Index i = 0; i < q.params().values().size(); ++i) q.params().values()[i] = n01(prng);
  Rng rng(23);
  const auto draw = q.sample(rng, 300);
  CHECK((q.log_prob(draw.xis) - draw.log_q).cwiseAbs().maxCoeff() < 1e-9);
  Rng a(24), b(24);
  CHECK(q.sample(a, 5).xis == q.sample(b, 5).xis);
}

TEST_CASE("Lorenz proposal gradient matches finite differences") {
  const auto s = small_lorenz(false);
  LorenzProposal q(s, fake_observations(s, 25), lorenz_arch(s));
  Rng prng(26);
  std::normal_distribution<double> n01(0.0, 0.05);
  for (Eigen::Index i = 0; i < q.params().values().size(); ++i) q.params().values()[i] = n01(prng);
  Rng rng(27);
  const auto draw = q.sample(rng, 3);
  const Vector coeffs{{1.0, -0.5, 2.0}};
  Vector grad = Vector::Zero(static_cast<Eigen::Index>(q.params().size()));
  q.accumulate_grad(draw.xis, coeffs, {grad.data(), q.params().size()});
  auto copy = q;
  auto f = [&](const Vector& phi) {
    copy.params().assign(phi);
    return coeffs.dot(copy.log_prob(draw.xis));
  };
  CHECK(oracle::max_rel_error(grad, oracle::central_diff(f, q.params().values()), 1e-4) < 1e-4);
}

TEST_CASE("Lorenz spec helpers") {
  LorenzSpec s;
  CHECK(s.next_observation(0) == std::pair<std::size_t, std::size_t>{0, 20});
  CHECK(s.next_observation(20) == std::pair<std::size_t, std::size_t>{1, 20});
  CHECK(s.next_observation(99) == std::pair<std::size_t, std::size_t>{4, 1});
  CHECK(s.next_observation(100) == std::pair<std::size_t, std::size_t>{4, 0});
  CHECK(s.xi_dim() == 304);
  s.known_sigma = 0.2;
  CHECK(s.xi_dim() == 303);
  s.obs_steps = {5, 3};
  CHECK_THROWS_AS(s.validate(), ContractError);
}
