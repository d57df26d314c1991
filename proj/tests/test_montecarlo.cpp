#include "dis/errors.hpp"
#include "dis/flow.hpp"
#include "dis/montecarlo.hpp"
#include "support/oracles.hpp"

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

using namespace dis;
using namespace dis::mc;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using Big = boost::multiprecision::cpp_bin_float_50;

// Normalised weights computed directly in 50-digit arithmetic, no max-subtraction.
std::vector<double> big_normalised(const Vector& lp, const Vector& lq) {
  std::vector<Big> w(static_cast<std::size_t>(lp.size()));
  Big total = 0;
  for (Eigen::Index i = 0; i < lp.size(); ++i) {
    if (lp[i] == -kInf) continue;
    w[static_cast<std::size_t>(i)] = boost::multiprecision::exp(Big(lp[i]) - Big(lq[i]));
    total += w[static_cast<std::size_t>(i)];
  }
  std::vector<double> out;
  for (const auto& x : w) out.push_back(static_cast<double>(x / total));
  return out;
}

Vector random_weights(Rng& rng, std::size_t n) {
  std::uniform_int_distribution<int> kind(0, 3);
  std::lognormal_distribution<double> heavy(0.0, 3.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Vector w(static_cast<Eigen::Index>(n));
  const int k = kind(rng);
  for (auto& x : w) {
    switch (k) {
      case 0: x = unif(rng); break;
      case 1: x = heavy(rng); break;
      case 2: x = unif(rng) < 0.3 ? heavy(rng) : 0.0; break;
      default: x = std::pow(unif(rng), 20.0); break;
    }
  }
  if (!(w.sum() > 0.0)) w[0] = 1.0;
  return w;
}

}  // namespace

TEST_CASE("weights of a matching proposal are equal") {
  const Vector l{{-1.0, 3.0, 0.5, -700.0}};
  const auto w = compute_weights(l, l);
  CHECK(w.mantissa == Vector::Ones(4));
  CHECK(w.log_offset == 0.0);
}

TEST_CASE("zero target density gives zero weight") {
  const auto w = compute_weights(Vector{{-kInf, 0.0}}, Vector{{0.0, 0.0}});
  CHECK(w.mantissa[0] == 0.0);
  CHECK(w.mantissa[1] == 1.0);
  const auto all = compute_weights(Vector{{-kInf, -kInf}}, Vector{{0.0, 1.0}});
  CHECK(all.degenerate());
  CHECK(log_normalising_constant(all) == -kInf);
}

TEST_CASE("zero proposal density under positive target is a support violation") {
  CHECK_THROWS_AS(compute_weights(Vector{{0.0, 1.0}}, Vector{{0.0, -kInf}}), SupportViolation);
  CHECK_NOTHROW(compute_weights(Vector{{0.0, -kInf}}, Vector{{0.0, -kInf}}));
  CHECK_THROWS_AS(compute_weights(Vector{{0.0}}, Vector{{0.0, 1.0}}), ContractError);
}

TEST_CASE("normalised weights agree with a 50-digit oracle") {
  Rng rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const double spread = std::pow(10.0, trial % 4);  // up to ±1000 nats
    const double shift = trial % 2 ? 900.0 : -900.0;
    Vector lp(50), lq(50);
    for (Eigen::Index i = 0; i < 50; ++i) {
      lp[i] = shift + spread * n(rng);
      lq[i] = spread * n(rng);
      if (i == 7 && trial % 5 == 0) lp[i] = -kInf;
    }
    const Vector got = compute_weights(lp, lq).normalised();
    const auto ref = big_normalised(lp, lq);
    for (Eigen::Index i = 0; i < 50; ++i) {
      const double r = ref[static_cast<std::size_t>(i)];
      if (r == 0.0) {
        CHECK(got[i] == 0.0);
      } else if (r > 1e-300) {
        worst = std::max(worst, std::abs(got[i] - r) / r);
      }
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("log-offset keeps the normalising constant computable") {
  // p̃ = c·q exactly.
  const double log_c = 812.25;
  Rng rng(2);
  const Vector lq = standard_normal_matrix(rng, 30, 1) * 20.0;
  const auto w = compute_weights((lq.array() + log_c).matrix(), lq);
  CHECK(log_normalising_constant(w) == doctest::Approx(log_c).epsilon(1e-15));
}

TEST_CASE("ess examples") {
  CHECK(ess(Vector::Constant(37, 0.2)).ess == doctest::Approx(37.0).epsilon(1e-14));
  Vector one = Vector::Zero(10);
  one[4] = 3.0;
  CHECK(ess(one).ess == 1.0);
  CHECK(ess(one).max_norm_weight == 1.0);
  CHECK(ess(Vector{{1.0, 1.0, 2.0}}).ess == doctest::Approx(16.0 / 6.0).epsilon(1e-15));
  CHECK(ess(Vector::Zero(5)).ess == 0.0);
  // Huge and tiny scales do not overflow.
  CHECK(ess(Vector{{1e300, 1e300, 2e300}}).ess == doctest::Approx(16.0 / 6.0));
  CHECK(ess(Vector{{1e-320, 1e-320}}).ess == doctest::Approx(2.0));
}

TEST_CASE("truncation examples") {
  const auto eq = auto_truncate(Vector::Constant(20, 1.0));
  CHECK(eq.w_trunc == Vector::Constant(20, 1.0));
  CHECK(eq.omega == 1.0);

  Vector w = Vector::Ones(10);
  w[0] = 100.0;
  const auto t = auto_truncate(w);
  CHECK(t.omega == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.max_norm_weight == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(t.feasible);

  Vector single = Vector::Zero(8);
  single[3] = 0.25;
  const auto s = auto_truncate(single);
  CHECK(s.omega == 0.25);
  CHECK(s.max_norm_weight == 1.0);
  CHECK_FALSE(s.feasible);

  CHECK_THROWS_AS(auto_truncate(Vector::Zero(4)), DegenerateWeights);
}

TEST_CASE("truncation properties over random weight vectors") {
  Rng rng(3);
  std::uniform_int_distribution<int> size(1, 400);
  std::uniform_real_distribution<double> scale_exp(-200.0, 200.0);
  std::size_t feasible = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const Vector w = random_weights(rng, static_cast<std::size_t>(size(rng)));
    const auto t = auto_truncate(w);
    const double npos = static_cast<double>((w.array() > 0.0).count());
    const double raw_max = w.maxCoeff() / w.sum();

    // Reported quantities are consistent with ω.
    REQUIRE((t.w_trunc - w.cwiseMin(t.omega)).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(std::abs(t.max_norm_weight - t.w_trunc.maxCoeff() / t.w_trunc.sum()) <= 1e-12);

    if (raw_max <= 0.1) {
      REQUIRE(t.w_trunc == w);
    } else if (1.0 / npos <= 0.1) {
      ++feasible;
      REQUIRE(t.feasible);
      REQUIRE(t.max_norm_weight <= 0.1 + 1e-9);
      // ω is the largest such threshold: slightly larger ω breaks the bound.
      const Vector bigger = w.cwiseMin(t.omega * (1 + 1e-6));
      REQUIRE(bigger.maxCoeff() / bigger.sum() > 0.1 - 1e-9);
    } else {
      REQUIRE_FALSE(t.feasible);
      REQUIRE(t.omega == (w.array() > 0.0).select(w.array(), kInf).minCoeff());
    }

    // Monotonicity in ω.
    const double o2 = t.omega * 0.5;
    const Vector lower = w.cwiseMin(o2);
    REQUIRE((lower.array() <= t.w_trunc.array()).all());
    REQUIRE(lower.maxCoeff() / lower.sum() <= t.w_trunc.maxCoeff() / t.w_trunc.sum() + 1e-12);

    // Scale invariance.
    const double c = std::pow(10.0, scale_exp(rng) / 10.0);
    const auto ts = auto_truncate(w * c);
    REQUIRE(std::abs(ts.max_norm_weight - t.max_norm_weight) <= 1e-9);
    REQUIRE(std::abs(ts.omega / (c * t.omega) - 1.0) <= 1e-9);
    REQUIRE(std::abs(ess(w * c).ess - ess(w).ess) <= 1e-9 * ess(w).ess);

    // ESS bounds.
    const double e = ess(w).ess;
    REQUIRE(e >= 1.0 - 1e-12);
    REQUIRE(e <= static_cast<double>(w.size()) + 1e-9);
  }
  CHECK(feasible > 1000);
}

TEST_CASE("resampling examples") {
  Vector w = Vector::Zero(6);
  w[2] = 0.3;
  Rng rng(4);
  const auto idx = resample(w, 1000, rng);
  CHECK(std::all_of(idx.begin(), idx.end(), [](std::size_t i) { return i == 2; }));

  Rng r1(5), r2(5);
  CHECK(resample(Vector::Ones(10), 200, r1) == resample(Vector::Ones(10), 200, r2));

  const std::size_t n = 100000;
  Rng r3(6);
  const auto draws = resample(Vector::Ones(10), n, r3);
  std::vector<double> freq(10, 0.0);
  for (auto i : draws) freq[i] += 1.0 / static_cast<double>(n);
  const double se = std::sqrt(0.1 * 0.9 / static_cast<double>(n));
  for (double f : freq) CHECK(std::abs(f - 0.1) < 3 * se);

  CHECK_THROWS_AS(resample(Vector::Zero(3), 5, rng), DegenerateWeights);
}

TEST_CASE("zero weights inside the vector are never drawn") {
  Vector w{{0.0, 1.0, 0.0, 0.0, 2.0, 0.0}};
  Rng rng(7);
  for (auto i : resample(w, 20000, rng)) CHECK((i == 1 || i == 4));
}

TEST_CASE("resampling is unbiased for weighted sums") {
  Rng rng(8);
  const Vector w{{0.5, 3.0, 0.0, 1.25, 0.25}};
  const Vector h{{2.0, -1.0, 100.0, 4.0, 7.0}};
  const double s = w.sum();
  const double exact = w.dot(h);
  const std::size_t n = 7;
  const int reps = 10000;
  std::vector<double> est;
  for (int r = 0; r < reps; ++r) {
    double acc = 0.0;
    for (auto i : resample(w, n, rng)) acc += h[static_cast<Eigen::Index>(i)];
    est.push_back(s / static_cast<double>(n) * acc);
  }
  const double m = oracle::mean(est);
  const double se = oracle::sample_sd(est) / std::sqrt(static_cast<double>(reps));
  CHECK(std::abs(m - exact) < 4 * se);

  // Scaling the weights leaves the distribution of draws unchanged.
  Rng a(9), b(9);
  CHECK(resample(w, 50, a) == resample(w * 1e200, 50, b));
}

TEST_CASE("self-normalised estimates") {
  CHECK(self_normalised_estimate(Vector{{0.3, 2.0, 1.0}}, Vector::Constant(3, 4.5)) == doctest::Approx(4.5));
  CHECK(self_normalised_estimate(Vector{{1.0, 3.0}}, Vector{{0.0, 4.0}}) == 3.0);
  const Vector h{{1.0, 5.0, -2.0, 8.0}};
  CHECK(self_normalised_estimate(Vector::Ones(4), h) == doctest::Approx(h.mean()));
  CHECK_THROWS_AS(self_normalised_estimate(Vector::Zero(2), Vector::Ones(2)), DegenerateWeights);
}

TEST_CASE("normalising constant of a Gaussian target") {
  // p̃(ξ) = Z · N(ξ; 0, 1.1² I) with Z = e^2, proposed from an identity-initialised flow.
  const double log_z = 2.0;
  const double sd = 1.1;
  flow::FlowArchitecture arch;
  arch.dim = 2;
  Rng init(10);
  auto q = flow::FlowProposal::init_identity(arch, init);
  int inside = 0;
  for (int rep = 0; rep < 20; ++rep) {
    Rng rng = derive_rng(11, static_cast<std::uint64_t>(rep));
    const auto draw = q.sample(rng, 2000);
    Vector lp(draw.xis.cols());
    for (Eigen::Index j = 0; j < lp.size(); ++j) {
      lp[j] = log_z - std::log(2 * std::numbers::pi * sd * sd) - 0.5 * draw.xis.col(j).squaredNorm() / (sd * sd);
    }
    const auto w = compute_weights(lp, draw.log_q);
    const Vector raw = w.mantissa;
    // Delta-method standard error of log of the sample mean.
    const double se = oracle::sample_sd(std::vector<double>(raw.data(), raw.data() + raw.size())) /
                      (raw.mean() * std::sqrt(static_cast<double>(raw.size())));
    if (std::abs(log_normalising_constant(w) - log_z) < 3 * se) ++inside;
  }
  CHECK(inside >= 19);
}
