#include "dis/montecarlo.hpp"

#include "dis/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dis::mc {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

Vector Weights::normalised() const {
  const double total = mantissa.sum();
  if (!(total > 0.0)) throw DegenerateWeights("all importance weights are zero");
  return mantissa / total;
}

Weights compute_weights(const Vector& log_p_tilde, const Vector& log_q) {
  require(log_p_tilde.size() == log_q.size(), "log_p_tilde and log_q lengths differ");
  const auto n = log_q.size();
  Vector log_w(n);
  double offset = -kInf;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lp = log_p_tilde[i];
    const double lq = log_q[i];
    require(!std::isnan(lp), "log_p_tilde is NaN");
    if (lp == -kInf) {
      log_w[i] = -kInf;
      continue;
    }
    if (!std::isfinite(lq) && !(lq == kInf)) {
      throw SupportViolation("proposal density is zero where the target is positive (sample " +
                             std::to_string(i) + ")");
    }
    log_w[i] = lp - lq;
    require(!std::isnan(log_w[i]), "non-finite log weight");
    offset = std::max(offset, log_w[i]);
  }
  Weights w{Vector::Zero(n), offset};
  if (offset == -kInf) return w;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (log_w[i] != -kInf) w.mantissa[i] = std::exp(log_w[i] - offset);
  }
  return w;
}

EssReport ess(const Vector& w) {
  EssReport r;
  r.n = static_cast<std::size_t>(w.size());
  const double total = w.sum();
  if (!(total > 0.0)) return r;
  // Rescale so the squared sum cannot overflow.
  const double top = w.maxCoeff();
  const Vector s = w / top;
  const double a = s.sum();
  r.ess = a * a / s.squaredNorm();
  r.max_norm_weight = top / total;
  return r;
}

Truncation auto_truncate(const Vector& w, double target_max_norm) {
  require(target_max_norm > 0.0 && target_max_norm <= 1.0, "target max normalised weight must be in (0, 1]");
  const auto n = static_cast<std::size_t>(w.size());
  std::vector<double> sorted;
  sorted.reserve(n);
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    require(w[i] >= 0.0, "weights must be non-negative");
    if (w[i] > 0.0) sorted.push_back(w[i]);
  }
  if (sorted.empty()) throw DegenerateWeights("cannot truncate: all weights are zero");
  std::sort(sorted.begin(), sorted.end());
  const std::size_t npos = sorted.size();
  // prefix[j] = sum of the j smallest positive weights.
  std::vector<double> prefix(npos + 1, 0.0);
  for (std::size_t j = 0; j < npos; ++j) prefix[j + 1] = prefix[j] + sorted[j];

  Truncation t;
  auto finish = [&](double omega) {
    t.omega = omega;
    t.w_trunc = w.unaryExpr([omega](double x) { return std::min(x, omega); });
    t.max_norm_weight = std::min(omega, sorted.back()) / t.w_trunc.sum();
    return t;
  };

  const double untouched = sorted.back() / prefix[npos];
  if (untouched <= target_max_norm) return finish(sorted.back());
  // Every positive weight clipped to the same value gives the smallest attainable maximum 1/npos.
  if (1.0 / static_cast<double>(npos) > target_max_norm) {
    t.feasible = false;
    return finish(sorted.front());
  }

  // f(ω) = ω / Σ min(w, ω) is increasing. On [sorted[j-1], sorted[j]] it has j untruncated
  // terms below ω: f = ω / (prefix[j] + (npos - j) ω). Bisect over segments for the last
  // breakpoint with f <= target, then solve the linear equation on the next segment.
  auto f_at = [&](std::size_t j) {  // f evaluated at ω = sorted[j]
    const double omega = sorted[j];
    return omega / (prefix[j] + static_cast<double>(npos - j) * omega);
  };
  std::size_t lo = 0;           // f_at(lo) <= target (since f(sorted[0]) = 1/npos)
  std::size_t hi = npos - 1;    // f_at(hi) > target
  for (int iter = 0; iter < 200 && hi - lo > 1; ++iter) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (f_at(mid) <= target_max_norm) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  // On (sorted[lo], sorted[hi]] weights sorted[0..lo] are below ω.
  const std::size_t below = lo + 1;
  const double c = prefix[below];
  const double k = static_cast<double>(npos - below);
  double omega = target_max_norm * c / (1.0 - target_max_norm * k);
  omega = std::clamp(omega, sorted[lo], sorted[hi]);
  return finish(omega);
}

std::vector<std::size_t> resample(const Vector& w, std::size_t n, Rng& rng) {
  const auto size = static_cast<std::size_t>(w.size());
  std::vector<double> cumulative(size);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    require(w[static_cast<Eigen::Index>(i)] >= 0.0, "weights must be non-negative");
    total += w[static_cast<Eigen::Index>(i)];
    cumulative[i] = total;
  }
  if (!(total > 0.0)) throw DegenerateWeights("cannot resample: all weights are zero");
  std::uniform_real_distribution<double> uniform(0.0, total);
  std::vector<std::size_t> out(n);
  for (auto& idx : out) {
    const double u = uniform(rng);
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    std::size_t j = static_cast<std::size_t>(it - cumulative.begin());
    if (j >= size) j = size - 1;
    // Skip zero-weight entries that share a cumulative value with their predecessor.
    while (w[static_cast<Eigen::Index>(j)] == 0.0 && j + 1 < size) ++j;
    while (w[static_cast<Eigen::Index>(j)] == 0.0 && j > 0) --j;
    idx = j;
  }
  return out;
}

double self_normalised_estimate(const Vector& w, const Vector& h) {
  require(w.size() == h.size(), "weights and values differ in length");
  const double total = w.sum();
  if (!(total > 0.0)) throw DegenerateWeights("self-normalised estimate needs a positive weight");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (w[i] > 0.0) acc += w[i] * h[i];
  }
  return acc / total;
}

double self_normalised_std_error(const Vector& w, const Vector& h) {
  const double mean = self_normalised_estimate(w, h);
  const Vector s = w / w.sum();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (s[i] > 0.0) acc += s[i] * s[i] * (h[i] - mean) * (h[i] - mean);
  }
  return std::sqrt(acc);
}

double log_normalising_constant(const Weights& w) {
  const double total = w.mantissa.sum();
  if (!(total > 0.0) || w.size() == 0) return -kInf;
  return w.log_offset + std::log(total / static_cast<double>(w.size()));
}

}  // namespace dis::mc
