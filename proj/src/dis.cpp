#include "dis/dis.hpp"

#include "dis/errors.hpp"
#include "dis/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dis {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

Vector log_p_at(const std::vector<TemperTerms>& terms, const TemperedTarget& target, double eps) {
  Vector out(static_cast<Eigen::Index>(terms.size()));
  for (std::size_t i = 0; i < terms.size(); ++i) out[static_cast<Eigen::Index>(i)] = target.combine(terms[i], eps);
  return out;
}

Batch gather(const Batch& xis, const std::vector<std::size_t>& idx) {
  Batch out(xis.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = xis.col(static_cast<Eigen::Index>(idx[j]));
  return out;
}

}  // namespace

std::size_t DisConfig::effective_batches() const {
  return batches > 0 ? batches : std::max<std::size_t>(1, target_ess / std::max<std::size_t>(1, batch_size));
}

void DisConfig::validate() const {
  require(n_samples >= 1, "N must be positive");
  require(batch_size >= 1, "batch size must be positive");
  require(batch_size <= target_ess && target_ess <= n_samples, "require n <= M <= N");
  require(std::isfinite(eps0), "eps0 must be finite");
  require(l1_strength >= 0.0 && std::isfinite(l1_strength), "L1 strength must be finite and non-negative");
  require(truncation_target > 0.0 && truncation_target <= 1.0, "truncation target must be in (0, 1]");
  require(max_iters >= 1, "max_iters must be positive");
  require(threads >= 1, "threads must be positive");
}

nlohmann::json to_json(const DisConfig& c) {
  nlohmann::json j{{"n_samples", c.n_samples},
                   {"target_ess", c.target_ess},
                   {"batch_size", c.batch_size},
                   {"batches", c.effective_batches()},
                   {"eps0", c.eps0},
                   {"target_eps", c.target_eps},
                   {"max_iters", c.max_iters},
                   {"max_wall_seconds", c.max_wall_seconds},
                   {"adam", to_json(c.adam)},
                   {"l1_strength", c.l1_strength},
                   {"truncation_target", c.truncation_target},
                   {"ess_fallback_fraction", c.ess_fallback_fraction},
                   {"max_retries", c.max_retries},
                   {"seed", c.seed},
                   {"threads", c.threads}};
  if (c.eps_floor) j["eps_floor"] = *c.eps_floor;
  return j;
}

DisConfig dis_config_from_json(const nlohmann::json& j, const DisConfig& d) {
  DisConfig c = d;
  c.n_samples = j.value("n_samples", d.n_samples);
  c.target_ess = j.value("target_ess", d.target_ess);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.batches = j.value("batches", d.batches);
  c.eps0 = j.value("eps0", d.eps0);
  c.target_eps = j.value("target_eps", d.target_eps);
  c.max_iters = j.value("max_iters", d.max_iters);
  c.max_wall_seconds = j.value("max_wall_seconds", d.max_wall_seconds);
  if (j.contains("adam")) c.adam = adam_from_json(j.at("adam"));
  c.l1_strength = j.value("l1_strength", d.l1_strength);
  c.truncation_target = j.value("truncation_target", d.truncation_target);
  if (j.contains("eps_floor")) c.eps_floor = j.at("eps_floor").get<double>();
  c.ess_fallback_fraction = j.value("ess_fallback_fraction", d.ess_fallback_fraction);
  c.max_retries = j.value("max_retries", d.max_retries);
  c.seed = j.value("seed", d.seed);
  c.threads = j.value("threads", d.threads);
  c.validate();
  return c;
}

nlohmann::json to_json(const TraceRow& r, bool include_timing) {
  nlohmann::json j{{"t", r.t},
                   {"eps", r.eps},
                   {"eps_prev", r.eps_prev},
                   {"ess_prev", r.ess_prev},
                   {"ess", r.ess},
                   {"log_omega", r.log_omega},
                   {"max_norm_weight", r.max_norm_weight},
                   {"log_z_hat", r.log_z_hat},
                   {"mean_log_q", r.mean_log_q},
                   {"grad_norm", r.grad_norm},
                   {"objective", r.objective},
                   {"retries", r.retries}};
  if (include_timing) j["wall_seconds"] = r.wall_seconds;
  return j;
}

double ess_at(const std::vector<TemperTerms>& terms, const Vector& log_q, const TemperedTarget& target, double eps) {
  const auto w = mc::compute_weights(log_p_at(terms, target, eps), log_q);
  return mc::ess(w.mantissa).ess;
}

EpsSelection select_epsilon(const std::vector<TemperTerms>& terms, const Vector& log_q, const TemperedTarget& target,
                            double eps_prev, double target_ess, double floor, double fallback_fraction) {
  EpsSelection sel;
  sel.eps = eps_prev;
  sel.ess_prev = ess_at(terms, log_q, target, eps_prev);
  sel.ess = sel.ess_prev;
  if (sel.ess_prev < target_ess || eps_prev <= floor) return sel;

  const double ess_floor = ess_at(terms, log_q, target, floor);
  if (ess_floor >= target_ess) {
    sel.eps = floor;
    sel.ess = ess_floor;
    return sel;
  }
  double lo = floor;
  double hi = eps_prev;
  double ess_hi = sel.ess_prev;
  const double tol = 1e-6 * (eps_prev - floor);
  while (hi - lo > tol && sel.bisection_steps < 100) {
    const double mid = 0.5 * (lo + hi);
    const double e = ess_at(terms, log_q, target, mid);
    ++sel.bisection_steps;
    if (e >= target_ess) {
      hi = mid;
      ess_hi = e;
    } else {
      lo = mid;
    }
  }
  if (ess_hi < fallback_fraction * target_ess) return sel;
  sel.eps = hi;
  sel.ess = ess_hi;
  return sel;
}

std::vector<TemperTerms> evaluate_terms(const TemperedTarget& target, const Batch& xis, std::size_t threads) {
  std::vector<TemperTerms> out(static_cast<std::size_t>(xis.cols()));
  parallel_chunks(out.size(), threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) out[i] = target.terms(xis.col(static_cast<Eigen::Index>(i)));
  });
  return out;
}

mc::WeightedSample weight_draws(ProposalDraw draw, const std::vector<TemperTerms>& terms,
                                const TemperedTarget& target, double eps, double truncation_target) {
  mc::WeightedSample s;
  s.log_p_tilde = log_p_at(terms, target, eps);
  s.weights = mc::compute_weights(s.log_p_tilde, draw.log_q);
  s.xis = std::move(draw.xis);
  s.log_q = std::move(draw.log_q);
  s.eps = eps;
  if (s.weights.degenerate()) throw DegenerateWeights("all importance weights are zero at eps=" + std::to_string(eps));
  s.truncation = mc::auto_truncate(s.weights.mantissa, truncation_target);
  return s;
}

mc::WeightedSample weighted_sample(const Proposal& q, const TemperedTarget& target, double eps, std::size_t n,
                                   double truncation_target, Rng& rng) {
  auto draw = q.sample(rng, n);
  const auto terms = evaluate_terms(target, draw.xis, q.threads());
  return weight_draws(std::move(draw), terms, target, eps, truncation_target);
}

namespace {

ScaledGradient weighted_gradient(const Proposal& q, const mc::WeightedSample& s, const Vector& w) {
  ScaledGradient g{Vector::Zero(static_cast<Eigen::Index>(q.params().size())), s.weights.log_offset};
  const Vector coeffs = w / static_cast<double>(s.size());
  q.accumulate_grad(s.xis, coeffs, {g.direction.data(), static_cast<std::size_t>(g.direction.size())});
  return g;
}

}  // namespace

ScaledGradient gradient_g1(const Proposal& q, const mc::WeightedSample& s) {
  return weighted_gradient(q, s, s.weights.mantissa);
}

ScaledGradient gradient_g2(const Proposal& q, const mc::WeightedSample& s) {
  return weighted_gradient(q, s, s.truncation.w_trunc);
}

ScaledGradient gradient_g3(const Proposal& q, const mc::WeightedSample& s, std::size_t n, Rng& rng) {
  const auto idx = mc::resample(s.truncation.w_trunc, n, rng);
  const Batch batch = gather(s.xis, idx);
  const double scale = s.truncated_total() / (static_cast<double>(n) * static_cast<double>(s.size()));
  ScaledGradient g{Vector::Zero(static_cast<Eigen::Index>(q.params().size())), s.weights.log_offset};
  q.accumulate_grad(batch, Vector::Constant(static_cast<Eigen::Index>(n), scale),
                    {g.direction.data(), static_cast<std::size_t>(g.direction.size())});
  return g;
}

IterationOutcome dis_iteration(Proposal& q, const TemperedTarget& target, const DisConfig& config, DisState& state) {
  const double floor = config.eps_floor.value_or(target.eps_domain().floor);
  const double eps_prev = state.eps;
  IterationOutcome out;
  out.row.t = state.t + 1;
  out.row.eps_prev = eps_prev;

  std::optional<mc::WeightedSample> sample;
  std::string last_error;
  for (std::size_t attempt = 0; attempt <= config.max_retries && !sample; ++attempt) {
    try {
      auto draw = q.sample(state.rng, config.n_samples);
      const auto terms = evaluate_terms(target, draw.xis, config.threads);
      auto sel = select_epsilon(terms, draw.log_q, target, eps_prev, static_cast<double>(config.target_ess), floor,
                                config.ess_fallback_fraction);
      out.row.ess_prev = sel.ess_prev;
      out.row.ess = sel.ess;
      double eps = sel.eps;
      if (sel.ess == 0.0) {
        throw DegenerateWeights("all importance weights are zero at eps=" + std::to_string(eps));
      }
      sample = weight_draws(std::move(draw), terms, target, eps, config.truncation_target);
      out.row.retries = attempt;
    } catch (const DegenerateWeights& e) {
      last_error = e.what();
    } catch (const EvaluationError& e) {
      last_error = e.what();
    }
  }
  if (!sample) {
    throw DegenerateWeights("iteration " + std::to_string(out.row.t) + " failed after " +
                            std::to_string(config.max_retries) + " retries: " + last_error);
  }

  const auto& s = *sample;
  out.row.eps = s.eps;
  out.row.log_omega = s.weights.log_offset + std::log(s.truncation.omega);
  out.row.max_norm_weight = s.truncation.max_norm_weight;
  out.row.log_z_hat = s.log_z_hat();
  out.row.objective = mc::self_normalised_estimate(s.weights.mantissa, s.log_q);

  // The proposal that produced the sample is fixed for the whole iteration; only the
  // trainable copy moves. Each step ascends (1/n) Σ ∇log q over a resampled batch, i.e. g3
  // divided by the truncated normalising-constant estimate S/N.
  const std::size_t n = config.batch_size;
  const std::size_t B = config.effective_batches();
  const Vector coeffs = Vector::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n));
  auto& params = q.params();
  double grad_norm_total = 0.0;
  double log_q_total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto idx = mc::resample(s.truncation.w_trunc, n, state.rng);
    const Batch batch = gather(s.xis, idx);
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(params.size()));
    const Vector lq = q.accumulate_grad(batch, coeffs, {grad.data(), params.size()});
    if (config.l1_strength > 0.0) grad -= nn::l1_penalty_grad(params, config.l1_strength);
    if (!grad.allFinite()) {
      throw EvaluationError(0, "non-finite gradient in iteration " + std::to_string(out.row.t));
    }
    log_q_total += lq.mean();
    grad_norm_total += grad.norm();
    state.adam.ascend(params.values(), grad);
  }
  out.row.mean_log_q = log_q_total / static_cast<double>(B);
  out.row.grad_norm = grad_norm_total / static_cast<double>(B);

  state.eps = s.eps;
  state.t = out.row.t;
  return out;
}

nlohmann::json to_json(const PretrainConfig& c) {
  return {{"batch_size", c.batch_size},   {"ess_fraction", c.ess_fraction},   {"max_steps", c.max_steps},
          {"check_every", c.check_every}, {"check_samples", c.check_samples}, {"adam", to_json(c.adam)}};
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j, const PretrainConfig& d) {
  PretrainConfig c = d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.ess_fraction = j.value("ess_fraction", d.ess_fraction);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.check_every = j.value("check_every", d.check_every);
  c.check_samples = j.value("check_samples", d.check_samples);
  if (j.contains("adam")) c.adam = adam_from_json(j.at("adam"));
  require(c.batch_size >= 1 && c.check_every >= 1 && c.check_samples >= 1, "pretraining sizes must be positive");
  return c;
}

PretrainResult pretrain(Proposal& q, const TemperedTarget& target, double eps0, const PretrainConfig& config, Rng& rng,
                        const PretrainObserver& observer) {
  require(target.has_initial_sampler(), "pretraining needs exact draws from the initial target");
  PretrainResult result;
  Adam adam(q.params().size(), config.adam);
  const Vector coeffs =
      Vector::Constant(static_cast<Eigen::Index>(config.batch_size), 1.0 / static_cast<double>(config.batch_size));

  auto check = [&](std::size_t step) {
    auto draw = q.sample(rng, config.check_samples);
    const auto terms = evaluate_terms(target, draw.xis, q.threads());
    const double e = ess_at(terms, draw.log_q, target, eps0);
    result.ess_fraction = e / static_cast<double>(config.check_samples);
    result.ess_history.emplace_back(step, result.ess_fraction);
    return result.ess_fraction >= config.ess_fraction;
  };

  if (check(0)) {
    result.reached_threshold = true;
    return result;
  }
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    const Batch batch = target.sample_initial(rng, config.batch_size);
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(q.params().size()));
    q.accumulate_grad(batch, coeffs, {grad.data(), q.params().size()});
    if (!grad.allFinite()) throw EvaluationError(0, "non-finite gradient at pretraining step " + std::to_string(step));
    adam.ascend(q.params().values(), grad);
    result.steps = step;
    if (observer) observer(step, q);
    if (step % config.check_every == 0 && check(step)) {
      result.reached_threshold = true;
      return result;
    }
  }
  return result;
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::ReachedTarget:
      return "reached_target";
    case RunStatus::IterationCap:
      return "iteration_cap";
    case RunStatus::WallTime:
      return "wall_time";
    case RunStatus::Failed:
      return "failed";
  }
  return "failed";
}

RunResult run(Proposal& q, const TemperedTarget& target, const DisConfig& config, const IterationObserver& observer) {
  config.validate();
  q.set_threads(config.threads);
  RunResult result;
  DisState state{config.eps0, 0, Adam(q.params().size(), config.adam), derive_rng(config.seed, 0x646973ULL)};
  const auto start = Clock::now();
  auto reached = [&] { return state.eps <= config.target_eps; };

  while (!reached()) {
    if (state.t >= config.max_iters) {
      result.status = RunStatus::IterationCap;
      break;
    }
    if (config.max_wall_seconds > 0.0 && seconds_since(start) >= config.max_wall_seconds) {
      result.status = RunStatus::WallTime;
      break;
    }
    try {
      auto outcome = dis_iteration(q, target, config, state);
      outcome.row.wall_seconds = seconds_since(start);
      result.trace.push_back(outcome.row);
      if (observer) observer(outcome.row, q);
    } catch (const DegenerateWeights& e) {
      result.status = RunStatus::Failed;
      result.error = e.what();
      break;
    } catch (const EvaluationError& e) {
      result.status = RunStatus::Failed;
      result.error = e.what();
      break;
    }
  }
  if (reached()) result.status = RunStatus::ReachedTarget;
  result.wall_seconds = seconds_since(start);
  if (result.status != RunStatus::Failed) {
    try {
      Rng final_rng = derive_rng(config.seed, 0x66696e616cULL);
      result.final_sample = weighted_sample(q, target, state.eps, config.n_samples, config.truncation_target, final_rng);
    } catch (const std::exception& e) {
      result.status = RunStatus::Failed;
      result.error = e.what();
    }
  }
  return result;
}

}  // namespace dis
