#include "dis/experiment.hpp"

#include "dis/errors.hpp"
#include "dis/models/mg1.hpp"
#include "dis/models/sinusoid.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#ifndef DIS_CODE_VERSION
#define DIS_CODE_VERSION "0.0.0"
#endif

namespace dis::experiment {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  require(j.is_object(), where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    require(ok.count(k) > 0, "unknown key '" + k + "' in " + where);
  }
}

Vector vector_from_json(const json& j, const std::string& what) {
  require(j.is_array(), what + " must be an array of numbers");
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), idx(v.size()));
}

json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

std::string join_steps(const std::vector<std::size_t>& steps) {
  std::ostringstream os;
  for (std::size_t i = 0; i < steps.size(); ++i) os << (i ? " " : "") << steps[i];
  return os.str();
}

std::vector<std::size_t> parse_steps(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::size_t> out;
  std::size_t v = 0;
  while (is >> v) out.push_back(v);
  return out;
}

// Stream constants for derive_rng.
constexpr std::uint64_t kInitStream = 0x696e6974ULL;
constexpr std::uint64_t kPretrainStream = 0x707265ULL;
constexpr std::uint64_t kGenerateStream = 0x67656eULL;
constexpr std::uint64_t kResampleStream = 0x726573ULL;
constexpr std::uint64_t kDiagnoseStream = 0x646961ULL;
constexpr std::uint64_t kTuneStream = 0x74756e65ULL;
constexpr std::uint64_t kPilotStream = 0x70696cULL;

std::size_t default_couplings(ModelId id) {
  switch (id) {
    case ModelId::Sinusoid: return 4;
    case ModelId::Mg1: return 16;
    default: return 8;
  }
}

std::vector<std::size_t> default_hidden(ModelId id) {
  switch (id) {
    case ModelId::Sinusoid: return {10, 10, 10};
    case ModelId::Mg1: return {100, 100, 50};
    default: return {30, 30, 30};
  }
}

flow::FlowArchitecture parse_flow(const json& j, ModelId id, std::uint64_t seed) {
  check_keys(j, "flow", {"couplings", "hidden", "activation", "permutation", "permutation_seed", "sigma_clamp"});
  flow::FlowArchitecture a;
  a.couplings = j.value("couplings", default_couplings(id));
  a.hidden = j.value("hidden", default_hidden(id));
  a.activation = nn::activation_from_string(j.value("activation", std::string("elu")));
  const auto kind = j.value("permutation", std::string(id == ModelId::Sinusoid ? "reverse" : "random"));
  require(kind == "reverse" || kind == "random", "flow.permutation must be 'reverse' or 'random'");
  a.permutation = kind == "reverse" ? flow::PermutationKind::Reverse : flow::PermutationKind::Random;
  a.permutation_seed = j.value("permutation_seed", seed);
  a.sigma_clamp = j.value("sigma_clamp", 10.0);
  require(a.couplings >= 1, "flow needs at least one coupling layer");
  require(a.sigma_clamp > 0.0, "flow.sigma_clamp must be positive");
  return a;
}

void parse_lorenz(const json& j, ExperimentConfig& c) {
  check_keys(j, "lorenz",
             {"steps", "dt", "x0", "obs_every", "obs_steps", "known_sigma", "prior_rate", "guard", "diffusion",
              "step_hidden"});
  auto& s = c.lorenz;
  s.steps = j.value("steps", s.steps);
  s.dt = j.value("dt", s.dt);
  if (j.contains("x0")) {
    const Vector x0 = vector_from_json(j.at("x0"), "lorenz.x0");
    require(x0.size() == 3, "lorenz.x0 must have three entries");
    s.x0 = x0;
  }
  require(!(j.contains("obs_every") && j.contains("obs_steps")), "give lorenz.obs_every or lorenz.obs_steps, not both");
  if (j.contains("obs_steps")) {
    s.obs_steps = j.at("obs_steps").get<std::vector<std::size_t>>();
  } else {
    const std::size_t every = j.value("obs_every", std::size_t{20});
    require(every >= 1, "lorenz.obs_every must be positive");
    s.obs_steps.clear();
    for (std::size_t i = every; i <= s.steps; i += every) s.obs_steps.push_back(i);
  }
  s.prior_rate = j.value("prior_rate", s.prior_rate);
  s.guard = j.value("guard", s.guard);
  s.diffusion = j.value("diffusion", s.diffusion);
  if (c.model == ModelId::LorenzFixedSigma) {
    s.known_sigma = j.value("known_sigma", 0.2);
    require(*s.known_sigma > 0.0, "lorenz.known_sigma must be positive");
  } else {
    require(!j.contains("known_sigma"), "lorenz.known_sigma is only valid for model lorenz_fixed_sigma");
    s.known_sigma.reset();
  }
  c.lorenz_step_hidden = j.value("step_hidden", c.lorenz_step_hidden);
  s.validate();
}

void parse_pmcmc(const json& j, PmcmcSettings& p) {
  check_keys(j, "pmcmc",
             {"iterations", "pilot_iterations", "pilot_scale", "burn_in", "n_particles", "npf_candidates",
              "tune_replicates", "target_sd", "initial_theta"});
  p.iterations = j.value("iterations", p.iterations);
  p.pilot_iterations = j.value("pilot_iterations", p.pilot_iterations);
  p.pilot_scale = j.value("pilot_scale", p.pilot_scale);
  p.burn_in = j.value("burn_in", p.burn_in);
  if (j.contains("n_particles")) p.n_particles = j.at("n_particles").get<std::size_t>();
  p.npf_candidates = j.value("npf_candidates", p.npf_candidates);
  p.tune_replicates = j.value("tune_replicates", p.tune_replicates);
  p.target_sd = j.value("target_sd", p.target_sd);
  if (j.contains("initial_theta")) p.initial_theta = vector_from_json(j.at("initial_theta"), "pmcmc.initial_theta");
  require(p.iterations >= 1, "pmcmc.iterations must be positive");
  require(p.burn_in < p.iterations, "pmcmc.burn_in must be below pmcmc.iterations");
  require(p.pilot_scale > 0.0, "pmcmc.pilot_scale must be positive");
  require(!p.n_particles || *p.n_particles >= 2, "pmcmc.n_particles must be at least 2");
  require(p.tune_replicates >= 2, "pmcmc.tune_replicates must be at least 2");
  require(!p.npf_candidates.empty() && std::is_sorted(p.npf_candidates.begin(), p.npf_candidates.end()),
          "pmcmc.npf_candidates must be a non-empty ascending list");
}

json resolved_echo(const ExperimentConfig& c) {
  json flow = flow::to_json(c.flow);
  flow.erase("dim");
  flow.erase("type");
  json j{{"model", to_string(c.model)},
         {"seed", c.seed},
         {"dis", to_json(c.dis)},
         {"pretrain", to_json(c.pretrain_config)},
         {"flow", flow},
         {"resample_size", c.resample_size}};
  j["pretrain"]["enabled"] = c.pretrain;
  j["dis"].erase("seed");
  if (!c.fixture.empty()) j["fixture"] = c.fixture.string();
  if (c.generate.theta.size() > 0) j["generate"] = {{"theta", vector_to_json(c.generate.theta)}, {"observations", c.generate.observations}};
  switch (c.model) {
    case ModelId::Sinusoid: j["sinusoid"] = {{"sigma0", c.sinusoid_sigma0}}; break;
    case ModelId::Mg1: j["mg1"] = {{"eps_floor", c.mg1_eps_floor}}; break;
    default: {
      const auto& s = c.lorenz;
      j["lorenz"] = {{"steps", s.steps},         {"dt", s.dt},
                     {"x0", vector_to_json(s.x0)}, {"obs_steps", s.obs_steps},
                     {"prior_rate", s.prior_rate}, {"guard", s.guard},
                     {"diffusion", s.diffusion},   {"step_hidden", c.lorenz_step_hidden}};
      if (s.known_sigma) j["lorenz"]["known_sigma"] = *s.known_sigma;
      const auto& p = c.pmcmc;
      j["pmcmc"] = {{"iterations", p.iterations},       {"pilot_iterations", p.pilot_iterations},
                    {"pilot_scale", p.pilot_scale},     {"burn_in", p.burn_in},
                    {"npf_candidates", p.npf_candidates}, {"tune_replicates", p.tune_replicates},
                    {"target_sd", p.target_sd}};
      if (p.n_particles) j["pmcmc"]["n_particles"] = *p.n_particles;
      if (p.initial_theta) j["pmcmc"]["initial_theta"] = vector_to_json(*p.initial_theta);
    }
  }
  return j;
}

models::LorenzProposalArchitecture lorenz_arch(const ExperimentConfig& c) {
  models::LorenzProposalArchitecture a;
  a.theta_flow = c.flow;
  a.theta_flow.dim = c.lorenz.param_dim();
  a.step_hidden = c.lorenz_step_hidden;
  a.activation = c.flow.activation;
  return a;
}

void check_lorenz_fixture(const ExperimentConfig& c, const io::Fixture& f) {
  const auto& s = c.lorenz;
  auto meta = [&](const std::string& key) {
    const auto it = f.meta.find(key);
    require(it != f.meta.end(), "Lorenz fixture lacks header field '" + key + "'");
    return it->second;
  };
  require(std::stoull(meta("steps")) == s.steps, "fixture steps differ from the configured lorenz.steps");
  require(std::abs(std::stod(meta("dt")) - s.dt) <= 1e-12, "fixture dt differs from the configured lorenz.dt");
  require(parse_steps(meta("obs_steps")) == s.obs_steps, "fixture observation steps differ from the configuration");
  require(f.data.cols() == 3 && static_cast<std::size_t>(f.data.rows()) == s.obs_steps.size(),
          "Lorenz fixture must hold one observation triple per observation step");
}

void write_json_file(const fs::path& path, const json& j) { io::write_text_atomic(path, j.dump(2) + "\n"); }

json permutation_info(const Proposal& q) {
  const auto arch = q.architecture();
  if (arch.contains("theta_flow")) {
    return {{"permutation_seed", arch["theta_flow"]["permutation_seed"]}, {"permutations", arch["theta_flow"]["permutations"]}};
  }
  return {{"permutation_seed", arch["permutation_seed"]}, {"permutations", arch["permutations"]}};
}

}  // namespace

std::string code_version() { return DIS_CODE_VERSION; }

std::string to_string(ModelId id) {
  switch (id) {
    case ModelId::Sinusoid: return "sinusoid";
    case ModelId::Mg1: return "mg1";
    case ModelId::Lorenz: return "lorenz";
    case ModelId::LorenzFixedSigma: return "lorenz_fixed_sigma";
  }
  return "unknown";
}

ModelId model_from_string(const std::string& name) {
  if (name == "sinusoid") return ModelId::Sinusoid;
  if (name == "mg1") return ModelId::Mg1;
  if (name == "lorenz") return ModelId::Lorenz;
  if (name == "lorenz_fixed_sigma") return ModelId::LorenzFixedSigma;
  throw ContractError("unknown model '" + name + "'");
}

ExperimentConfig parse_config(json j, const fs::path& base_dir, const Overrides& overrides) {
  try {
    check_keys(j, "config",
               {"model", "seed", "fixture", "dis", "pretrain", "flow", "sinusoid", "mg1", "lorenz", "generate", "pmcmc",
                "resample_size", "description"});
    if (overrides.seed) j["seed"] = *overrides.seed;
    require(j.contains("model"), "config must name a model");
    require(j.contains("seed"), "config must give a seed");
    ExperimentConfig c;
    c.model = model_from_string(j.at("model").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("fixture")) {
      const fs::path p = j.at("fixture").get<std::string>();
      c.fixture = p.is_absolute() ? p : base_dir / p;
    }

    json dis_j = j.value("dis", json::object());
    check_keys(dis_j, "dis",
               {"n_samples", "target_ess", "batch_size", "batches", "eps0", "target_eps", "max_iters",
                "max_wall_seconds", "adam", "l1_strength", "truncation_target", "eps_floor", "ess_fallback_fraction",
                "max_retries", "threads"});
    if (dis_j.contains("adam")) check_keys(dis_j["adam"], "dis.adam", {"step_size", "beta1", "beta2", "epsilon"});
    if (overrides.threads) dis_j["threads"] = *overrides.threads;
    dis_j["seed"] = c.seed;
    DisConfig dis_defaults;
    if (c.model == ModelId::Mg1) dis_defaults.eps0 = 10.0;
    c.dis = dis_config_from_json(dis_j, dis_defaults);

    const json pre_j = j.value("pretrain", json::object());
    check_keys(pre_j, "pretrain",
               {"enabled", "batch_size", "ess_fraction", "max_steps", "check_every", "check_samples", "adam"});
    c.pretrain = pre_j.value("enabled", c.model == ModelId::Sinusoid || c.is_lorenz());
    require(!c.pretrain || c.model != ModelId::Mg1, "the M/G/1 target has no exact initial sampler to pretrain on");
    json pre_cfg = pre_j;
    pre_cfg.erase("enabled");
    c.pretrain_config = pretrain_config_from_json(pre_cfg);

    c.flow = parse_flow(j.value("flow", json::object()), c.model, c.seed);

    if (j.contains("sinusoid")) {
      require(c.model == ModelId::Sinusoid, "sinusoid block given for another model");
      check_keys(j["sinusoid"], "sinusoid", {"sigma0"});
      c.sinusoid_sigma0 = j["sinusoid"].value("sigma0", 2.0);
      require(c.sinusoid_sigma0 > 0.0, "sinusoid.sigma0 must be positive");
    }
    if (j.contains("mg1")) {
      require(c.model == ModelId::Mg1, "mg1 block given for another model");
      check_keys(j["mg1"], "mg1", {"eps_floor"});
      c.mg1_eps_floor = j["mg1"].value("eps_floor", 1e-6);
      require(c.mg1_eps_floor > 0.0, "mg1.eps_floor must be positive");
    }
    if (c.is_lorenz()) {
      parse_lorenz(j.value("lorenz", json::object()), c);
    } else {
      require(!j.contains("lorenz"), "lorenz block given for another model");
    }
    if (j.contains("pmcmc")) {
      require(c.is_lorenz(), "pmcmc is only available for the Lorenz models");
      parse_pmcmc(j["pmcmc"], c.pmcmc);
    }
    if (j.contains("generate")) {
      check_keys(j["generate"], "generate", {"theta", "observations"});
      c.generate.theta = vector_from_json(j["generate"].at("theta"), "generate.theta");
      c.generate.observations = j["generate"].value("observations", c.generate.observations);
    }
    c.resample_size = j.value("resample_size", std::size_t{0});
    c.resolved = resolved_echo(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("malformed config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ContractError(std::string("invalid config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path, const Overrides& overrides) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(std::move(j), path.parent_path(), overrides);
}

Matrix lorenz_observations(const io::Fixture& fixture) { return fixture.data.transpose(); }

Model build_model(const ExperimentConfig& c) {
  Model m;
  if (c.model != ModelId::Sinusoid) {
    require(!c.fixture.empty(), "model " + to_string(c.model) + " needs a fixture file");
    require(fs::exists(c.fixture), "fixture " + c.fixture.string() + " does not exist");
    m.fixture = io::Fixture::load(c.fixture);
    m.fixture_sha256 = io::sha256_file(c.fixture);
    const std::string fixture_model = m.fixture->model;
    const bool lorenz_fixture = fixture_model == "lorenz" || fixture_model == "lorenz_fixed_sigma";
    require(c.is_lorenz() ? lorenz_fixture : fixture_model == to_string(c.model),
            "fixture model '" + fixture_model + "' does not match config model '" + to_string(c.model) + "'");
  }
  Rng init = derive_rng(c.seed, kInitStream);
  flow::FlowArchitecture arch = c.flow;
  switch (c.model) {
    case ModelId::Sinusoid: {
      m.target = std::make_unique<models::SinusoidTarget>(c.sinusoid_sigma0);
      arch.dim = 2;
      m.proposal = std::make_unique<flow::FlowProposal>(flow::FlowProposal::init_identity(arch, init));
      break;
    }
    case ModelId::Mg1: {
      require(m.fixture->data.cols() == 1, "M/G/1 fixture must hold one value per row");
      const Vector y = m.fixture->data.col(0);
      auto target = std::make_unique<models::Mg1Target>(y, c.mg1_eps_floor);
      arch.dim = target->dim();
      m.target = std::move(target);
      m.proposal = std::make_unique<flow::FlowProposal>(flow::FlowProposal::init_identity(arch, init));
      break;
    }
    default: {
      check_lorenz_fixture(c, *m.fixture);
      const Matrix obs = lorenz_observations(*m.fixture);
      m.target = std::make_unique<models::LorenzTarget>(c.lorenz, obs);
      m.proposal = std::make_unique<models::LorenzProposal>(
          models::LorenzProposal::init_identity(c.lorenz, obs, lorenz_arch(c), init));
    }
  }
  m.proposal->set_threads(c.dis.threads);
  return m;
}

io::Fixture generate_data(const ExperimentConfig& c) {
  require(c.generate.theta.size() > 0, "generate.theta is required for data generation");
  io::Fixture f;
  f.model = to_string(c.model);
  f.seed = c.seed;
  Rng rng = derive_rng(c.seed, kGenerateStream);
  const Vector& theta = c.generate.theta;
  switch (c.model) {
    case ModelId::Sinusoid:
      throw ContractError("the sinusoid example has no observed data to generate");
    case ModelId::Mg1: {
      require(theta.size() == 3, "M/G/1 generate.theta must be (θ1, θ2, θ3)");
      require(theta[0] > 0.0 && theta[1] >= 0.0 && theta[2] >= theta[1], "M/G/1 parameters need θ1 > 0, 0 <= θ2 <= θ3");
      require(c.generate.observations >= 1, "generate.observations must be positive");
      const Vector latents = standard_normal_matrix(rng, idx(2 * c.generate.observations), 1).col(0);
      const Vector y = models::mg1_simulate_theta({theta[0], theta[1], theta[2]}, latents);
      f.theta = theta;
      f.data = y;
      f.meta["observations"] = std::to_string(y.size());
      break;
    }
    default: {
      const auto& s = c.lorenz;
      Vector full(4);
      if (s.known_sigma) {
        require(theta.size() == 3 || theta.size() == 4, "Lorenz generate.theta must have 3 or 4 entries");
        require(theta.size() == 3 || std::abs(theta[3] - *s.known_sigma) <= 1e-12,
                "generate.theta σ differs from lorenz.known_sigma");
        full << theta.head(3), *s.known_sigma;
      } else {
        require(theta.size() == 4, "Lorenz generate.theta must be (θ1, θ2, θ3, σ)");
        full = theta;
      }
      require(full[3] > 0.0, "observation σ must be positive");
      const Matrix path = models::lorenz_simulate_unconditioned(s, full.head(3), rng);
      f.data.resize(idx(s.obs_steps.size()), 3);
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t k = 0; k < s.obs_steps.size(); ++k) {
        for (Eigen::Index d = 0; d < 3; ++d) {
          f.data(idx(k), d) = path(d, idx(s.obs_steps[k])) + full[3] * normal(rng);
        }
      }
      f.theta = full;
      f.meta["steps"] = std::to_string(s.steps);
      std::ostringstream dt;
      dt.precision(17);
      dt << s.dt;
      f.meta["dt"] = dt.str();
      f.meta["obs_steps"] = join_steps(s.obs_steps);
      std::ostringstream x0;
      x0.precision(17);
      x0 << s.x0[0] << ' ' << s.x0[1] << ' ' << s.x0[2];
      f.meta["x0"] = x0.str();
    }
  }
  return f;
}

json write_manifest(const fs::path& out_dir, const std::string& command, const ExperimentConfig* cfg,
                    const std::vector<std::string>& files, json extra) {
  json m{{"command", command}, {"code_version", code_version()}};
  if (cfg) {
    m["config"] = cfg->resolved;
    m["seed"] = cfg->seed;
  }
  json hashes = json::object();
  for (const auto& f : files) hashes[f] = io::sha256_file(out_dir / f);
  m["files"] = hashes;
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_json_file(out_dir / "manifest.json", m);
  return m;
}

json write_generated(const ExperimentConfig& c, const fs::path& out_dir) {
  const auto f = generate_data(c);
  fs::create_directories(out_dir);
  f.save(out_dir / "fixture.txt");
  return write_manifest(out_dir, "generate-data", &c, {"fixture.txt"},
                        {{"fixture", {{"model", f.model}, {"theta", vector_to_json(f.theta)}}}});
}

PretrainOutput run_pretrain(const ExperimentConfig& c, const fs::path& out_dir) {
  auto m = build_model(c);
  require(m.target->has_initial_sampler(), "model " + to_string(c.model) + " has no exact initial sampler to pretrain on");
  const auto t0 = Clock::now();
  Rng rng = derive_rng(c.seed, kPretrainStream);
  PretrainOutput out;
  out.result = pretrain(*m.proposal, *m.target, c.dis.eps0, c.pretrain_config, rng);
  const double secs = seconds_since(t0);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    io::Checkpoint::of(*m.proposal, {{"eps", c.dis.eps0}, {"stage", "pretrain"}, {"steps", out.result.steps}})
        .save(out_dir / "checkpoint_pretrain.json");
    json hist = json::array();
    for (const auto& [step, frac] : out.result.ess_history) hist.push_back({step, frac});
    json extra{{"pretrain",
                {{"steps", out.result.steps},
                 {"ess_fraction", out.result.ess_fraction},
                 {"reached_threshold", out.result.reached_threshold},
                 {"ess_history", hist}}},
               {"wall_seconds", {{"pretrain", secs}}}};
    extra.update(permutation_info(*m.proposal));
    if (m.fixture) extra["fixture"] = {{"path", c.fixture.string()}, {"sha256", m.fixture_sha256}};
    out.manifest = write_manifest(out_dir, "pretrain", &c, {"checkpoint_pretrain.json"}, extra);
  }
  return out;
}

RunOutput run_experiment(const ExperimentConfig& c, const fs::path& out_dir,
                         const std::optional<fs::path>& resume_checkpoint) {
  auto m = build_model(c);
  DisConfig dis_cfg = c.dis;
  const auto t0 = Clock::now();
  RunOutput out;
  std::optional<io::Checkpoint> resume;
  if (resume_checkpoint) {
    resume = io::Checkpoint::load(*resume_checkpoint);
    resume->apply_to(*m.proposal);
    if (resume->state.contains("eps")) dis_cfg.eps0 = resume->state["eps"].get<double>();
  }
  const bool write = !out_dir.empty();
  if (write) fs::create_directories(out_dir);
  std::vector<std::string> files;

  double pretrain_secs = 0.0;
  if (c.pretrain && !resume) {
    require(m.target->has_initial_sampler(), "model " + to_string(c.model) + " has no exact initial sampler to pretrain on");
    Rng rng = derive_rng(c.seed, kPretrainStream);
    out.pretrain = pretrain(*m.proposal, *m.target, dis_cfg.eps0, c.pretrain_config, rng);
    pretrain_secs = seconds_since(t0);
    if (write) {
      io::Checkpoint::of(*m.proposal, {{"eps", dis_cfg.eps0}, {"stage", "pretrain"}, {"steps", out.pretrain->steps}})
          .save(out_dir / "checkpoint_pretrain.json");
      files.push_back("checkpoint_pretrain.json");
    }
  }

  std::optional<io::JsonlWriter> trace;
  std::optional<io::JsonlWriter> timing;
  if (write) {
    trace.emplace(out_dir / "trace.jsonl");
    timing.emplace(out_dir / "timing.jsonl");
  }
  const auto observer = [&](const TraceRow& row, const Proposal&) {
    if (trace) trace->write(to_json(row, false));
    if (timing) timing->write({{"t", row.t}, {"wall_seconds", row.wall_seconds}});
  };
  out.result = run(*m.proposal, *m.target, dis_cfg, observer);
  const double total_secs = seconds_since(t0);
  const double final_eps = out.result.trace.empty() ? dis_cfg.eps0 : out.result.trace.back().eps;

  if (out.result.status != RunStatus::Failed) {
    const std::size_t n_resample = c.resample_size > 0 ? c.resample_size : dis_cfg.target_ess;
    Rng rng = derive_rng(c.seed, kResampleStream);
    out.resample_counts = io::resample_counts(out.result.final_sample, n_resample, rng);
  }
  if (!write) return out;

  files.push_back("trace.jsonl");
  files.push_back("timing.jsonl");
  if (out.result.status != RunStatus::Failed) {
    std::ostringstream csv;
    io::write_posterior_csv(csv, out.result.final_sample, *m.target, out.resample_counts);
    io::write_text_atomic(out_dir / "posterior.csv", csv.str());
    files.push_back("posterior.csv");
  } else {
    write_json_file(out_dir / "error.json",
                    {{"status", to_string(out.result.status)},
                     {"error", out.result.error},
                     {"iterations", out.result.trace.size()},
                     {"eps", final_eps}});
    files.push_back("error.json");
  }
  io::Checkpoint::of(*m.proposal, {{"eps", final_eps},
                                   {"stage", "dis"},
                                   {"iterations", out.result.trace.size()},
                                   {"status", to_string(out.result.status)}})
      .save(out_dir / "checkpoint_final.json");
  files.push_back("checkpoint_final.json");

  json extra{{"status", to_string(out.result.status)},
             {"iterations", out.result.trace.size()},
             {"final_eps", final_eps},
             {"wall_seconds", {{"pretrain", pretrain_secs}, {"dis", out.result.wall_seconds}, {"total", total_secs}}}};
  if (out.result.status != RunStatus::Failed) {
    extra["final_sample"] = {{"n", out.result.final_sample.size()},
                             {"ess", mc::ess(out.result.final_sample.truncation.w_trunc).ess},
                             {"log_z_hat", out.result.final_sample.log_z_hat()},
                             {"resample_size", c.resample_size > 0 ? c.resample_size : dis_cfg.target_ess}};
  }
  if (out.pretrain) {
    extra["pretrain"] = {{"steps", out.pretrain->steps},
                         {"ess_fraction", out.pretrain->ess_fraction},
                         {"reached_threshold", out.pretrain->reached_threshold}};
  }
  if (resume_checkpoint) extra["resumed_from"] = resume_checkpoint->string();
  extra.update(permutation_info(*m.proposal));
  if (m.fixture) extra["fixture"] = {{"path", c.fixture.string()}, {"sha256", m.fixture_sha256}};
  out.manifest = write_manifest(out_dir, "run", &c, files, extra);
  return out;
}

PmcmcOutput run_pmcmc(const ExperimentConfig& c, const fs::path& out_dir) {
  require(c.is_lorenz(), "pmcmc is only available for the Lorenz models");
  auto m = build_model(c);
  const auto& target = static_cast<const models::LorenzTarget&>(*m.target);
  const auto& spec = target.spec();
  const auto P = idx(spec.param_dim());
  const auto& p = c.pmcmc;
  const auto t0 = Clock::now();

  Vector theta_ref = p.initial_theta ? *p.initial_theta : Vector(m.fixture->theta.head(P));
  require(theta_ref.size() == P, "pmcmc.initial_theta has the wrong length");
  require((theta_ref.array() > 0.0).all(), "initial θ must be positive");

  const auto loglik = pmcmc::lorenz_loglik(spec, target.observations());
  const auto prior = pmcmc::lorenz_log_prior(spec);

  PmcmcOutput out;
  if (p.n_particles) {
    out.tuning.n_particles = *p.n_particles;
    out.tuning.achieved = true;
  } else {
    out.tuning = pmcmc::tune_npf(loglik, theta_ref, p.npf_candidates, p.tune_replicates, p.target_sd,
                                 derive_rng(c.seed, kTuneStream)());
    if (!out.tuning.achieved) {
      std::cerr << "warning: no candidate particle count reached log-likelihood sd <= " << p.target_sd << "; using "
                << out.tuning.n_particles << '\n';
    }
  }
  const double tune_secs = seconds_since(t0);

  pmcmc::PmcmcConfig pilot_cfg;
  pilot_cfg.iterations = p.pilot_iterations;
  pilot_cfg.n_particles = out.tuning.n_particles;
  pilot_cfg.initial_theta = theta_ref;
  pilot_cfg.seed = derive_rng(c.seed, kPilotStream)();
  const Vector diag = (p.pilot_scale * theta_ref.cwiseAbs()).array().square();
  pilot_cfg.proposal_cov = diag.asDiagonal();
  out.proposal_cov = pilot_cfg.proposal_cov;
  if (p.pilot_iterations > 0) {
    out.pilot = pmcmc::pmcmc_run(loglik, prior, pilot_cfg);
    if (p.pilot_iterations >= 10) {
      const Matrix est = pmcmc::chain_covariance(out.pilot, p.pilot_iterations / 5);
      Eigen::LLT<Matrix> llt(est);
      if (llt.info() == Eigen::Success && est.allFinite()) out.proposal_cov = est;
    }
  }
  const double pilot_secs = seconds_since(t0) - tune_secs;

  pmcmc::PmcmcConfig cfg = pilot_cfg;
  cfg.iterations = p.iterations;
  cfg.proposal_cov = out.proposal_cov;
  cfg.seed = c.seed;
  out.chain = pmcmc::pmcmc_run(loglik, prior, cfg);
  out.posterior_mean = pmcmc::chain_mean(out.chain, p.burn_in);
  out.ess = pmcmc::batch_means_ess(out.chain, p.burn_in);
  const Matrix cov = pmcmc::chain_covariance(out.chain, p.burn_in);
  out.posterior_se = Vector(P);
  for (Eigen::Index k = 0; k < P; ++k) {
    out.posterior_se[k] = out.ess[k] > 0.0 ? std::sqrt(cov(k, k) / out.ess[k]) : std::numeric_limits<double>::infinity();
  }
  const double total_secs = seconds_since(t0);

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ostringstream chain_csv;
    pmcmc::write_chain_csv(chain_csv, out.chain);
    io::write_text_atomic(out_dir / "chain.csv", chain_csv.str());
    std::vector<std::string> files{"chain.csv"};
    if (out.pilot.size() > 0) {
      std::ostringstream pilot_csv;
      pmcmc::write_chain_csv(pilot_csv, out.pilot);
      io::write_text_atomic(out_dir / "pilot_chain.csv", pilot_csv.str());
      files.push_back("pilot_chain.csv");
    }
    json table = json::array();
    for (const auto& [npf, sd] : out.tuning.sd_table) table.push_back({{"n_particles", npf}, {"sd", sd}});
    json cov_j = json::array();
    for (Eigen::Index r = 0; r < P; ++r) cov_j.push_back(vector_to_json(out.proposal_cov.row(r).transpose()));
    json extra{{"pmcmc",
                {{"n_particles", out.tuning.n_particles},
                 {"tuning_achieved", out.tuning.achieved},
                 {"sd_table", table},
                 {"proposal_cov", cov_j},
                 {"acceptance_rate", out.chain.acceptance_rate},
                 {"pilot_acceptance_rate", out.pilot.acceptance_rate},
                 {"posterior_mean", vector_to_json(out.posterior_mean)},
                 {"posterior_se", vector_to_json(out.posterior_se)},
                 {"ess", vector_to_json(out.ess)},
                 {"ess_method", pmcmc::kEssMethod}}},
               {"wall_seconds", {{"tune", tune_secs}, {"pilot", pilot_secs}, {"total", total_secs}}},
               {"fixture", {{"path", c.fixture.string()}, {"sha256", m.fixture_sha256}}}};
    out.manifest = write_manifest(out_dir, "pmcmc", &c, files, extra);
  }
  return out;
}

json diagnose(const ExperimentConfig& c, const fs::path& checkpoint, std::optional<double> eps,
              std::optional<std::size_t> n_samples) {
  auto m = build_model(c);
  const auto ck = io::Checkpoint::load(checkpoint);
  ck.apply_to(*m.proposal);
  double e = c.dis.eps0;
  if (eps) {
    e = *eps;
  } else if (ck.state.contains("eps")) {
    e = ck.state["eps"].get<double>();
  }
  const auto dom = m.target->eps_domain();
  require(e >= dom.lower && e <= dom.upper, "ε is outside the target's domain");
  const std::size_t n = n_samples.value_or(c.dis.n_samples);
  Rng rng = derive_rng(c.seed, kDiagnoseStream);
  const auto s = weighted_sample(*m.proposal, *m.target, e, n, c.dis.truncation_target, rng);
  const auto raw = mc::ess(s.weights.mantissa);
  const auto trunc = mc::ess(s.truncation.w_trunc);
  return {{"eps", e},
          {"n", n},
          {"ess", raw.ess},
          {"ess_fraction", raw.ess / static_cast<double>(n)},
          {"max_norm_weight", raw.max_norm_weight},
          {"truncated_ess", trunc.ess},
          {"truncation_feasible", s.truncation.feasible},
          {"log_z_hat", s.log_z_hat()},
          {"checkpoint", checkpoint.string()}};
}

}  // namespace dis::experiment
