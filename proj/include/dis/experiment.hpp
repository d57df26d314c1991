#pragma once

#include "dis/dis.hpp"
#include "dis/flow.hpp"
#include "dis/io.hpp"
#include "dis/models/lorenz.hpp"
#include "dis/pmcmc.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace dis::experiment {

namespace fs = std::filesystem;

enum class ModelId { Sinusoid, Mg1, Lorenz, LorenzFixedSigma };
std::string to_string(ModelId id);
ModelId model_from_string(const std::string& name);

struct GenerateSettings {
  Vector theta;                  // parameters to simulate from
  std::size_t observations = 20; // M/G/1 data length
};

struct PmcmcSettings {
  std::size_t iterations = 20000;
  std::size_t pilot_iterations = 2000;
  double pilot_scale = 0.1;      // pilot proposal sd = pilot_scale * |θ_ref|
  std::size_t burn_in = 1000;    // discarded from reported means and ESS
  std::optional<std::size_t> n_particles;  // unset: chosen by tune_npf
  std::vector<std::size_t> npf_candidates{25, 50, 100, 200, 400, 800, 1600, 3200};
  std::size_t tune_replicates = 20;
  double target_sd = 1.5;
  std::optional<Vector> initial_theta;     // unset: the fixture's true parameters
};

struct ExperimentConfig {
  ModelId model = ModelId::Sinusoid;
  std::uint64_t seed = 1;
  fs::path fixture;              // resolved against the config file's directory
  DisConfig dis;
  bool pretrain = false;
  PretrainConfig pretrain_config;
  flow::FlowArchitecture flow;   // the proposal flow (the θ-flow for Lorenz)
  double sinusoid_sigma0 = 2.0;
  double mg1_eps_floor = 1e-6;
  models::LorenzSpec lorenz;
  std::vector<std::size_t> lorenz_step_hidden{80, 80, 80};
  GenerateSettings generate;
  PmcmcSettings pmcmc;
  std::size_t resample_size = 0; // 0: the target ESS M
  nlohmann::json resolved;       // full configuration after defaults, echoed into manifests

  bool is_lorenz() const noexcept { return model == ModelId::Lorenz || model == ModelId::LorenzFixedSigma; }
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

/// Throws ContractError on any malformed or inconsistent setting.
ExperimentConfig parse_config(nlohmann::json j, const fs::path& base_dir, const Overrides& overrides = {});
ExperimentConfig load_config(const fs::path& path, const Overrides& overrides = {});

/// Target plus an identity-initialised proposal.
struct Model {
  std::unique_ptr<TemperedTarget> target;
  std::unique_ptr<Proposal> proposal;
  std::optional<io::Fixture> fixture;
  std::string fixture_sha256;
};

Model build_model(const ExperimentConfig& cfg);

/// Deterministic synthetic dataset for the configured model and generate.theta.
io::Fixture generate_data(const ExperimentConfig& cfg);

/// Lorenz targets need their observations as 3 x n_obs.
Matrix lorenz_observations(const io::Fixture& fixture);

struct RunOutput {
  RunResult result;
  std::optional<PretrainResult> pretrain;
  std::vector<std::size_t> resample_counts;
  nlohmann::json manifest;
};

/// Pretraining (if configured) followed by DIS, writing trace.jsonl, timing.jsonl,
/// posterior.csv, checkpoint files and manifest.json into `out_dir` (when non-empty).
RunOutput run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir,
                         const std::optional<fs::path>& resume_checkpoint = std::nullopt);

struct PretrainOutput {
  PretrainResult result;
  nlohmann::json manifest;
};
PretrainOutput run_pretrain(const ExperimentConfig& cfg, const fs::path& out_dir);

struct PmcmcOutput {
  pmcmc::TuneResult tuning;
  pmcmc::Chain pilot;
  pmcmc::Chain chain;
  Matrix proposal_cov;
  Vector posterior_mean;
  Vector posterior_se;   // sd / sqrt(ESS) per coordinate
  Vector ess;
  nlohmann::json manifest;
};
PmcmcOutput run_pmcmc(const ExperimentConfig& cfg, const fs::path& out_dir);

/// ESS/N of fresh proposal draws against p_ε, without training.
nlohmann::json diagnose(const ExperimentConfig& cfg, const fs::path& checkpoint, std::optional<double> eps,
                        std::optional<std::size_t> n_samples);

/// Writes fixture.txt and manifest.json.
nlohmann::json write_generated(const ExperimentConfig& cfg, const fs::path& out_dir);

/// Creates out_dir and writes manifest.json listing `files` with their hashes.
nlohmann::json write_manifest(const fs::path& out_dir, const std::string& command, const ExperimentConfig* cfg,
                              const std::vector<std::string>& files, nlohmann::json extra);

std::string code_version();

}  // namespace dis::experiment
