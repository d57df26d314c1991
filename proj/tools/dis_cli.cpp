// Command-line driver: generate-data, pretrain, run, pmcmc, diagnose, summarise.

#include "dis/errors.hpp"
#include "dis/experiment.hpp"
#include "dis/io.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

namespace fs = std::filesystem;
using dis::experiment::ExperimentConfig;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRunFailed = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_output) {
  cmd->add_option("--config", f.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Override the config seed");
  auto* out = cmd->add_option("--output", f.output, "Output directory");
  if (needs_output) out->required();
  cmd->add_option("--threads", f.threads, "Worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig load(const CommonFlags& f) {
  return dis::experiment::load_config(f.config, {f.seed, f.threads});
}

void refuse_existing_outputs(const fs::path& dir) {
  if (fs::exists(dir / "manifest.json")) {
    throw dis::ContractError("output directory " + dir.string() + " already holds a run; choose a fresh one");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distilled importance sampling experiments"};
  app.require_subcommand(1);

  CommonFlags gen_f, pre_f, run_f, pm_f, diag_f;
  auto* gen = app.add_subcommand("generate-data", "Simulate a synthetic fixture dataset");
  add_common(gen, gen_f, true);

  auto* pre = app.add_subcommand("pretrain", "Fit the proposal to exact draws from the initial target");
  add_common(pre, pre_f, true);

  auto* run = app.add_subcommand("run", "Pretrain (if configured) and run DIS");
  add_common(run, run_f, true);
  std::optional<std::string> resume;
  run->add_option("--checkpoint", resume, "Resume from a checkpoint instead of pretraining")->check(CLI::ExistingFile);

  auto* pm = app.add_subcommand("pmcmc", "Particle-marginal Metropolis-Hastings baseline (Lorenz)");
  add_common(pm, pm_f, true);

  auto* diag = app.add_subcommand("diagnose", "Report ESS of a checkpointed proposal at a given epsilon");
  add_common(diag, diag_f, false);
  std::string diag_ckpt;
  std::optional<double> diag_eps;
  std::optional<std::size_t> diag_n;
  diag->add_option("--checkpoint", diag_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  diag->add_option("--eps", diag_eps, "Epsilon (default: the checkpoint's)");
  diag->add_option("--samples", diag_n, "Number of draws (default: dis.n_samples)");

  auto* sum = app.add_subcommand("summarise", "Weighted summary of a posterior or chain CSV");
  std::string sum_in;
  std::string sum_out;
  std::size_t bins = 20;
  std::optional<std::vector<double>> range;
  sum->add_option("--input", sum_in, "CSV file")->required()->check(CLI::ExistingFile);
  sum->add_option("--output", sum_out, "Output directory (default: print to stdout)");
  sum->add_option("--bins", bins, "Histogram bins")->check(CLI::PositiveNumber);
  sum->add_option("--range", range, "Histogram range LO HI")->expected(2);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  // Configuration problems surface before anything is written.
  std::optional<ExperimentConfig> cfg;
  try {
    if (*gen) cfg = load(gen_f);
    if (*pre) cfg = load(pre_f);
    if (*run) cfg = load(run_f);
    if (*pm) cfg = load(pm_f);
    if (*diag) cfg = load(diag_f);
    if (cfg && !*diag) {
      const CommonFlags& f = *gen ? gen_f : *pre ? pre_f : *run ? run_f : pm_f;
      refuse_existing_outputs(f.output);
      if (!*gen) dis::experiment::build_model(*cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*gen) {
      const auto m = dis::experiment::write_generated(*cfg, gen_f.output);
      std::cout << m["fixture"].dump() << '\n';
    } else if (*pre) {
      const auto out = dis::experiment::run_pretrain(*cfg, pre_f.output);
      std::cout << out.manifest["pretrain"].dump() << '\n';
    } else if (*run) {
      std::optional<fs::path> ck;
      if (resume) ck = *resume;
      const auto out = dis::experiment::run_experiment(*cfg, run_f.output, ck);
      std::cout << nlohmann::json{{"status", out.manifest["status"]},
                                  {"iterations", out.manifest["iterations"]},
                                  {"final_eps", out.manifest["final_eps"]}}
                       .dump()
                << '\n';
      if (out.result.status == dis::RunStatus::Failed) {
        std::cerr << "run failed: " << out.result.error << '\n';
        return kExitRunFailed;
      }
    } else if (*pm) {
      const auto out = dis::experiment::run_pmcmc(*cfg, pm_f.output);
      std::cout << out.manifest["pmcmc"].dump() << '\n';
    } else if (*diag) {
      std::cout << dis::experiment::diagnose(*cfg, diag_ckpt, diag_eps, diag_n).dump(2) << '\n';
    } else if (*sum) {
      std::ifstream in(sum_in);
      const auto table = dis::io::CsvTable::read(in);
      dis::io::HistogramSpec hist{bins, std::nullopt};
      if (range) hist.range = std::make_pair((*range)[0], (*range)[1]);
      auto summary = dis::io::summarise(table, hist).to_json();
      summary["input"] = sum_in;
      summary["input_sha256"] = dis::io::sha256_file(sum_in);
      if (sum_out.empty()) {
        std::cout << summary.dump(2) << '\n';
      } else {
        fs::create_directories(sum_out);
        dis::io::write_text_atomic(fs::path(sum_out) / "summary.json", summary.dump(2) + "\n");
        dis::experiment::write_manifest(sum_out, "summarise", nullptr, {"summary.json"},
                                        {{"input", sum_in}, {"code_version", dis::experiment::code_version()}});
      }
    }
  } catch (const dis::ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitOk;
}
