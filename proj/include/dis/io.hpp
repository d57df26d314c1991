#pragma once

#include "dis/dis.hpp"
#include "dis/montecarlo.hpp"
#include "dis/nn.hpp"
#include "dis/target.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace dis::io {

namespace fs = std::filesystem;

inline constexpr int kFixtureVersion = 1;

/// Plain-text numeric dataset: `# key: value` header lines, then whitespace-separated rows.
struct Fixture {
  std::string model;
  std::uint64_t seed = 0;
  int version = kFixtureVersion;
  Vector theta;                                // parameters used to simulate
  std::map<std::string, std::string> meta;     // any further header entries
  Matrix data;                                 // one row per line

  void write(std::ostream& out) const;
  static Fixture read(std::istream& in);
  void save(const fs::path& path) const;
  static Fixture load(const fs::path& path);
};

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const fs::path& path);

/// Proposal parameters plus the optimiser state needed to resume.
struct Checkpoint {
  nlohmann::json architecture;
  std::vector<nn::Slice> layout;
  Vector values;
  nlohmann::json state;  // eps, iteration, adam moments, free-form extras

  static Checkpoint of(const Proposal& q, nlohmann::json state = nlohmann::json::object());
  /// Copies the parameters into `q` after checking that architecture and layout agree.
  void apply_to(Proposal& q) const;

  nlohmann::json to_json() const;
  static Checkpoint from_json(const nlohmann::json& j);
  void save(const fs::path& path) const;
  static Checkpoint load(const fs::path& path);
};

nlohmann::json to_json(const Adam& adam);
void restore_adam(Adam& adam, const nlohmann::json& j);

/// Append-only JSONL stream, flushed after each record.
class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& path);
  void write(const nlohmann::json& record);

 private:
  std::ofstream out_;
};

/// Posterior sample table. Columns: index, log_q, log_p_tilde, log_weight, weight,
/// resample_count, theta_1..theta_P. `weight` is the truncated weight normalised to sum 1.
void write_posterior_csv(std::ostream& out, const mc::WeightedSample& sample, const TemperedTarget& target,
                         const std::vector<std::size_t>& resample_counts);

/// Per-index counts of n multinomial draws from the truncated weights.
std::vector<std::size_t> resample_counts(const mc::WeightedSample& sample, std::size_t n, Rng& rng);

struct CsvTable {
  std::vector<std::string> header;
  Matrix rows;  // row-major view: one row per data line

  static CsvTable read(std::istream& in);
  std::optional<std::size_t> column(const std::string& name) const;
};

struct HistogramSpec {
  std::size_t bins = 20;
  std::optional<std::pair<double, double>> range;  // default: min/max of the positive-weight values
};

struct CoordinateSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;          // weighted population standard deviation
  double std_error = 0.0;   // of the weighted mean
  std::vector<std::pair<double, double>> quantiles;  // (p, value)
  double hist_lo = 0.0;
  double hist_hi = 0.0;
  std::vector<double> hist_counts;  // weighted counts, summing to the total normalised weight (1)
};

struct Summary {
  std::size_t rows = 0;
  double ess = 0.0;
  std::string weight_column;  // empty when equally weighted
  std::vector<CoordinateSummary> coordinates;

  nlohmann::json to_json() const;
};

inline const std::vector<double> kSummaryQuantiles{0.025, 0.25, 0.5, 0.75, 0.975};

/// Weighted summary of every theta_* column (all numeric columns when none exist).
/// Uses the `weight` column when present, otherwise equal weights.
Summary summarise(const CsvTable& table, const HistogramSpec& hist = {});

/// Smallest value whose cumulative normalised weight reaches p.
double weighted_quantile(const Vector& values, const Vector& weights, double p);

/// Writes `content` to `path` via a temporary file and rename.
void write_text_atomic(const fs::path& path, const std::string& content);

}  // namespace dis::io
