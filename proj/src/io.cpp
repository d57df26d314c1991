#include "dis/io.hpp"

#include "dis/errors.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace dis::io {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& token) {
  const std::string t = trim(token);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size()) throw ContractError("not a number: '" + token + "'");
  return v;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::vector<double> parse_numbers(const std::string& line) {
  std::istringstream is(line);
  std::vector<double> out;
  std::string tok;
  while (is >> tok) out.push_back(parse_double(tok));
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void Fixture::write(std::ostream& out) const {
  out << "# model: " << model << '\n';
  out << "# seed: " << seed << '\n';
  out << "# version: " << version << '\n';
  out << "# theta:";
  for (Eigen::Index k = 0; k < theta.size(); ++k) out << ' ' << format_double(theta[k]);
  out << '\n';
  for (const auto& [k, v] : meta) out << "# " << k << ": " << v << '\n';
  for (Eigen::Index r = 0; r < data.rows(); ++r) {
    for (Eigen::Index c = 0; c < data.cols(); ++c) out << (c ? " " : "") << format_double(data(r, c));
    out << '\n';
  }
}

Fixture Fixture::read(std::istream& in) {
  Fixture f;
  bool have_model = false;
  bool have_version = false;
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const auto colon = t.find(':');
      if (colon == std::string::npos) continue;
      const std::string key = trim(t.substr(1, colon - 1));
      const std::string value = trim(t.substr(colon + 1));
      if (key == "model") {
        f.model = value;
        have_model = true;
      } else if (key == "seed") {
        f.seed = std::stoull(value);
      } else if (key == "version") {
        f.version = std::stoi(value);
        have_version = true;
      } else if (key == "theta") {
        const auto v = parse_numbers(value);
        f.theta = Eigen::Map<const Vector>(v.data(), idx(v.size()));
      } else {
        f.meta[key] = value;
      }
      continue;
    }
    rows.push_back(parse_numbers(t));
  }
  require(have_model && have_version, "fixture header must name a model and a version");
  require(f.version == kFixtureVersion, "unsupported fixture version " + std::to_string(f.version));
  require(!rows.empty(), "fixture has no data rows");
  const auto cols = rows.front().size();
  f.data.resize(idx(rows.size()), idx(cols));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r].size() == cols, "fixture rows differ in length");
    for (std::size_t c = 0; c < cols; ++c) f.data(idx(r), idx(c)) = rows[r][c];
  }
  return f;
}

void Fixture::save(const fs::path& path) const {
  std::ostringstream os;
  write(os);
  write_text_atomic(path, os.str());
}

Fixture Fixture::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open fixture " + path.string());
  return read(in);
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

Checkpoint Checkpoint::of(const Proposal& q, nlohmann::json state) {
  return {q.architecture(), q.params().layout(), q.params().values(), std::move(state)};
}

void Checkpoint::apply_to(Proposal& q) const {
  require(q.architecture() == architecture, "checkpoint architecture does not match the proposal");
  const auto& target_layout = q.params().layout();
  require(target_layout.size() == layout.size(), "checkpoint layout does not match the proposal");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    require(target_layout[i].name == layout[i].name && target_layout[i].offset == layout[i].offset &&
                target_layout[i].length == layout[i].length,
            "checkpoint slice " + layout[i].name + " does not match the proposal");
  }
  q.params().assign(values);
}

nlohmann::json Checkpoint::to_json() const {
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : layout) {
    slices.push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.length}, {"is_weight", s.is_weight}});
  }
  return {{"format", "dis-checkpoint"},
          {"version", 1},
          {"architecture", architecture},
          {"layout", slices},
          {"values", std::vector<double>(values.data(), values.data() + values.size())},
          {"state", state}};
}

Checkpoint Checkpoint::from_json(const nlohmann::json& j) {
  require(j.value("format", std::string()) == "dis-checkpoint", "not a checkpoint file");
  Checkpoint c;
  c.architecture = j.at("architecture");
  for (const auto& s : j.at("layout")) {
    c.layout.push_back({s.at("name").get<std::string>(), s.at("offset").get<std::size_t>(),
                        s.at("length").get<std::size_t>(), s.at("is_weight").get<bool>()});
  }
  const auto v = j.at("values").get<std::vector<double>>();
  c.values = Eigen::Map<const Vector>(v.data(), idx(v.size()));
  c.state = j.value("state", nlohmann::json::object());
  std::size_t total = 0;
  for (const auto& s : c.layout) {
    require(s.offset == total, "checkpoint layout is not contiguous");
    total += s.length;
  }
  require(total == v.size(), "checkpoint value count does not match its layout");
  return c;
}

void Checkpoint::save(const fs::path& path) const { write_text_atomic(path, to_json().dump(1) + "\n"); }

Checkpoint Checkpoint::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open checkpoint " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ContractError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

nlohmann::json to_json(const Adam& adam) {
  const auto& m = adam.first_moment();
  const auto& v = adam.second_moment();
  return {{"settings", to_json(adam.settings())},
          {"steps", adam.steps()},
          {"m", std::vector<double>(m.data(), m.data() + m.size())},
          {"v", std::vector<double>(v.data(), v.data() + v.size())}};
}

void restore_adam(Adam& adam, const nlohmann::json& j) {
  const auto m = j.at("m").get<std::vector<double>>();
  const auto v = j.at("v").get<std::vector<double>>();
  adam.restore(j.at("steps").get<std::size_t>(), Eigen::Map<const Vector>(m.data(), idx(m.size())),
               Eigen::Map<const Vector>(v.data(), idx(v.size())));
}

JsonlWriter::JsonlWriter(const fs::path& path) : out_(path, std::ios::trunc) {
  if (!out_) throw ContractError("cannot write " + path.string());
}

void JsonlWriter::write(const nlohmann::json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
}

std::vector<std::size_t> resample_counts(const mc::WeightedSample& sample, std::size_t n, Rng& rng) {
  std::vector<std::size_t> counts(sample.size(), 0);
  if (n == 0 || sample.truncated_total() <= 0.0) return counts;
  for (auto i : mc::resample(sample.truncation.w_trunc, n, rng)) ++counts[i];
  return counts;
}

void write_posterior_csv(std::ostream& out, const mc::WeightedSample& sample, const TemperedTarget& target,
                         const std::vector<std::size_t>& counts) {
  require(counts.size() == sample.size(), "resample counts do not match the sample");
  const auto P = target.parameter_dim();
  out << "index,log_q,log_p_tilde,log_weight,weight,resample_count";
  for (std::size_t k = 0; k < P; ++k) out << ",theta_" << (k + 1);
  out << '\n';
  const double total = sample.truncated_total();
  out << std::setprecision(17);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto j = idx(i);
    const double w = total > 0.0 ? sample.truncation.w_trunc[j] / total : 0.0;
    out << i << ',' << sample.log_q[j] << ',' << sample.log_p_tilde[j] << ',' << (sample.log_p_tilde[j] - sample.log_q[j])
        << ',' << w << ',' << counts[i];
    const Vector theta = target.parameters(sample.xis.col(j));
    for (Eigen::Index k = 0; k < theta.size(); ++k) out << ',' << theta[k];
    out << '\n';
  }
}

CsvTable CsvTable::read(std::istream& in) {
  CsvTable t;
  std::string line;
  while (std::getline(in, line) && trim(line).empty()) {
  }
  require(!trim(line).empty(), "CSV input is empty");
  t.header = split_csv(trim(line));
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split_csv(trim(line));
    require(cells.size() == t.header.size(), "CSV row has " + std::to_string(cells.size()) + " cells, expected " +
                                                 std::to_string(t.header.size()));
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) row.push_back(parse_double(c));
    rows.push_back(std::move(row));
  }
  t.rows.resize(idx(rows.size()), idx(t.header.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < t.header.size(); ++c) t.rows(idx(r), idx(c)) = rows[r][c];
  }
  return t;
}

std::optional<std::size_t> CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) return std::nullopt;
  return static_cast<std::size_t>(it - header.begin());
}

double weighted_quantile(const Vector& values, const Vector& weights, double p) {
  require(values.size() == weights.size() && values.size() > 0, "quantile input is empty or mismatched");
  require(p >= 0.0 && p <= 1.0, "quantile level must be in [0, 1]");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(values.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  const double total = weights.sum();
  require(total > 0.0, "weights sum to zero");
  double cum = 0.0;
  for (auto i : order) {
    if (weights[i] <= 0.0) continue;
    cum += weights[i] / total;
    if (cum >= p - 1e-12) return values[i];
  }
  return values[order.back()];
}

Summary summarise(const CsvTable& table, const HistogramSpec& hist) {
  require(table.rows.rows() > 0, "cannot summarise an empty sample");
  require(hist.bins >= 1, "histogram needs at least one bin");
  Summary s;
  s.rows = static_cast<std::size_t>(table.rows.rows());
  Vector w = Vector::Ones(table.rows.rows());
  if (auto c = table.column("weight")) {
    w = table.rows.col(idx(*c));
    s.weight_column = "weight";
  }
  require((w.array() >= 0.0).all() && w.sum() > 0.0, "weights must be non-negative with a positive total");

  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    if (table.header[c].rfind("theta_", 0) == 0) cols.push_back(c);
  }
  if (cols.empty()) {
    for (std::size_t c = 0; c < table.header.size(); ++c) {
      if (table.header[c] != "weight") cols.push_back(c);
    }
  }
  s.ess = mc::ess(w).ess;
  const Vector wn = w / w.sum();
  for (auto c : cols) {
    CoordinateSummary cs;
    cs.name = table.header[c];
    const Vector h = table.rows.col(idx(c));
    cs.mean = mc::self_normalised_estimate(w, h);
    cs.sd = std::sqrt(std::max(0.0, (wn.array() * (h.array() - cs.mean).square()).sum()));
    cs.std_error = mc::self_normalised_std_error(w, h);
    for (double p : kSummaryQuantiles) cs.quantiles.emplace_back(p, weighted_quantile(h, w, p));
    if (hist.range) {
      std::tie(cs.hist_lo, cs.hist_hi) = *hist.range;
    } else {
      cs.hist_lo = std::numeric_limits<double>::infinity();
      cs.hist_hi = -std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < h.size(); ++i) {
        if (w[i] <= 0.0) continue;
        cs.hist_lo = std::min(cs.hist_lo, h[i]);
        cs.hist_hi = std::max(cs.hist_hi, h[i]);
      }
      if (cs.hist_lo == cs.hist_hi) {
        cs.hist_lo -= 0.5;
        cs.hist_hi += 0.5;
      }
    }
    require(cs.hist_hi > cs.hist_lo, "histogram range must be increasing");
    cs.hist_counts.assign(hist.bins, 0.0);
    const double width = (cs.hist_hi - cs.hist_lo) / static_cast<double>(hist.bins);
    for (Eigen::Index i = 0; i < h.size(); ++i) {
      if (wn[i] <= 0.0 || h[i] < cs.hist_lo || h[i] > cs.hist_hi) continue;
      auto b = static_cast<std::size_t>((h[i] - cs.hist_lo) / width);
      cs.hist_counts[std::min(b, hist.bins - 1)] += wn[i];
    }
    s.coordinates.push_back(std::move(cs));
  }
  return s;
}

nlohmann::json Summary::to_json() const {
  nlohmann::json coords = nlohmann::json::array();
  for (const auto& c : coordinates) {
    nlohmann::json q = nlohmann::json::object();
    for (const auto& [p, v] : c.quantiles) q[format_double(p)] = v;
    coords.push_back({{"name", c.name},
                      {"mean", c.mean},
                      {"sd", c.sd},
                      {"std_error", c.std_error},
                      {"quantiles", q},
                      {"histogram",
                       {{"bins", c.hist_counts.size()}, {"range", {c.hist_lo, c.hist_hi}}, {"weights", c.hist_counts}}}});
  }
  return {{"rows", rows}, {"ess", ess}, {"weight_column", weight_column}, {"coordinates", coords}};
}

void write_text_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ContractError("cannot write " + path.string());
    out << content;
    if (!out) throw ContractError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

}  // namespace dis::io
