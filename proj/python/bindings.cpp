// Python bindings for the core operations.

#include "dis/errors.hpp"
#include "dis/experiment.hpp"
#include "dis/flow.hpp"
#include "dis/io.hpp"
#include "dis/models/sinusoid.hpp"
#include "dis/montecarlo.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>
#include <optional>

namespace py = pybind11;
using namespace dis;

namespace {

experiment::ExperimentConfig config_at(const std::filesystem::path& path, std::optional<std::uint64_t> seed) {
  return experiment::load_config(path, {seed, std::nullopt});
}

flow::FlowProposal make_flow(std::size_t dim, std::size_t couplings, std::vector<std::size_t> hidden,
                             const std::string& permutation, std::uint64_t seed) {
  flow::FlowArchitecture a;
  a.dim = dim;
  a.couplings = couplings;
  a.hidden = std::move(hidden);
  if (permutation == "reverse") {
    a.permutation = flow::PermutationKind::Reverse;
  } else if (permutation == "random") {
    a.permutation = flow::PermutationKind::Random;
  } else {
    throw ContractError("permutation must be 'reverse' or 'random'");
  }
  a.permutation_seed = seed;
  Rng rng(seed);
  return flow::FlowProposal::init_identity(a, rng);
}

}  // namespace

PYBIND11_MODULE(_dis, m) {
  m.doc() = "Distilled importance sampling core";

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);

  m.def("ess", [](const Vector& w) {
    const auto r = mc::ess(w);
    return py::dict(py::arg("ess") = r.ess, py::arg("n") = r.n, py::arg("max_norm_weight") = r.max_norm_weight);
  }, py::arg("weights"));

  m.def("auto_truncate", [](const Vector& w, double target) {
    const auto t = mc::auto_truncate(w, target);
    return py::dict(py::arg("weights") = t.w_trunc, py::arg("omega") = t.omega,
                    py::arg("max_norm_weight") = t.max_norm_weight, py::arg("feasible") = t.feasible);
  }, py::arg("weights"), py::arg("target_max_norm") = 0.1);

  m.def("compute_weights", [](const Vector& log_p, const Vector& log_q) {
    const auto w = mc::compute_weights(log_p, log_q);
    return py::make_tuple(w.mantissa, w.log_offset);
  }, py::arg("log_p_tilde"), py::arg("log_q"), "Returns (mantissa, log_offset).");

  m.def("resample", [](const Vector& w, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    return mc::resample(w, n, rng);
  }, py::arg("weights"), py::arg("n"), py::arg("seed"));

  m.def("self_normalised_estimate", &mc::self_normalised_estimate, py::arg("weights"), py::arg("values"));

  py::class_<flow::FlowProposal>(m, "Flow")
      .def(py::init(&make_flow), py::arg("dim"), py::arg("couplings") = 4,
           py::arg("hidden") = std::vector<std::size_t>{10, 10, 10}, py::arg("permutation") = "reverse",
           py::arg("seed") = 1)
      .def_property_readonly("dim", &flow::FlowProposal::dim)
      .def_property_readonly("n_params", [](const flow::FlowProposal& q) { return q.params().values().size(); })
      .def("sample", [](const flow::FlowProposal& q, std::size_t n, std::uint64_t seed) {
        Rng rng(seed);
        auto d = q.sample(rng, n);
        return py::make_tuple(Matrix(d.xis.transpose()), d.log_q);
      }, py::arg("n"), py::arg("seed"), "Returns (draws with one row per sample, log q).")
      .def("log_prob", [](const flow::FlowProposal& q, const Matrix& rows) {
        return q.log_prob(Batch(rows.transpose()));
      }, py::arg("x"))
      .def("load_checkpoint", [](flow::FlowProposal& q, const std::filesystem::path& p) {
        io::Checkpoint::load(p).apply_to(q);
      }, py::arg("path"));

  m.def("sinusoid_log_density", [](const Matrix& rows, double eps, double sigma0) {
    models::SinusoidTarget t(sigma0);
    Vector out(rows.rows());
    for (Eigen::Index i = 0; i < rows.rows(); ++i) out[i] = t.log_p_tilde(Vector(rows.row(i).transpose()), eps);
    return out;
  }, py::arg("x"), py::arg("eps"), py::arg("sigma0") = 2.0);

  m.def("check_config", [](const std::filesystem::path& path, std::optional<std::uint64_t> seed) {
    return config_at(path, seed).resolved.dump();
  }, py::arg("path"), py::arg("seed") = py::none(), "Resolved configuration as JSON text.");

  m.def("run", [](const std::filesystem::path& path, const std::filesystem::path& out, std::optional<std::uint64_t> seed) {
    const auto cfg = config_at(path, seed);
    py::gil_scoped_release release;
    return experiment::run_experiment(cfg, out).manifest.dump();
  }, py::arg("config"), py::arg("output"), py::arg("seed") = py::none(), "Runs DIS and returns the manifest JSON.");

  m.def("generate_data", [](const std::filesystem::path& path, std::optional<std::uint64_t> seed) {
    const auto f = experiment::generate_data(config_at(path, seed));
    return py::make_tuple(f.theta, f.data);
  }, py::arg("config"), py::arg("seed") = py::none(), "Returns (theta, data).");

  m.def("summarise", [](const std::filesystem::path& csv) {
    std::ifstream in(csv);
    if (!in) throw ContractError("cannot open " + csv.string());
    return io::summarise(io::CsvTable::read(in)).to_json().dump();
  }, py::arg("path"), "Weighted summary JSON of a posterior or chain CSV.");
}
