#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "casters.hpp"
#include "stochinv/experiment.hpp"
#include "stochinv/plot.hpp"

namespace py = pybind11;
using namespace stochinv;

namespace {

py::object toPython(const io::Json& j) { return py::module::import("json").attr("loads")(j.dump()); }

io::Json fromPython(const py::object& o) {
  return io::Json::parse(py::module::import("json").attr("dumps")(o).cast<std::string>());
}

}  // namespace

void bind_experiment(py::module& m) {
  m.def(
      "run_experiment",
      [](const py::object& config, const std::string& baseDir, std::optional<std::string> outputDir) {
        ExperimentConfig cfg = py::isinstance<py::str>(config)
                                   ? loadExperimentConfig(config.cast<std::string>())
                                   : parseExperimentConfig(fromPython(config), baseDir);
        if (outputDir) cfg.outputDir = *outputDir;
        const RunManifest manifest = runExperiment(cfg);
        py::dict out = toPython(toJson(manifest));
        out["exit_code"] = exitCode(manifest);
        return out;
      },
      py::arg("config"), py::arg("base_dir") = "", py::arg("output_dir") = py::none(),
      "Runs a config given as a dict or a JSON file path; returns the manifest.");
  m.def(
      "validate_experiment",
      [](const py::object& config, const std::string& baseDir) {
        validateExperimentConfig(parseExperimentConfig(fromPython(config), baseDir));
      },
      py::arg("config"), py::arg("base_dir") = "");
  m.def(
      "compute_distance",
      [](const Measure& mu, const Measure& nu, const std::string& metric, std::optional<double> eps) {
        return toPython(computeDistance(mu, nu, metric, eps));
      },
      py::arg("mu"), py::arg("nu"), py::arg("metric") = "w2", py::arg("sinkhorn_epsilon") = py::none());
  m.def("log_space", &logSpace, py::arg("lower"), py::arg("upper"), py::arg("n"));
  m.def("read_measure", [](const std::string& path) { return io::readMeasure(path); }, py::arg("path"));
  m.def(
      "write_measure", [](const std::string& path, const Measure& measure) { io::writeMeasure(path, measure); },
      py::arg("path"), py::arg("measure"));
  m.def(
      "emit_plot",
      [](const std::string& input, const std::string& kind, const std::string& out) {
        return emitPlot(input, parsePlotKind(kind), out).string();
      },
      py::arg("input"), py::arg("kind"), py::arg("out"));
}
