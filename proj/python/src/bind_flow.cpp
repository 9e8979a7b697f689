#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "casters.hpp"
#include "stochinv/error.hpp"
#include "stochinv/flow.hpp"

namespace py = pybind11;
using namespace stochinv;

namespace {

FlowScheme schemeByName(const std::string& name) {
  for (FlowScheme s : {FlowScheme::particleEuler, FlowScheme::particleRK4, FlowScheme::gridFokkerPlanck,
                       FlowScheme::gaussianODE, FlowScheme::particleW2}) {
    if (name == flowSchemeName(s)) return s;
  }
  fail(ErrorCode::InvalidArgument, "unknown scheme \"" + name + "\"");
}

FDivergenceSpec divergenceByName(const std::string& name) {
  if (name == "kl") return FDivergenceSpec::kl();
  if (name == "chi2") return FDivergenceSpec::chiSquared();
  if (name == "hellinger") return FDivergenceSpec::totalVariationSquaredGenerator();
  fail(ErrorCode::InvalidArgument, "unknown divergence \"" + name + "\"");
}

}  // namespace

void bind_flow(py::module& m) {
  py::class_<DecayFit>(m, "DecayFit")
      .def_readonly("rate", &DecayFit::rate)
      .def_readonly("r2", &DecayFit::r2)
      .def_readonly("valid", &DecayFit::valid);

  py::class_<FlowTrace>(m, "FlowTrace")
      .def_readonly("times", &FlowTrace::times)
      .def_readonly("kl", &FlowTrace::klToTarget)
      .def_readonly("w2", &FlowTrace::w2ToTarget)
      .def_readonly("snapshot_times", &FlowTrace::snapshotTimes)
      .def_readonly("snapshots", &FlowTrace::snapshots)
      .def_readonly("decay_fit", &FlowTrace::decayFit)
      .def_readonly("clamped_mass", &FlowTrace::clampedMass)
      .def_readonly("valid", &FlowTrace::valid)
      .def_readonly("warnings", &FlowTrace::warnings);

  m.def(
      "run_flow",
      [](const Measure& init, const ForwardMap& map, const Measure& target, double dt, double tMax,
         const std::string& scheme, std::optional<double> bandwidth, int recordEvery, const std::string& divergence,
         const std::string& stateDensity, std::vector<double> snapshotTimes) {
        FlowConfig cfg(map, target);
        cfg.dt = dt;
        cfg.tMax = tMax;
        cfg.scheme = schemeByName(scheme);
        cfg.bandwidth = bandwidth;
        cfg.recordEvery = recordEvery;
        cfg.divergence = divergenceByName(divergence);
        require(stateDensity == "kde" || stateDensity == "gaussianFit", ErrorCode::InvalidArgument,
                "state_density must be kde or gaussianFit");
        cfg.stateDensity = stateDensity == "kde" ? StateDensity::kde : StateDensity::gaussianFit;
        cfg.snapshotTimes = std::move(snapshotTimes);
        cfg.validate();
        return runFlow(init, cfg);
      },
      py::arg("init"), py::arg("map"), py::arg("target"), py::arg("dt"), py::arg("t_max"),
      py::arg("scheme") = "particleEuler", py::arg("bandwidth") = py::none(), py::arg("record_every") = 1,
      py::arg("divergence") = "kl", py::arg("state_density") = "kde", py::arg("snapshot_times") = std::vector<double>{});

  m.def("fit_decay", &fitDecay, py::arg("times"), py::arg("kl"));
  m.def("grid_mobility", &gridMobility, py::arg("map"), py::arg("grid_dim"));
  m.def("cfl_limit", &cflLimit, py::arg("spec"), py::arg("mobility"));
  m.def("grid_flow_target", &gridFlowTarget, py::arg("map"), py::arg("target"), py::arg("spec"));
  m.def("certified_decay_rate", &certifiedDecayRate, py::arg("map"), py::arg("target"));
  m.def(
      "certify_decay",
      [](const FlowTrace& trace, double rate, double slack) {
        const DecayCertificate c = certifyDecay(trace, rate, slack);
        py::dict d;
        d["satisfied"] = c.satisfied;
        d["worst_ratio"] = c.worstRatio;
        d["rate"] = c.rate;
        return d;
      },
      py::arg("trace"), py::arg("rate"), py::arg("slack") = 0.05);
  m.def(
      "classify_equilibrium",
      [](const FlowTrace& trace, const LinearForwardMap& map, const GaussianMeasure& target) {
        const EquilibriumClassification c = classifyEquilibrium(trace, map, target);
        py::dict d;
        d["label"] = equilibriumLabelName(c.label);
        d["distance_conditional"] = c.distanceConditional;
        d["distance_marginal"] = c.distanceMarginal;
        return d;
      },
      py::arg("trace"), py::arg("map"), py::arg("target"));
  m.def("equilibrium_flatness", &equilibriumFlatness, py::arg("state"), py::arg("target"),
        py::arg("threshold") = 1e-4);
}
