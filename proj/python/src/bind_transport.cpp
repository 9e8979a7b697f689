#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "casters.hpp"
#include "stochinv/divergences.hpp"
#include "stochinv/error.hpp"

namespace py = pybind11;
using namespace stochinv;

namespace {

FDivergenceSpec divergenceByName(const std::string& name) {
  if (name == "kl") return FDivergenceSpec::kl();
  if (name == "chi2") return FDivergenceSpec::chiSquared();
  if (name == "hellinger") return FDivergenceSpec::totalVariationSquaredGenerator();
  fail(ErrorCode::InvalidArgument, "unknown divergence \"" + name + "\"");
}

py::dict transportDict(const TransportResult& r) {
  py::dict d;
  d["value"] = r.value;
  d["cost"] = r.coupling.cost;
  d["plan"] = r.coupling.plan;
  d["iterations"] = r.iterations;
  d["converged"] = r.converged;
  return d;
}

}  // namespace

void bind_transport(py::module& m) {
  m.def("wasserstein_distance", &wassersteinDistance, py::arg("mu"), py::arg("nu"), py::arg("p") = 2.0);
  m.def(
      "wasserstein_exact",
      [](const ParticleMeasure& mu, const ParticleMeasure& nu, double p) {
        return transportDict(wassersteinExact(mu, nu, p));
      },
      py::arg("mu"), py::arg("nu"), py::arg("p") = 2.0);
  m.def(
      "wasserstein_1d",
      [](const ParticleMeasure& mu, const ParticleMeasure& nu, double p) { return wasserstein1D(mu, nu, p); },
      py::arg("mu"), py::arg("nu"), py::arg("p") = 2.0);
  m.def(
      "sinkhorn",
      [](const ParticleMeasure& mu, const ParticleMeasure& nu, double p, double epsilon, int maxIterations,
         double tolerance) {
        return transportDict(sinkhorn(mu, nu, p, SinkhornOptions{epsilon, maxIterations, tolerance}));
      },
      py::arg("mu"), py::arg("nu"), py::arg("p") = 2.0, py::arg("epsilon") = 0.01, py::arg("max_iterations") = 10000,
      py::arg("tolerance") = 1e-9);
  m.def("wasserstein_gaussian", py::overload_cast<const GaussianMeasure&, const GaussianMeasure&>(&wassersteinGaussian),
        py::arg("g1"), py::arg("g2"));
  m.def(
      "f_divergence",
      [](const Measure& mu, const Measure& nu, const std::string& name) {
        return fDivergence(divergenceByName(name), mu, nu);
      },
      py::arg("mu"), py::arg("nu"), py::arg("divergence") = "kl");
  m.def("kl_gaussian", &klGaussian, py::arg("g1"), py::arg("g2"));
}
