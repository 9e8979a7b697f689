#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "casters.hpp"
#include "stochinv/maps.hpp"
#include "stochinv/measures.hpp"

namespace py = pybind11;
using namespace stochinv;

void bind_measures(py::module& m) {
  py::class_<ParticleMeasure>(m, "ParticleMeasure")
      .def(py::init<Matrix, Vector>(), py::arg("points"), py::arg("weights"))
      .def_static("uniform", &ParticleMeasure::uniform, py::arg("points"))
      .def_property_readonly("points", &ParticleMeasure::points)
      .def_property_readonly("weights", &ParticleMeasure::weights)
      .def_property_readonly("size", &ParticleMeasure::size)
      .def_property_readonly("dim", &ParticleMeasure::dim)
      .def("mean", &ParticleMeasure::mean)
      .def("covariance", &ParticleMeasure::covariance)
      .def("__repr__", [](const ParticleMeasure& p) {
        return "ParticleMeasure(size=" + std::to_string(p.size()) + ", dim=" + std::to_string(p.dim()) + ")";
      });

  py::class_<GridSpec>(m, "GridSpec")
      .def(py::init([](Vector lower, Vector upper, std::vector<int> shape) {
             GridSpec s{std::move(lower), std::move(upper), std::move(shape)};
             s.validate();
             return s;
           }),
           py::arg("lower"), py::arg("upper"), py::arg("shape"))
      .def_readonly("lower", &GridSpec::lower)
      .def_readonly("upper", &GridSpec::upper)
      .def_readonly("shape", &GridSpec::shape)
      .def_property_readonly("dim", &GridSpec::dim)
      .def_property_readonly("cells", &GridSpec::cells)
      .def_property_readonly("cell_volume", &GridSpec::cellVolume)
      .def("center", &GridSpec::center, py::arg("flat"));

  py::class_<GridMeasure>(m, "GridMeasure")
      .def(py::init<GridSpec, Vector>(), py::arg("spec"), py::arg("density"))
      .def_property_readonly("spec", &GridMeasure::spec)
      .def_property_readonly("density", &GridMeasure::density)
      .def_property_readonly("dim", &GridMeasure::dim)
      .def("interpolate", &GridMeasure::interpolate, py::arg("y"));

  py::class_<GaussianMeasure>(m, "GaussianMeasure")
      .def(py::init<Vector, Matrix>(), py::arg("mean"), py::arg("cov"))
      .def_property_readonly("mean", &GaussianMeasure::mean)
      .def_property_readonly("cov", &GaussianMeasure::cov)
      .def_property_readonly("dim", &GaussianMeasure::dim)
      .def("log_density", &GaussianMeasure::logDensity, py::arg("x"))
      .def("density", &GaussianMeasure::density, py::arg("x"));

  m.def("normalize", py::overload_cast<Matrix, Vector>(&normalize), py::arg("points"), py::arg("weights"));
  m.def("second_moment", py::overload_cast<const Measure&>(&secondMoment), py::arg("measure"));
  m.def("uniform_grid", py::overload_cast<double, double, int>(&uniformGrid), py::arg("lower"), py::arg("upper"),
        py::arg("cells"));
  m.def(
      "discretize",
      [](const GaussianMeasure& g, const GridSpec& spec, bool average) {
        return discretize(g, spec, average ? CellRule::Average : CellRule::Center);
      },
      py::arg("gaussian"), py::arg("spec"), py::arg("average") = true);
  m.def("stratified_gaussian_sample", &stratifiedGaussianSample, py::arg("gaussian"), py::arg("n"));
  m.def(
      "sample_gaussian",
      [](const GaussianMeasure& g, Index n, std::uint64_t seed, std::uint64_t stream) {
        CounterRng rng(seed, stream);
        return sampleGaussian(g, n, rng);
      },
      py::arg("gaussian"), py::arg("n"), py::arg("seed"), py::arg("stream") = 0);
  m.def("gaussian_conditional_on_subspace", &gaussianConditionalOnSubspace, py::arg("gaussian"), py::arg("basis"));
  m.def("gaussian_marginal_on_subspace", &gaussianMarginalOnSubspace, py::arg("gaussian"), py::arg("basis"));

  py::class_<LinearForwardMap>(m, "LinearForwardMap")
      .def(py::init<Matrix>(), py::arg("matrix"))
      .def_property_readonly("matrix", &LinearForwardMap::matrix)
      .def_property_readonly("U", &LinearForwardMap::U)
      .def_property_readonly("sigma", &LinearForwardMap::sigma)
      .def_property_readonly("V", &LinearForwardMap::V)
      .def_property_readonly("rank", &LinearForwardMap::rank)
      .def_property_readonly("sigma_min", &LinearForwardMap::sigmaMin)
      .def("column_space_basis", &LinearForwardMap::columnSpaceBasis);

  py::class_<SmoothForwardMap>(m, "SmoothForwardMap")
      .def(py::init([](Index inputDim, Index outputDim, VectorFn evaluate, MatrixFn jacobian,
                       std::optional<VectorFn> inverse) {
             SmoothForwardMap map;
             map.inputDim = inputDim;
             map.outputDim = outputDim;
             map.evaluate = std::move(evaluate);
             map.jacobian = std::move(jacobian);
             if (inverse) map.inverse = std::move(*inverse);
             map.validate();
             return map;
           }),
           py::arg("input_dim"), py::arg("output_dim"), py::arg("evaluate"), py::arg("jacobian"),
           py::arg("inverse") = py::none())
      .def_readonly("input_dim", &SmoothForwardMap::inputDim)
      .def_readonly("output_dim", &SmoothForwardMap::outputDim)
      .def("__call__", [](const SmoothForwardMap& map, const Vector& u) { return map.evaluate(u); });

  m.def("pseudo_inverse", &pseudoInverse, py::arg("map"));
  m.def("pushforward", py::overload_cast<const ForwardMap&, const ParticleMeasure&>(&pushforward), py::arg("map"),
        py::arg("measure"));
  m.def(
      "pushforward_gaussian",
      [](const LinearForwardMap& map, const GaussianMeasure& g) {
        return pushforwardGaussian(map.matrix(), Vector::Zero(map.outputDim()), g);
      },
      py::arg("map"), py::arg("gaussian"));
}
