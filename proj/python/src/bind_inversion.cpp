#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "casters.hpp"
#include "stochinv/error.hpp"
#include "stochinv/inversion.hpp"
#include "stochinv/variational.hpp"

namespace py = pybind11;
using namespace stochinv;

namespace {

py::dict reportDict(const StabilityReport& r) {
  py::dict d;
  d["level"] = r.level;
  d["input_distance"] = r.inputPerturbation;
  d["output_distance"] = r.outputDistance;
  d["bound"] = r.bound;
  d["metric"] = stabilityMetricName(r.metric);
  d["satisfied"] = r.satisfied;
  return d;
}

py::dict boundDict(const TikhonovBound& b) {
  py::dict d;
  d["noise_term"] = b.noiseTerm;
  d["reg_term"] = b.regTerm;
  d["total"] = b.total;
  d["sharp_noise_term"] = b.sharpNoiseTerm;
  d["sharp_reg_term"] = b.sharpRegTerm;
  d["sharp_total"] = b.sharpTotal;
  return d;
}

py::dict entropyDict(const EntropyRegularizedSolution& s) {
  py::dict d;
  d["solution"] = s.solution;
  d["alpha"] = s.alpha;
  d["normalization_c"] = s.normalizationC;
  if (s.errorTerms) {
    d["kl_data_term"] = s.errorTerms->klDataTerm;
    d["kl_prior_term"] = s.errorTerms->klPriorTerm;
    d["log_c"] = s.errorTerms->logC;
  }
  return d;
}

}  // namespace

void bind_inversion(py::module& m) {
  m.def(
      "direct_invert",
      [](const ForwardMap& map, const Measure& data, Index samples) {
        return directInvert(map, data, InversionOptions{samples});
      },
      py::arg("map"), py::arg("data"), py::arg("degenerate_samples") = 2000);
  m.def(
      "solution_set_distance_w2",
      [](const LinearForwardMap& map, const Measure& d1, const Measure& d2) {
        return reportDict(solutionSetDistanceW2(map, d1, d2));
      },
      py::arg("map"), py::arg("data1"), py::arg("data2"));
  m.def(
      "stability_sweep",
      [](const LinearForwardMap& map, const GaussianMeasure& base, const std::vector<double>& levels,
         const std::string& metric) {
        SweepOptions opts;
        StabilityMetric kind = StabilityMetric::W2;
        if (metric == "kl") {
          kind = StabilityMetric::fDivergence;
        } else if (metric != "w2") {
          fail(ErrorCode::InvalidArgument, "metric must be w2 or kl");
        }
        py::list out;
        for (const auto& r : stabilitySweep(map, base, levels, kind, opts)) out.append(reportDict(r));
        return out;
      },
      py::arg("map"), py::arg("data"), py::arg("levels"), py::arg("metric") = "w2");

  m.def("tikhonov_operator", &tikhonovOperator, py::arg("map"), py::arg("alpha"));
  m.def(
      "solve_w2_tikhonov",
      [](const LinearForwardMap& map, const Measure& data, double alpha, std::optional<double> noise,
         std::optional<double> moment) {
        const TikhonovW2Solution s = solveW2Tikhonov(map, data, alpha, noise, moment);
        py::dict d;
        d["solution"] = s.solution;
        d["alpha"] = s.alpha;
        d["operator"] = s.op;
        if (s.bound) d["bound"] = boundDict(*s.bound);
        return d;
      },
      py::arg("map"), py::arg("data"), py::arg("alpha"), py::arg("noise_w2") = py::none(),
      py::arg("truth_second_moment") = py::none());
  m.def(
      "tikhonov_error_bound",
      [](const LinearForwardMap& map, double alpha, double noise, double moment) {
        return boundDict(tikhonovErrorBound(map, alpha, noise, moment));
      },
      py::arg("map"), py::arg("alpha"), py::arg("noise_w2"), py::arg("second_moment"));
  m.def("balance_alpha", &balanceAlpha, py::arg("map"), py::arg("noise_w2"), py::arg("second_moment"));
  m.def(
      "solve_entropy_entropy",
      [](const ForwardMap& map, const GridMeasure& data, const GridMeasure& prior, double alpha,
         std::optional<GridMeasure> truth) { return entropyDict(solveEntropyEntropy(map, data, prior, alpha, truth)); },
      py::arg("map"), py::arg("data"), py::arg("prior"), py::arg("alpha"), py::arg("truth") = py::none());
  m.def(
      "solve_entropy_entropy_gaussian",
      [](const LinearForwardMap& map, const GaussianMeasure& data, const GaussianMeasure& prior, double alpha,
         std::optional<GaussianMeasure> truth) {
        return entropyDict(solveEntropyEntropyGaussian(map, data, prior, alpha, truth));
      },
      py::arg("map"), py::arg("data"), py::arg("prior"), py::arg("alpha"), py::arg("truth") = py::none());
  m.def(
      "w2_tikhonov_objective",
      [](const LinearForwardMap& map, const ParticleMeasure& data, double alpha, const ParticleMeasure& candidate) {
        return w2TikhonovObjective(map, data, alpha, candidate);
      },
      py::arg("map"), py::arg("data"), py::arg("alpha"), py::arg("candidate"));
}
