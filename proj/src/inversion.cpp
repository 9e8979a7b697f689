#include "stochinv/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "stochinv/error.hpp"

namespace stochinv {

namespace {

void requireDataDim(Index expected, Index actual) {
  require(expected == actual, ErrorCode::DimensionMismatch,
          "data dimension " + std::to_string(actual) + " != map output dimension " + std::to_string(expected));
}

ParticleMeasure mapAtoms(const VectorFn& fn, const ParticleMeasure& m, Index outDim) {
  Matrix out(m.size(), outDim);
  for (Index i = 0; i < m.size(); ++i) out.row(i) = fn(m.point(i)).transpose();
  return ParticleMeasure(std::move(out), m.weights());
}

Measure invertLinear(const LinearForwardMap& map, const Measure& data, const InversionOptions& options) {
  const Matrix pinv = pseudoInverse(map);
  requireDataDim(map.outputDim(), dimension(data));
  if (const auto* p = std::get_if<ParticleMeasure>(&data)) {
    return ParticleMeasure(p->points() * pinv.transpose(), p->weights());
  }
  if (const auto* g = std::get_if<GaussianMeasure>(&data)) {
    if (map.inputDim() <= map.outputDim()) return pushforwardGaussian(pinv, Vector::Zero(pinv.rows()), *g);
    // The image lies on Row(A): represent it by atoms.
    const ParticleMeasure cloud = stratifiedGaussianSample(*g, options.degenerateSamples);
    return ParticleMeasure(cloud.points() * pinv.transpose(), cloud.weights());
  }
  const auto& grid = std::get<GridMeasure>(data);
  require(map.inputDim() == map.outputDim(), ErrorCode::UnsupportedCarrier,
          "grid data can only be inverted through square invertible maps");
  const ForwardMap fm = map;
  return pullbackToGrid(fm, grid, pullbackGrid(fm, grid.spec()));
}

Measure invertSmooth(const SmoothForwardMap& map, const Measure& data, const InversionOptions& options) {
  map.validate();
  require(map.hasInverse(), ErrorCode::MissingInverse, "direct inversion needs G^{-1}");
  requireDataDim(map.outputDim, dimension(data));
  if (const auto* p = std::get_if<ParticleMeasure>(&data)) return mapAtoms(map.inverse, *p, map.inputDim);
  if (const auto* g = std::get_if<GaussianMeasure>(&data)) {
    return mapAtoms(map.inverse, stratifiedGaussianSample(*g, options.degenerateSamples), map.inputDim);
  }
  const auto& grid = std::get<GridMeasure>(data);
  const ForwardMap fm = map;
  return pullbackToGrid(fm, grid, pullbackGrid(fm, grid.spec()));
}

Vector evaluateMap(const ForwardMap& map, const Vector& u) {
  if (const auto* l = std::get_if<LinearForwardMap>(&map)) return l->matrix() * u;
  return std::get<SmoothForwardMap>(map).evaluate(u);
}

Matrix jacobianAt(const ForwardMap& map, const Vector& u) {
  if (const auto* l = std::get_if<LinearForwardMap>(&map)) return l->matrix();
  return std::get<SmoothForwardMap>(map).jacobian(u);
}

VectorFn inverseOf(const ForwardMap& map) {
  if (const auto* l = std::get_if<LinearForwardMap>(&map)) {
    require(l->inputDim() == l->outputDim(), ErrorCode::MissingInverse, "pullback needs a square map");
    const Matrix inv = pseudoInverse(*l);
    return [inv](const Vector& y) -> Vector { return inv * y; };
  }
  const auto& s = std::get<SmoothForwardMap>(map);
  require(s.hasInverse(), ErrorCode::MissingInverse, "pullback needs G^{-1}");
  return s.inverse;
}

}  // namespace

Measure directInvert(const ForwardMap& map, const Measure& data, const InversionOptions& options) {
  require(options.degenerateSamples >= 1, ErrorCode::InvalidArgument, "degenerateSamples must be positive");
  if (const auto* l = std::get_if<LinearForwardMap>(&map)) return invertLinear(*l, data, options);
  return invertSmooth(std::get<SmoothForwardMap>(map), data, options);
}

GridSpec pullbackGrid(const ForwardMap& map, const GridSpec& dataGrid) {
  dataGrid.validate();
  const Index d = dataGrid.dim();
  require(inputDim(map) == d && outputDim(map) == d, ErrorCode::DimensionMismatch,
          "pullback grid needs a square map matching the grid dimension");
  const VectorFn inverse = inverseOf(map);
  Vector lo = Vector::Constant(d, std::numeric_limits<double>::infinity());
  Vector hi = -lo;
  auto include = [&](const Vector& y) {
    const Vector u = inverse(y);
    lo = lo.cwiseMin(u);
    hi = hi.cwiseMax(u);
  };
  for (Index corner = 0; corner < (Index{1} << d); ++corner) {
    Vector y(d);
    for (Index k = 0; k < d; ++k) y[k] = (corner >> k) & 1 ? dataGrid.upper[k] : dataGrid.lower[k];
    include(y);
  }
  if (std::holds_alternative<SmoothForwardMap>(map)) {
    for (Index c = 0; c < dataGrid.cells(); ++c) include(dataGrid.center(c));
  }
  for (Index k = 0; k < d; ++k) {
    require(hi[k] > lo[k], ErrorCode::DegenerateImage, "inverse image of the data box is flat");
  }
  return GridSpec{lo, hi, dataGrid.shape};
}

GridMeasure pullbackToGrid(const ForwardMap& map, const GridMeasure& data, const GridSpec& parameterGrid) {
  parameterGrid.validate();
  require(inputDim(map) == parameterGrid.dim(), ErrorCode::DimensionMismatch,
          "parameter grid dimension must match map input");
  requireDataDim(outputDim(map), data.dim());
  require(inputDim(map) == outputDim(map), ErrorCode::MissingInverse, "pullback of densities needs a square map");
  Vector density(parameterGrid.cells());
  for (Index c = 0; c < parameterGrid.cells(); ++c) {
    const Vector u = parameterGrid.center(c);
    const double value = data.interpolate(evaluateMap(map, u));
    density[c] = value > 0.0 ? value * std::abs(jacobianAt(map, u).determinant()) : 0.0;
  }
  return normalize(parameterGrid, std::move(density));
}

SolutionSetHandle solutionSet(const LinearForwardMap& map, const Measure& data, const InversionOptions& options) {
  return SolutionSetHandle{map, data, invertLinear(map, data, options)};
}

const char* stabilityMetricName(StabilityMetric metric) {
  return metric == StabilityMetric::W2 ? "w2" : "fDivergence";
}

StabilityReport solutionSetDistanceW2(const LinearForwardMap& map, const Measure& data1, const Measure& data2) {
  require(data1.index() == data2.index(), ErrorCode::UnsupportedCarrier, "data pair must share a carrier");
  requireDataDim(map.outputDim(), dimension(data1));
  requireDataDim(map.outputDim(), dimension(data2));
  const Matrix pinv = pseudoInverse(map);
  StabilityReport report;
  report.metric = StabilityMetric::W2;
  report.inputPerturbation = wassersteinDistance(data1, data2);
  if (const auto* g1 = std::get_if<GaussianMeasure>(&data1)) {
    const auto& g2 = std::get<GaussianMeasure>(data2);
    report.outputDistance = wassersteinGaussian(pinv * g1->mean(), pinv * g1->cov() * pinv.transpose(),
                                                pinv * g2.mean(), pinv * g2.cov() * pinv.transpose());
  } else if (const auto* p1 = std::get_if<ParticleMeasure>(&data1)) {
    const auto& p2 = std::get<ParticleMeasure>(data2);
    const Measure c1 = ParticleMeasure(p1->points() * pinv.transpose(), p1->weights());
    const Measure c2 = ParticleMeasure(p2.points() * pinv.transpose(), p2.weights());
    report.outputDistance = wassersteinDistance(c1, c2);
  } else {
    report.outputDistance = wassersteinDistance(invertLinear(map, data1, {}), invertLinear(map, data2, {}));
  }
  report.bound = report.inputPerturbation / map.sigmaMin();
  report.satisfied = report.outputDistance <= report.bound * (1.0 + 1e-6);
  return report;
}

StabilityReport solutionSetDistanceF(const FDivergenceSpec& spec, const Measure& data1, const Measure& data2) {
  StabilityReport report;
  report.metric = StabilityMetric::fDivergence;
  const double value = fDivergence(spec, data1, data2);
  report.inputPerturbation = value;
  report.outputDistance = value;
  report.bound = value;
  report.satisfied = true;
  return report;
}

GaussianMeasure perturbGaussian(const GaussianMeasure& base, double level, PerturbationKind kind,
                                const Vector& direction) {
  require(std::isfinite(level), ErrorCode::InvalidArgument, "perturbation levels must be finite");
  if (kind == PerturbationKind::MeanShift) {
    require(direction.size() == base.dim(), ErrorCode::DimensionMismatch, "shift direction has the wrong length");
    return GaussianMeasure(base.mean() + level * direction, base.cov());
  }
  require(level > -1.0, ErrorCode::InvalidArgument, "covariance inflation level must exceed -1");
  return GaussianMeasure(base.mean(), base.cov() * (1.0 + level) * (1.0 + level));
}

std::vector<StabilityReport> stabilitySweep(const LinearForwardMap& map, const GaussianMeasure& baseData,
                                            const std::vector<double>& perturbations, StabilityMetric metric,
                                            const SweepOptions& options) {
  requireDataDim(map.outputDim(), baseData.dim());
  Vector direction = options.direction;
  if (direction.size() == 0) direction = map.U().col(map.U().cols() - 1);
  require(direction.size() == baseData.dim() && direction.norm() > 0.0, ErrorCode::InvalidArgument,
          "shift direction must be a nonzero data-space vector");
  direction.normalize();

  const bool square = map.inputDim() == map.outputDim();
  const Matrix pinv = pseudoInverse(map);
  std::vector<StabilityReport> reports;
  reports.reserve(perturbations.size());
  for (double level : perturbations) {
    const GaussianMeasure perturbed = perturbGaussian(baseData, level, options.kind, direction);
    StabilityReport report;
    if (metric == StabilityMetric::W2) {
      report = solutionSetDistanceW2(map, baseData, perturbed);
    } else if (square) {
      report.metric = StabilityMetric::fDivergence;
      report.inputPerturbation = fDivergenceGaussian(options.divergence, baseData, perturbed);
      const Vector zero = Vector::Zero(map.inputDim());
      report.outputDistance = fDivergenceGaussian(options.divergence, pushforwardGaussian(pinv, zero, baseData),
                                                  pushforwardGaussian(pinv, zero, perturbed));
      report.bound = report.inputPerturbation;
      report.satisfied = report.outputDistance <= report.bound * (1.0 + 1e-6);
    } else {
      report = solutionSetDistanceF(options.divergence, baseData, perturbed);
    }
    report.level = level;
    reports.push_back(report);
  }
  return reports;
}

}  // namespace stochinv
