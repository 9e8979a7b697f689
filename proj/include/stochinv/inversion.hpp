#pragma once

#include <string>
#include <vector>

#include "stochinv/divergences.hpp"
#include "stochinv/maps.hpp"

namespace stochinv {

struct InversionOptions {
  /// Atoms used when an inverted Gaussian has no density and is returned as
  /// a deterministic particle cloud.
  Index degenerateSamples = 2000;
};

/// G^{-1}#data, or A^+#data for full-rank linear maps.
Measure directInvert(const ForwardMap& map, const Measure& data, const InversionOptions& options = {});

/// Density of G^{-1}#data on a parameter grid: data(G(u)) |det J_G(u)|,
/// with data interpolated multilinearly, then normalized.
GridMeasure pullbackToGrid(const ForwardMap& map, const GridMeasure& data, const GridSpec& parameterGrid);

/// Parameter grid with the data grid's shape covering G^{-1} of the data box.
GridSpec pullbackGrid(const ForwardMap& map, const GridSpec& dataGrid);

/// Canonical element A^+#data of the solution set {rho : A#rho = data}.
struct SolutionSetHandle {
  LinearForwardMap map;
  Measure data;
  Measure canonical;
};

SolutionSetHandle solutionSet(const LinearForwardMap& map, const Measure& data, const InversionOptions& options = {});

enum class StabilityMetric { W2, fDivergence };

const char* stabilityMetricName(StabilityMetric metric);

struct StabilityReport {
  /// Size of the perturbation that produced the pair (zero when not swept).
  double level = 0.0;
  double inputPerturbation = 0.0;
  double outputDistance = 0.0;
  double bound = 0.0;
  StabilityMetric metric = StabilityMetric::W2;
  bool satisfied = true;
};

/// W2 between canonical elements against W2(data1, data2) / sigma_min.
StabilityReport solutionSetDistanceW2(const LinearForwardMap& map, const Measure& data1, const Measure& data2);

/// f-divergence distance between solution sets, equal to D_f(data1 || data2).
StabilityReport solutionSetDistanceF(const FDivergenceSpec& spec, const Measure& data1, const Measure& data2);

enum class PerturbationKind { MeanShift, CovarianceInflation };

struct SweepOptions {
  PerturbationKind kind = PerturbationKind::MeanShift;
  /// Data-space shift direction; defaults to the left singular vector with
  /// the smallest singular value (the weakest direction of A).
  Vector direction;
  FDivergenceSpec divergence = FDivergenceSpec::kl();
};

std::vector<StabilityReport> stabilitySweep(const LinearForwardMap& map, const GaussianMeasure& baseData,
                                            const std::vector<double>& perturbations, StabilityMetric metric,
                                            const SweepOptions& options = {});

GaussianMeasure perturbGaussian(const GaussianMeasure& base, double level, PerturbationKind kind,
                                const Vector& direction);

}  // namespace stochinv
