#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stochinv/divergences.hpp"
#include "stochinv/maps.hpp"

namespace stochinv {

enum class FlowScheme { particleEuler, particleRK4, gridFokkerPlanck, gaussianODE, particleW2 };

const char* flowSchemeName(FlowScheme scheme);

/// How the particle flow evaluates the density of the pushed state.
enum class StateDensity { kde, gaussianFit };

struct FlowConfig {
  FlowConfig(ForwardMap map, Measure target) : map(std::move(map)), target(std::move(target)) {}

  FDivergenceSpec divergence = FDivergenceSpec::kl();
  ForwardMap map;
  Measure target;
  double dt = 1e-2;
  double tMax = 1.0;
  FlowScheme scheme = FlowScheme::particleEuler;
  std::optional<double> bandwidth;
  int recordEvery = 1;
  StateDensity stateDensity = StateDensity::kde;
  /// Accept particle targets, whose density is then a KDE as well.
  bool allowKdeTarget = false;
  /// Extra snapshot times; the initial and final states are always kept.
  std::vector<double> snapshotTimes;

  void validate() const;
};

/// Coordinates of the snapshots in a trace.
enum class FlowCoordinates { parameter, data, reduced };

struct DecayFit {
  double rate = 0.0;
  double r2 = 0.0;
  bool valid = false;
};

struct FlowTrace {
  std::vector<double> times;
  std::vector<double> klToTarget;
  std::vector<double> w2ToTarget;
  std::vector<double> snapshotTimes;
  std::vector<Measure> snapshots;
  FlowCoordinates coordinates = FlowCoordinates::reduced;
  DecayFit decayFit;
  /// Total mass removed by clamping negative grid densities.
  double clampedMass = 0.0;
  bool valid = true;
  std::vector<std::string> warnings;
};

/// Least-squares slope of log KL against t over the final half of the trace.
DecayFit fitDecay(const std::vector<double>& times, const std::vector<double>& kl);

/// Mobility in the grid's coordinates: A A^T when the grid has the map's
/// output dimension, diag(sigma^2) when it has the rank (z = U^T y).
Matrix gridMobility(const LinearForwardMap& map, Index gridDim);

/// Target of a grid flow on `spec`: a grid target as is, a Gaussian one
/// cell-averaged (conditioned on Col(A) when the grid has the rank's dimension).
GridMeasure gridFlowTarget(const LinearForwardMap& map, const Measure& target, const GridSpec& spec);

/// Largest dt allowed by the explicit scheme: 0.25 h_min^2 / |B|_2.
double cflLimit(const GridSpec& spec, const Matrix& mobility);

/// One conservative explicit step of d rho/dt = div(rho B grad log(rho / target)).
GridMeasure gridFokkerPlanckStep(const GridMeasure& state, const Matrix& mobility, const GridMeasure& target,
                                 double dt, double* clampedMass = nullptr);
GridMeasure gridFokkerPlanckStep(const GridMeasure& state, const LinearForwardMap& map, const GridMeasure& target,
                                 double dt, double* clampedMass = nullptr);

/// Exact Gaussian evolution in z = U^T y with mobility diag(sigma^2) toward
/// the target conditioned on Col(A).
FlowTrace gaussianFlowODE(const GaussianMeasure& init, const LinearForwardMap& map, const GaussianMeasure& target,
                          double dt, double tMax, int recordEvery = 1);

/// Per-atom velocities of the f-divergence particle flow.
Matrix particleVelocity(const ParticleMeasure& state, const FlowConfig& cfg);
ParticleMeasure particleFlowStep(const ParticleMeasure& state, const FlowConfig& cfg);

FlowTrace runFlow(const Measure& init, const FlowConfig& cfg);

enum class EquilibriumLabel { conditional, marginal, neither };

const char* equilibriumLabelName(EquilibriumLabel label);

struct EquilibriumClassification {
  EquilibriumLabel label = EquilibriumLabel::neither;
  double distanceConditional = 0.0;
  double distanceMarginal = 0.0;
};

/// Compares the final snapshot, pushed to Col(A) coordinates, with the
/// conditional and the marginal of the target.
EquilibriumClassification classifyEquilibrium(const FlowTrace& trace, const LinearForwardMap& map,
                                              const GaussianMeasure& target);

/// W2 between a particle cloud and a Gaussian: exact quantile integral in 1D,
/// Bures distance of the moment-matched Gaussian otherwise.
double w2ToGaussian(const ParticleMeasure& m, const GaussianMeasure& g);
/// Same for a grid density: exact in 1D against the cell-averaged Gaussian,
/// moment-matched otherwise.
double w2ToGaussian(const GridMeasure& m, const GaussianMeasure& g);

struct DecayCertificate {
  bool satisfied = true;
  /// max_t KL(t) / (exp(-rate t) KL(0)).
  double worstRatio = 0.0;
  double rate = 0.0;
};

/// Checks KL(t) <= exp(-rate t) KL(0) (1 + slack) at every recorded time.
DecayCertificate certifyDecay(const FlowTrace& trace, double rate, double slack = 0.05);

/// Certified rate 2 sigma_min^2 lambda for a linear map and Gaussian target.
double certifiedDecayRate(const LinearForwardMap& map, const GaussianMeasure& target);

/// Coefficient of variation of state / target over cells where the state
/// exceeds `threshold` times its maximum.
double equilibriumFlatness(const GridMeasure& state, const GridMeasure& target, double threshold = 1e-4);

}  // namespace stochinv
