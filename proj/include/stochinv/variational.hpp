#pragma once

#include <optional>

#include "stochinv/divergences.hpp"
#include "stochinv/maps.hpp"

namespace stochinv {

struct EntropyErrorTerms {
  double klDataTerm = 0.0;
  double klPriorTerm = 0.0;
  double logC = 0.0;
};

struct EntropyRegularizedSolution {
  Measure solution;
  double alpha = 0.0;
  double normalizationC = 1.0;
  std::optional<EntropyErrorTerms> errorTerms;
};

/// KL-KL regularized inverse on the prior's parameter grid:
/// rho ∝ [(G^{-1}#data) prior^alpha]^{1/(1+alpha)}.
EntropyRegularizedSolution solveEntropyEntropy(const ForwardMap& map, const GridMeasure& data,
                                               const GridMeasure& prior, double alpha,
                                               const std::optional<GridMeasure>& truth = std::nullopt);

/// Closed form of the same solution for Gaussian data and prior through an
/// invertible linear map.
EntropyRegularizedSolution solveEntropyEntropyGaussian(const LinearForwardMap& map, const GaussianMeasure& data,
                                                       const GaussianMeasure& prior, double alpha,
                                                       const std::optional<GaussianMeasure>& truth = std::nullopt);

struct EntropyErrorIdentity {
  double lhs = 0.0;
  double rhs = 0.0;
  double residual = 0.0;
  EntropyErrorTerms terms;
};

/// KL(truth || solution) against
/// KL(y* || data)/(1+alpha) + alpha/(1+alpha) KL(y* || G#prior) - log C,
/// with every KL taken by the same parameter-grid quadrature.
EntropyErrorIdentity entropyErrorIdentity(const EntropyRegularizedSolution& sol, const GridMeasure& truth,
                                          const ForwardMap& map, const GridMeasure& data, const GridMeasure& prior);

/// Both sides from Gaussian closed forms.
EntropyErrorIdentity entropyErrorIdentity(const EntropyRegularizedSolution& sol, const GaussianMeasure& truth,
                                          const LinearForwardMap& map, const GaussianMeasure& data,
                                          const GaussianMeasure& prior);

/// Bound on W2(rho_u^delta, rho_u^*). The plain fields are the square-root
/// forms; sharp fields use the exact spectral norms.
struct TikhonovBound {
  double noiseTerm = 0.0;
  double regTerm = 0.0;
  double total = 0.0;
  double midRegTerm = 0.0;
  double sharpNoiseTerm = 0.0;
  double sharpRegTerm = 0.0;
  double sharpTotal = 0.0;
};

struct TikhonovW2Solution {
  Measure solution;
  double alpha = 0.0;
  Matrix op;
  std::optional<TikhonovBound> bound;
};

/// (A^T A + alpha^2 I)^{-1} A^T.
Matrix tikhonovOperator(const LinearForwardMap& map, double alpha);

/// W2-W2 regularized inverse op#data. The bound is filled when noiseW2 is
/// given; its moment term uses truthSecondMoment, else the data's own.
TikhonovW2Solution solveW2Tikhonov(const LinearForwardMap& map, const Measure& data, double alpha,
                                   std::optional<double> noiseW2 = std::nullopt,
                                   std::optional<double> truthSecondMoment = std::nullopt);

TikhonovBound tikhonovErrorBound(const LinearForwardMap& map, double alpha, double dataNoise,
                                 double dataSecondMoment);

/// alpha at which the two square-root terms are equal.
double balanceAlpha(const LinearForwardMap& map, double dataNoise, double dataSecondMoment);

/// W2^2(A#candidate, data) + alpha^2 E|u|^2.
double w2TikhonovObjective(const LinearForwardMap& map, const ParticleMeasure& data, double alpha,
                           const ParticleMeasure& candidate);

struct AugmentedObjective {
  double lhs = 0.0;
  double rhs = 0.0;
};

/// lhs is the objective above; rhs is W2^2([A; alpha I]#candidate, data ⊗ δ0).
AugmentedObjective augmentedObjectiveCheck(const LinearForwardMap& map, const ParticleMeasure& data, double alpha,
                                           const ParticleMeasure& candidate);

}  // namespace stochinv
