#pragma once

#include <functional>

#include "stochinv/measures.hpp"

namespace stochinv {

/// Joint masses between the atoms of two particle measures.
struct Coupling {
  Matrix plan;
  double cost = 0.0;
};

struct TransportResult {
  double value = 0.0;
  Coupling coupling;
  int iterations = 0;
  bool converged = true;
};

inline constexpr Index kDefaultSizeCap = 1'000'000;

/// Quantile-coupling W_p between 1D measures.
double wasserstein1D(const ParticleMeasure& mu, const ParticleMeasure& nu, double p);
double wasserstein1D(const GridMeasure& mu, const GridMeasure& nu, double p);

/// Exact discrete OT with cost |x - y|^p by successive shortest paths.
TransportResult wassersteinExact(const ParticleMeasure& mu, const ParticleMeasure& nu, double p,
                                 Index sizeCap = kDefaultSizeCap);

struct SinkhornOptions {
  double epsilon = 0.01;
  int maxIterations = 10000;
  /// L1 violation of the row marginal.
  double tolerance = 1e-9;
};

/// Log-domain entropic OT. Returns the best iterate with converged = false
/// if the tolerance is not met within maxIterations.
TransportResult sinkhorn(const ParticleMeasure& mu, const ParticleMeasure& nu, double p,
                         const SinkhornOptions& options);

/// Bures form of W2 between Gaussians.
double wassersteinGaussian(const GaussianMeasure& g1, const GaussianMeasure& g2);
/// Same formula for possibly singular covariances.
double wassersteinGaussian(const Vector& mean1, const Matrix& cov1, const Vector& mean2, const Matrix& cov2);

/// W_p between two measures of the same carrier: exact OT for particles,
/// quantiles for 1D grids, Bures for Gaussians (p = 2 only).
double wassersteinDistance(const Measure& mu, const Measure& nu, double p = 2.0);

enum class FDivergenceKind { KL, chiSquared, totalVariationSquaredGenerator, custom };

/// Convex generator f with f(1) = 0 and its first two derivatives.
struct FDivergenceSpec {
  FDivergenceKind kind = FDivergenceKind::KL;
  std::function<double(double)> f;
  std::function<double(double)> fPrime;
  std::function<double(double)> fDoublePrime;

  /// f(x) = x log x.
  static FDivergenceSpec kl();
  /// f(x) = (x - 1)^2.
  static FDivergenceSpec chiSquared();
  /// f(x) = (sqrt x - 1)^2, the squared Hellinger generator.
  static FDivergenceSpec totalVariationSquaredGenerator();
  static FDivergenceSpec custom(std::function<double(double)> f, std::function<double(double)> fPrime,
                                std::function<double(double)> fDoublePrime);

  /// Checks f(1) = 0 and f'' >= 0 on a probe grid.
  void validate() const;
};

const char* fDivergenceName(FDivergenceKind kind);

/// Midpoint quadrature of f(mu/nu) nu; +inf where nu = 0 < mu.
double fDivergenceGrid(const FDivergenceSpec& spec, const GridMeasure& mu, const GridMeasure& nu);

double klGaussian(const GaussianMeasure& g1, const GaussianMeasure& g2);
/// Closed form; +inf when 2 Sigma1^{-1} - Sigma2^{-1} is not positive definite.
double chiSquaredGaussian(const GaussianMeasure& g1, const GaussianMeasure& g2);
/// 2 (1 - Bhattacharyya coefficient).
double hellingerSquaredGaussian(const GaussianMeasure& g1, const GaussianMeasure& g2);
/// Grid pairs by quadrature, Gaussian pairs in closed form.
double fDivergence(const FDivergenceSpec& spec, const Measure& mu, const Measure& nu);
/// Dispatch on the generator kind; custom generators throw UnsupportedCarrier.
double fDivergenceGaussian(const FDivergenceSpec& spec, const GaussianMeasure& g1, const GaussianMeasure& g2);

}  // namespace stochinv
