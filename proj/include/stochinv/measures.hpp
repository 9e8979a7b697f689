#pragma once

#include <Eigen/Dense>

#include <functional>
#include <variant>
#include <vector>

#include "stochinv/rng.hpp"

namespace stochinv {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr double kWeightSumTolerance = 1e-12;
inline constexpr double kGridMassTolerance = 1e-10;
inline constexpr double kSymmetryTolerance = 1e-12;

/// Empirical probability measure: n weighted atoms in R^d (one atom per row).
class ParticleMeasure {
 public:
  ParticleMeasure(Matrix points, Vector weights);

  static ParticleMeasure uniform(Matrix points);
  static ParticleMeasure dirac(const Vector& location);

  const Matrix& points() const { return points_; }
  const Vector& weights() const { return weights_; }
  Index size() const { return points_.rows(); }
  Index dim() const { return points_.cols(); }
  Vector point(Index i) const { return points_.row(i).transpose(); }

  Vector mean() const;
  Matrix covariance() const;

 private:
  Matrix points_;
  Vector weights_;
};

/// Axis-aligned box [lower, upper] cut into shape[k] cells along axis k.
/// Flat cell indices are row-major: the last axis varies fastest.
struct GridSpec {
  Vector lower;
  Vector upper;
  std::vector<int> shape;

  Index dim() const { return lower.size(); }
  Index cells() const;
  double width(Index axis) const { return (upper[axis] - lower[axis]) / shape[axis]; }
  double cellVolume() const;
  Index stride(Index axis) const;
  std::vector<int> unravel(Index flat) const;
  Vector center(Index flat) const;
  bool contains(const Vector& y) const;

  void validate() const;
  bool operator==(const GridSpec& other) const;
};

/// Piecewise-constant density on a regular grid; cell values are densities
/// per unit volume and integrate to one under midpoint quadrature.
class GridMeasure {
 public:
  GridMeasure(GridSpec spec, Vector density);

  const GridSpec& spec() const { return spec_; }
  const Vector& density() const { return density_; }
  Index dim() const { return spec_.dim(); }
  Index cells() const { return density_.size(); }
  double cellVolume() const { return spec_.cellVolume(); }

  /// Multilinear interpolation between cell centers; zero outside the box.
  double interpolate(const Vector& y) const;

 private:
  GridSpec spec_;
  Vector density_;
};

class GaussianMeasure {
 public:
  GaussianMeasure(Vector mean, Matrix cov);

  const Vector& mean() const { return mean_; }
  const Matrix& cov() const { return cov_; }
  Index dim() const { return mean_.size(); }

  const Matrix& precision() const { return precision_; }
  double logDetCov() const { return log_det_cov_; }

  double logDensity(const Vector& x) const;
  double density(const Vector& x) const;
  /// Gradient of the log-density.
  Vector score(const Vector& x) const;

 private:
  Vector mean_;
  Matrix cov_;
  Matrix precision_;
  Matrix chol_lower_;
  double log_det_cov_ = 0.0;
};

/// -Hess log rho >= lambda * Id.
struct LogConcavityCertificate {
  double lambda;

  explicit LogConcavityCertificate(double value);
};

LogConcavityCertificate logConcavity(const GaussianMeasure& g);

using Measure = std::variant<ParticleMeasure, GridMeasure, GaussianMeasure>;

Index dimension(const Measure& m);
const char* carrierName(const Measure& m);

ParticleMeasure normalize(Matrix points, Vector weights);
GridMeasure normalize(GridSpec spec, Vector density);

double secondMoment(const ParticleMeasure& m);
double secondMoment(const GridMeasure& m);
double secondMoment(const GaussianMeasure& g);
double secondMoment(const Measure& m);

/// Density of g restricted to the affine span of `basis` (orthonormal
/// columns) and renormalized, in subspace coordinates z (y = basis * z).
GaussianMeasure gaussianConditionalOnSubspace(const GaussianMeasure& g, const Matrix& basis);
/// Law of basis^T Y for Y ~ g.
GaussianMeasure gaussianMarginalOnSubspace(const GaussianMeasure& g, const Matrix& basis);

double kdeDensity(const ParticleMeasure& m, const Vector& query, double bandwidth);
double kdeDensity(const ParticleMeasure& m, const Vector& query, const Vector& bandwidths);
double kdeLogDensity(const ParticleMeasure& m, const Vector& query, const Vector& bandwidths);
/// Gradient of log KDE at query (product Gaussian kernel).
Vector kdeScore(const ParticleMeasure& m, const Vector& query, const Vector& bandwidths);
/// Silverman's rule of thumb per axis, using the Kish effective sample size.
Vector silvermanBandwidth(const ParticleMeasure& m);

ParticleMeasure sampleGaussian(const GaussianMeasure& g, Index n, CounterRng& rng);
/// Deterministic low-discrepancy sample: the first coordinate takes the
/// midpoint quantiles (i + 1/2)/n, later ones a Halton sequence, mapped
/// through the Gaussian quantile and the Cholesky factor of cov.
ParticleMeasure stratifiedGaussianSample(const GaussianMeasure& g, Index n);

enum class CellRule { Center, Average };

/// Discretize a density onto a grid and normalize. Average uses 3-point
/// Gauss-Legendre per axis inside each cell.
GridMeasure discretize(const std::function<double(const Vector&)>& density, const GridSpec& spec,
                       CellRule rule = CellRule::Center);
GridMeasure discretize(const GaussianMeasure& g, const GridSpec& spec,
                       CellRule rule = CellRule::Center);

GridSpec uniformGrid(const Vector& lower, const Vector& upper, int cellsPerAxis);
GridSpec uniformGrid(double lower, double upper, int cells);

double standardNormalQuantile(double p);
double standardNormalCdf(double x);

}  // namespace stochinv
