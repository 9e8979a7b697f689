#include "stochinv/divergences.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "stochinv/error.hpp"

namespace stochinv {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kDensityFloor = 1e-300;

Matrix psdSqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (m + m.transpose()));
  const Vector roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

void requireSameDim(const GaussianMeasure& g1, const GaussianMeasure& g2) {
  require(g1.dim() == g2.dim(), ErrorCode::DimensionMismatch,
          "gaussians live in dimensions " + std::to_string(g1.dim()) + " and " + std::to_string(g2.dim()));
}

}  // namespace

double wassersteinGaussian(const Vector& mean1, const Matrix& cov1, const Vector& mean2, const Matrix& cov2) {
  const Index d = mean1.size();
  require(mean2.size() == d && cov1.rows() == d && cov1.cols() == d && cov2.rows() == d && cov2.cols() == d,
          ErrorCode::DimensionMismatch, "gaussian parameters must share one dimension");
  const Matrix root2 = psdSqrt(cov2);
  const Matrix cross = psdSqrt(root2 * cov1 * root2);
  const double squared = (mean1 - mean2).squaredNorm() + cov1.trace() + cov2.trace() - 2.0 * cross.trace();
  return std::sqrt(std::max(0.0, squared));
}

double wassersteinGaussian(const GaussianMeasure& g1, const GaussianMeasure& g2) {
  requireSameDim(g1, g2);
  if (g1.dim() == 1) {
    return std::hypot(g1.mean()[0] - g2.mean()[0], std::sqrt(g1.cov()(0, 0)) - std::sqrt(g2.cov()(0, 0)));
  }
  return wassersteinGaussian(g1.mean(), g1.cov(), g2.mean(), g2.cov());
}

FDivergenceSpec FDivergenceSpec::kl() {
  FDivergenceSpec s;
  s.kind = FDivergenceKind::KL;
  s.f = [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; };
  s.fPrime = [](double x) { return std::log(x) + 1.0; };
  s.fDoublePrime = [](double x) { return 1.0 / x; };
  return s;
}

FDivergenceSpec FDivergenceSpec::chiSquared() {
  FDivergenceSpec s;
  s.kind = FDivergenceKind::chiSquared;
  s.f = [](double x) { return (x - 1.0) * (x - 1.0); };
  s.fPrime = [](double x) { return 2.0 * (x - 1.0); };
  s.fDoublePrime = [](double) { return 2.0; };
  return s;
}

FDivergenceSpec FDivergenceSpec::totalVariationSquaredGenerator() {
  FDivergenceSpec s;
  s.kind = FDivergenceKind::totalVariationSquaredGenerator;
  s.f = [](double x) {
    const double r = std::sqrt(std::max(0.0, x)) - 1.0;
    return r * r;
  };
  s.fPrime = [](double x) { return 1.0 - 1.0 / std::sqrt(x); };
  s.fDoublePrime = [](double x) { return 0.5 / (x * std::sqrt(x)); };
  return s;
}

FDivergenceSpec FDivergenceSpec::custom(std::function<double(double)> f, std::function<double(double)> fPrime,
                                        std::function<double(double)> fDoublePrime) {
  FDivergenceSpec s;
  s.kind = FDivergenceKind::custom;
  s.f = std::move(f);
  s.fPrime = std::move(fPrime);
  s.fDoublePrime = std::move(fDoublePrime);
  s.validate();
  return s;
}

void FDivergenceSpec::validate() const {
  require(f && fPrime && fDoublePrime, ErrorCode::InvalidArgument, "generator needs f, f' and f''");
  require(std::abs(f(1.0)) <= 1e-12, ErrorCode::InvalidArgument, "generator must satisfy f(1) = 0");
  for (int k = -60; k <= 60; ++k) {
    const double x = std::pow(10.0, k / 20.0);
    const double curvature = fDoublePrime(x);
    require(std::isfinite(curvature) && curvature >= -1e-12, ErrorCode::InvalidArgument,
            "generator must be convex: f''(" + std::to_string(x) + ") < 0");
  }
}

const char* fDivergenceName(FDivergenceKind kind) {
  switch (kind) {
    case FDivergenceKind::KL: return "KL";
    case FDivergenceKind::chiSquared: return "chiSquared";
    case FDivergenceKind::totalVariationSquaredGenerator: return "totalVariationSquaredGenerator";
    case FDivergenceKind::custom: return "custom";
  }
  return "custom";
}

double fDivergenceGrid(const FDivergenceSpec& spec, const GridMeasure& mu, const GridMeasure& nu) {
  require(mu.spec() == nu.spec(), ErrorCode::GridMismatch, "f-divergence needs identical grids; resample first");
  require(static_cast<bool>(spec.f), ErrorCode::InvalidArgument, "generator f is missing");
  const double volume = mu.cellVolume();
  double total = 0.0;
  for (Index k = 0; k < mu.cells(); ++k) {
    const double a = mu.density()[k] < kDensityFloor ? 0.0 : mu.density()[k];
    const double b = nu.density()[k] < kDensityFloor ? 0.0 : nu.density()[k];
    if (b == 0.0) {
      if (a > 0.0) return kInf;
      continue;
    }
    total += spec.f(a / b) * b * volume;
  }
  return std::max(0.0, total);
}

double klGaussian(const GaussianMeasure& g1, const GaussianMeasure& g2) {
  requireSameDim(g1, g2);
  const Vector delta = g2.mean() - g1.mean();
  const double trace = (g2.precision() * g1.cov()).trace();
  const double quad = delta.dot(g2.precision() * delta);
  const double value =
      0.5 * (trace + quad - static_cast<double>(g1.dim()) + g2.logDetCov() - g1.logDetCov());
  return std::max(0.0, value);
}

double chiSquaredGaussian(const GaussianMeasure& g1, const GaussianMeasure& g2) {
  requireSameDim(g1, g2);
  const Matrix& p1 = g1.precision();
  const Matrix& p2 = g2.precision();
  const Matrix m = 2.0 * p1 - p2;
  Eigen::LLT<Matrix> llt(0.5 * (m + m.transpose()));
  if (llt.info() != Eigen::Success) return kInf;
  const Matrix lower = llt.matrixL();
  if (lower.diagonal().minCoeff() <= 0.0) return kInf;
  const double logDetM = 2.0 * lower.diagonal().array().log().sum();
  const Vector b = 2.0 * p1 * g1.mean() - p2 * g2.mean();
  const double constant = -g1.mean().dot(p1 * g1.mean()) + 0.5 * g2.mean().dot(p2 * g2.mean());
  const double logIntegral =
      0.5 * b.dot(llt.solve(b)) + constant - g1.logDetCov() + 0.5 * g2.logDetCov() - 0.5 * logDetM;
  return std::max(0.0, std::expm1(logIntegral));
}

double hellingerSquaredGaussian(const GaussianMeasure& g1, const GaussianMeasure& g2) {
  requireSameDim(g1, g2);
  const Matrix avg = 0.5 * (g1.cov() + g2.cov());
  Eigen::LLT<Matrix> llt(avg);
  const double logDetAvg = 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
  const Vector delta = g1.mean() - g2.mean();
  const double logBc =
      0.25 * g1.logDetCov() + 0.25 * g2.logDetCov() - 0.5 * logDetAvg - 0.125 * delta.dot(llt.solve(delta));
  return std::max(0.0, -2.0 * std::expm1(logBc));
}

double fDivergenceGaussian(const FDivergenceSpec& spec, const GaussianMeasure& g1, const GaussianMeasure& g2) {
  switch (spec.kind) {
    case FDivergenceKind::KL: return klGaussian(g1, g2);
    case FDivergenceKind::chiSquared: return chiSquaredGaussian(g1, g2);
    case FDivergenceKind::totalVariationSquaredGenerator: return hellingerSquaredGaussian(g1, g2);
    case FDivergenceKind::custom: break;
  }
  fail(ErrorCode::UnsupportedCarrier, "custom generators have no gaussian closed form; discretize on a grid");
}

double wassersteinDistance(const Measure& mu, const Measure& nu, double p) {
  require(mu.index() == nu.index(), ErrorCode::UnsupportedCarrier,
          std::string("cannot compare ") + carrierName(mu) + " with " + carrierName(nu));
  if (const auto* a = std::get_if<ParticleMeasure>(&mu)) {
    const auto& b = std::get<ParticleMeasure>(nu);
    if (a->dim() == 1 && b.dim() == 1) return wasserstein1D(*a, b, p);
    return wassersteinExact(*a, b, p).value;
  }
  if (const auto* a = std::get_if<GridMeasure>(&mu)) {
    const auto& b = std::get<GridMeasure>(nu);
    require(a->dim() == 1 && b.dim() == 1, ErrorCode::UnsupportedCarrier,
            "grid wasserstein distance is only available in 1D");
    return wasserstein1D(*a, b, p);
  }
  require(p == 2.0, ErrorCode::UnsupportedCarrier, "gaussian wasserstein distance needs p = 2");
  return wassersteinGaussian(std::get<GaussianMeasure>(mu), std::get<GaussianMeasure>(nu));
}

double fDivergence(const FDivergenceSpec& spec, const Measure& mu, const Measure& nu) {
  require(mu.index() == nu.index(), ErrorCode::UnsupportedCarrier,
          std::string("cannot compare ") + carrierName(mu) + " with " + carrierName(nu));
  if (const auto* a = std::get_if<GridMeasure>(&mu)) return fDivergenceGrid(spec, *a, std::get<GridMeasure>(nu));
  if (const auto* a = std::get_if<GaussianMeasure>(&mu)) {
    return fDivergenceGaussian(spec, *a, std::get<GaussianMeasure>(nu));
  }
  fail(ErrorCode::UnsupportedCarrier, "f-divergences between particle measures need densities; use grids");
}

}  // namespace stochinv
