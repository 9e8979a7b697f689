#include "stochinv/measures.hpp"

#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "stochinv/error.hpp"

namespace stochinv {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

bool allFinite(const Matrix& m) { return m.allFinite(); }

}  // namespace

// ---------------------------------------------------------------------------
// ParticleMeasure

ParticleMeasure::ParticleMeasure(Matrix points, Vector weights)
    : points_(std::move(points)), weights_(std::move(weights)) {
  require(points_.rows() >= 1, ErrorCode::InvalidMeasure, "particle measure needs at least one atom");
  require(points_.cols() >= 1, ErrorCode::InvalidMeasure, "particle measure needs dimension >= 1");
  require(weights_.size() == points_.rows(), ErrorCode::InvalidMeasure,
          "weights length " + std::to_string(weights_.size()) + " != atom count " +
              std::to_string(points_.rows()));
  require(allFinite(points_), ErrorCode::InvalidMeasure, "atom locations must be finite");
  require(weights_.allFinite() && (weights_.array() >= 0.0).all(), ErrorCode::InvalidMeasure,
          "weights must be finite and nonnegative");
  require(std::abs(weights_.sum() - 1.0) <= kWeightSumTolerance, ErrorCode::InvalidMeasure,
          "weights must sum to one");
}

ParticleMeasure ParticleMeasure::uniform(Matrix points) {
  const Index n = points.rows();
  require(n >= 1, ErrorCode::InvalidMeasure, "particle measure needs at least one atom");
  return ParticleMeasure(std::move(points), Vector::Constant(n, 1.0 / static_cast<double>(n)));
}

ParticleMeasure ParticleMeasure::dirac(const Vector& location) {
  return ParticleMeasure(location.transpose(), Vector::Ones(1));
}

Vector ParticleMeasure::mean() const { return points_.transpose() * weights_; }

Matrix ParticleMeasure::covariance() const {
  const Vector mu = mean();
  const Matrix centered = points_.rowwise() - mu.transpose();
  return centered.transpose() * weights_.asDiagonal() * centered;
}

// ---------------------------------------------------------------------------
// GridSpec

Index GridSpec::cells() const {
  Index total = 1;
  for (int s : shape) total *= s;
  return total;
}

double GridSpec::cellVolume() const {
  double volume = 1.0;
  for (Index k = 0; k < dim(); ++k) volume *= width(k);
  return volume;
}

Index GridSpec::stride(Index axis) const {
  Index s = 1;
  for (Index k = dim() - 1; k > axis; --k) s *= shape[k];
  return s;
}

std::vector<int> GridSpec::unravel(Index flat) const {
  std::vector<int> idx(shape.size());
  for (Index k = dim() - 1; k >= 0; --k) {
    idx[k] = static_cast<int>(flat % shape[k]);
    flat /= shape[k];
  }
  return idx;
}

Vector GridSpec::center(Index flat) const {
  const auto idx = unravel(flat);
  Vector c(dim());
  for (Index k = 0; k < dim(); ++k) c[k] = lower[k] + (idx[k] + 0.5) * width(k);
  return c;
}

bool GridSpec::contains(const Vector& y) const {
  for (Index k = 0; k < dim(); ++k) {
    if (y[k] < lower[k] || y[k] > upper[k]) return false;
  }
  return true;
}

void GridSpec::validate() const {
  require(lower.size() >= 1, ErrorCode::InvalidMeasure, "grid needs dimension >= 1");
  require(upper.size() == lower.size() && static_cast<Index>(shape.size()) == lower.size(),
          ErrorCode::InvalidMeasure, "grid lower/upper/shape lengths differ");
  require(lower.allFinite() && upper.allFinite(), ErrorCode::InvalidMeasure, "grid bounds must be finite");
  for (Index k = 0; k < dim(); ++k) {
    require(upper[k] > lower[k], ErrorCode::InvalidMeasure, "grid upper must exceed lower on every axis");
    require(shape[k] >= 1, ErrorCode::InvalidMeasure, "grid shape entries must be positive");
  }
}

bool GridSpec::operator==(const GridSpec& other) const {
  return shape == other.shape && lower.size() == other.lower.size() && lower == other.lower &&
         upper == other.upper;
}

GridSpec uniformGrid(const Vector& lower, const Vector& upper, int cellsPerAxis) {
  GridSpec spec{lower, upper, std::vector<int>(lower.size(), cellsPerAxis)};
  spec.validate();
  return spec;
}

GridSpec uniformGrid(double lower, double upper, int cells) {
  return uniformGrid(Vector::Constant(1, lower), Vector::Constant(1, upper), cells);
}

// ---------------------------------------------------------------------------
// GridMeasure

GridMeasure::GridMeasure(GridSpec spec, Vector density) : spec_(std::move(spec)), density_(std::move(density)) {
  spec_.validate();
  require(density_.size() == spec_.cells(), ErrorCode::InvalidMeasure,
          "density has " + std::to_string(density_.size()) + " values, grid has " +
              std::to_string(spec_.cells()) + " cells");
  require(density_.allFinite() && (density_.array() >= 0.0).all(), ErrorCode::InvalidMeasure,
          "grid density must be finite and nonnegative");
  require(std::abs(density_.sum() * spec_.cellVolume() - 1.0) <= kGridMassTolerance,
          ErrorCode::InvalidMeasure, "grid mass must equal one");
}

double GridMeasure::interpolate(const Vector& y) const {
  if (y.size() != dim() || !spec_.contains(y)) return 0.0;
  const Index d = dim();
  std::vector<Index> base(d);
  std::vector<double> frac(d);
  for (Index k = 0; k < d; ++k) {
    const int n = spec_.shape[k];
    if (n == 1) {
      base[k] = 0;
      frac[k] = 0.0;
      continue;
    }
    const double t = std::clamp((y[k] - spec_.lower[k]) / spec_.width(k) - 0.5, 0.0, static_cast<double>(n - 1));
    base[k] = std::min<Index>(static_cast<Index>(std::floor(t)), n - 2);
    frac[k] = t - static_cast<double>(base[k]);
  }
  double value = 0.0;
  for (Index corner = 0; corner < (Index{1} << d); ++corner) {
    double weight = 1.0;
    Index flat = 0;
    for (Index k = 0; k < d && weight != 0.0; ++k) {
      const bool up = (corner >> k) & 1;
      if (up && spec_.shape[k] == 1) {
        weight = 0.0;
        break;
      }
      weight *= up ? frac[k] : 1.0 - frac[k];
      flat += (base[k] + (up ? 1 : 0)) * spec_.stride(k);
    }
    if (weight != 0.0) value += weight * density_[flat];
  }
  return value;
}

// ---------------------------------------------------------------------------
// GaussianMeasure

GaussianMeasure::GaussianMeasure(Vector mean, Matrix cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
  require(mean_.size() >= 1, ErrorCode::InvalidMeasure, "gaussian needs dimension >= 1");
  require(cov_.rows() == mean_.size() && cov_.cols() == mean_.size(), ErrorCode::InvalidMeasure,
          "covariance must be d x d with d = len(mean)");
  require(mean_.allFinite() && cov_.allFinite(), ErrorCode::InvalidMeasure, "gaussian parameters must be finite");
  const double scale = std::max(1.0, cov_.cwiseAbs().maxCoeff());
  require((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() <= kSymmetryTolerance * scale,
          ErrorCode::InvalidMeasure, "covariance must be symmetric");
  cov_ = 0.5 * (cov_ + cov_.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov_, Eigen::EigenvaluesOnly);
  require(eig.eigenvalues().minCoeff() > 0.0, ErrorCode::InvalidMeasure, "covariance must be positive definite");
  Eigen::LLT<Matrix> llt(cov_);
  require(llt.info() == Eigen::Success, ErrorCode::InvalidMeasure, "covariance must be positive definite");
  chol_lower_ = llt.matrixL();
  precision_ = llt.solve(Matrix::Identity(dim(), dim()));
  precision_ = 0.5 * (precision_ + precision_.transpose());
  log_det_cov_ = 2.0 * chol_lower_.diagonal().array().log().sum();
}

double GaussianMeasure::logDensity(const Vector& x) const {
  const Vector z = chol_lower_.triangularView<Eigen::Lower>().solve(x - mean_);
  return -0.5 * z.squaredNorm() - 0.5 * log_det_cov_ - 0.5 * static_cast<double>(dim()) * kLogTwoPi;
}

double GaussianMeasure::density(const Vector& x) const { return std::exp(logDensity(x)); }

Vector GaussianMeasure::score(const Vector& x) const { return -(precision_ * (x - mean_)); }

LogConcavityCertificate::LogConcavityCertificate(double value) : lambda(value) {
  require(std::isfinite(value) && value > 0.0, ErrorCode::InvalidArgument, "log-concavity constant must be positive");
}

LogConcavityCertificate logConcavity(const GaussianMeasure& g) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(g.cov(), Eigen::EigenvaluesOnly);
  return LogConcavityCertificate(1.0 / eig.eigenvalues().maxCoeff());
}

// ---------------------------------------------------------------------------

Index dimension(const Measure& m) {
  return std::visit([](const auto& x) { return x.dim(); }, m);
}

const char* carrierName(const Measure& m) {
  switch (m.index()) {
    case 0: return "particle";
    case 1: return "grid";
    default: return "gaussian";
  }
}

ParticleMeasure normalize(Matrix points, Vector weights) {
  require(weights.size() == points.rows(), ErrorCode::InvalidMeasure, "weights length must equal atom count");
  require((weights.array() >= 0.0).all(), ErrorCode::InvalidMeasure, "weights must be nonnegative");
  const double total = weights.sum();
  require(std::isfinite(total) && total > 0.0, ErrorCode::ZeroMass, "total weight must be positive");
  weights /= total;
  return ParticleMeasure(std::move(points), std::move(weights));
}

GridMeasure normalize(GridSpec spec, Vector density) {
  spec.validate();
  require(density.size() == spec.cells(), ErrorCode::InvalidMeasure, "density size must match grid");
  require((density.array() >= 0.0).all(), ErrorCode::InvalidMeasure, "grid density must be nonnegative");
  const double mass = density.sum() * spec.cellVolume();
  require(std::isfinite(mass) && mass > 0.0, ErrorCode::ZeroMass, "grid mass must be positive");
  density /= mass;
  return GridMeasure(std::move(spec), std::move(density));
}

double secondMoment(const ParticleMeasure& m) {
  return m.points().rowwise().squaredNorm().dot(m.weights());
}

double secondMoment(const GridMeasure& m) {
  double total = 0.0;
  for (Index i = 0; i < m.cells(); ++i) total += m.density()[i] * m.spec().center(i).squaredNorm();
  return total * m.cellVolume();
}

double secondMoment(const GaussianMeasure& g) { return g.mean().squaredNorm() + g.cov().trace(); }

double secondMoment(const Measure& m) {
  return std::visit([](const auto& x) { return secondMoment(x); }, m);
}

namespace {

void requireOrthonormal(const Matrix& basis, Index ambient) {
  require(basis.rows() == ambient, ErrorCode::DimensionMismatch, "basis rows must equal the gaussian dimension");
  require(basis.cols() >= 1 && basis.cols() <= ambient, ErrorCode::DimensionMismatch, "basis needs 1..d columns");
  const Matrix gram = basis.transpose() * basis;
  require((gram - Matrix::Identity(basis.cols(), basis.cols())).cwiseAbs().maxCoeff() <= 1e-10,
          ErrorCode::InvalidArgument, "basis columns must be orthonormal");
}

}  // namespace

GaussianMeasure gaussianConditionalOnSubspace(const GaussianMeasure& g, const Matrix& basis) {
  requireOrthonormal(basis, g.dim());
  // Restricting exp(-1/2 (Bz - m)^T P (Bz - m)) to z and completing the square.
  const Matrix restricted = basis.transpose() * g.precision() * basis;
  Eigen::LLT<Matrix> llt(restricted);
  require(llt.info() == Eigen::Success, ErrorCode::DegenerateRestriction,
          "restricted quadratic form is not positive definite");
  Matrix cov = llt.solve(Matrix::Identity(basis.cols(), basis.cols()));
  cov = 0.5 * (cov + cov.transpose());
  Vector mean = llt.solve(basis.transpose() * (g.precision() * g.mean()));
  return GaussianMeasure(std::move(mean), std::move(cov));
}

GaussianMeasure gaussianMarginalOnSubspace(const GaussianMeasure& g, const Matrix& basis) {
  requireOrthonormal(basis, g.dim());
  Matrix cov = basis.transpose() * g.cov() * basis;
  cov = 0.5 * (cov + cov.transpose());
  return GaussianMeasure(basis.transpose() * g.mean(), std::move(cov));
}

// ---------------------------------------------------------------------------
// Kernel density estimation

namespace {

void checkBandwidths(const ParticleMeasure& m, const Vector& query, const Vector& bandwidths) {
  require(query.size() == m.dim(), ErrorCode::DimensionMismatch, "query dimension must match particles");
  require(bandwidths.size() == m.dim(), ErrorCode::DimensionMismatch, "one bandwidth per axis required");
  require((bandwidths.array() > 0.0).all() && bandwidths.allFinite(), ErrorCode::InvalidArgument,
          "bandwidth must be positive");
}

// log(w_i) + log phi_h(query - x_i), per atom.
Vector kernelLogTerms(const ParticleMeasure& m, const Vector& query, const Vector& bandwidths) {
  const Index d = m.dim();
  const double logNorm = -0.5 * static_cast<double>(d) * kLogTwoPi - bandwidths.array().log().sum();
  Vector terms(m.size());
  for (Index i = 0; i < m.size(); ++i) {
    const double w = m.weights()[i];
    if (w <= 0.0) {
      terms[i] = -std::numeric_limits<double>::infinity();
      continue;
    }
    double q = 0.0;
    for (Index k = 0; k < d; ++k) {
      const double r = (query[k] - m.points()(i, k)) / bandwidths[k];
      q += r * r;
    }
    terms[i] = std::log(w) + logNorm - 0.5 * q;
  }
  return terms;
}

}  // namespace

double kdeDensity(const ParticleMeasure& m, const Vector& query, double bandwidth) {
  return kdeDensity(m, query, Vector::Constant(m.dim(), bandwidth));
}

double kdeDensity(const ParticleMeasure& m, const Vector& query, const Vector& bandwidths) {
  return std::exp(kdeLogDensity(m, query, bandwidths));
}

double kdeLogDensity(const ParticleMeasure& m, const Vector& query, const Vector& bandwidths) {
  checkBandwidths(m, query, bandwidths);
  const Vector terms = kernelLogTerms(m, query, bandwidths);
  const double top = terms.maxCoeff();
  if (!std::isfinite(top)) return -std::numeric_limits<double>::infinity();
  return top + std::log((terms.array() - top).exp().sum());
}

Vector kdeScore(const ParticleMeasure& m, const Vector& query, const Vector& bandwidths) {
  checkBandwidths(m, query, bandwidths);
  const Vector terms = kernelLogTerms(m, query, bandwidths);
  const double top = terms.maxCoeff();
  Vector grad = Vector::Zero(m.dim());
  if (!std::isfinite(top)) return grad;
  const Vector inv_h2 = bandwidths.array().square().inverse();
  double total = 0.0;
  for (Index i = 0; i < m.size(); ++i) {
    const double e = std::exp(terms[i] - top);
    if (e == 0.0) continue;
    total += e;
    grad += e * ((m.point(i) - query).array() * inv_h2.array()).matrix();
  }
  return grad / total;
}

Vector silvermanBandwidth(const ParticleMeasure& m) {
  const Index d = m.dim();
  const double n_eff = 1.0 / m.weights().squaredNorm();
  const double factor = std::pow(4.0 / ((static_cast<double>(d) + 2.0) * n_eff), 1.0 / (static_cast<double>(d) + 4.0));
  const Vector sd = m.covariance().diagonal().cwiseMax(0.0).cwiseSqrt();
  Vector h(d);
  // A zero spread (e.g. a single atom) falls back to unit scale.
  for (Index k = 0; k < d; ++k) h[k] = factor * (sd[k] > 0.0 ? sd[k] : 1.0);
  return h;
}

// ---------------------------------------------------------------------------
// Sampling and discretization

double standardNormalQuantile(double p) {
  require(p > 0.0 && p < 1.0, ErrorCode::InvalidArgument, "quantile level must lie in (0, 1)");
  return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

double standardNormalCdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

ParticleMeasure sampleGaussian(const GaussianMeasure& g, Index n, CounterRng& rng) {
  require(n >= 1, ErrorCode::InvalidArgument, "sample count must be positive");
  const Matrix L = Eigen::LLT<Matrix>(g.cov()).matrixL();
  Matrix points(n, g.dim());
  Vector z(g.dim());
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < g.dim(); ++k) z[k] = rng.normal();
    points.row(i) = (g.mean() + L * z).transpose();
  }
  return ParticleMeasure::uniform(std::move(points));
}

namespace {

double radicalInverse(Index i, int base) {
  double result = 0.0;
  double f = 1.0 / base;
  while (i > 0) {
    result += f * static_cast<double>(i % base);
    i /= base;
    f /= base;
  }
  return result;
}

constexpr int kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47};

}  // namespace

ParticleMeasure stratifiedGaussianSample(const GaussianMeasure& g, Index n) {
  require(n >= 1, ErrorCode::InvalidArgument, "sample count must be positive");
  require(g.dim() <= static_cast<Index>(std::size(kPrimes)) + 1, ErrorCode::InvalidArgument,
          "stratified sampling supports up to 16 dimensions");
  const Matrix L = Eigen::LLT<Matrix>(g.cov()).matrixL();
  Matrix points(n, g.dim());
  Vector z(g.dim());
  for (Index i = 0; i < n; ++i) {
    z[0] = standardNormalQuantile((static_cast<double>(i) + 0.5) / static_cast<double>(n));
    for (Index k = 1; k < g.dim(); ++k) z[k] = standardNormalQuantile(radicalInverse(i + 1, kPrimes[k - 1]));
    points.row(i) = (g.mean() + L * z).transpose();
  }
  return ParticleMeasure::uniform(std::move(points));
}

GridMeasure discretize(const std::function<double(const Vector&)>& density, const GridSpec& spec, CellRule rule) {
  spec.validate();
  const Index d = spec.dim();
  Vector values(spec.cells());
  if (rule == CellRule::Center) {
    for (Index i = 0; i < spec.cells(); ++i) values[i] = density(spec.center(i));
  } else {
    static constexpr double kNodes[3] = {-0.7745966692414834, 0.0, 0.7745966692414834};
    static constexpr double kWeights[3] = {5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};
    Index combos = 1;
    for (Index k = 0; k < d; ++k) combos *= 3;
    Vector x(d);
    for (Index i = 0; i < spec.cells(); ++i) {
      const Vector c = spec.center(i);
      double acc = 0.0;
      for (Index q = 0; q < combos; ++q) {
        Index rest = q;
        double w = 1.0;
        for (Index k = 0; k < d; ++k) {
          const int node = static_cast<int>(rest % 3);
          rest /= 3;
          x[k] = c[k] + 0.5 * spec.width(k) * kNodes[node];
          w *= kWeights[node];
        }
        acc += w * density(x);
      }
      values[i] = acc;
    }
  }
  return normalize(spec, std::move(values));
}

GridMeasure discretize(const GaussianMeasure& g, const GridSpec& spec, CellRule rule) {
  require(g.dim() == spec.dim(), ErrorCode::DimensionMismatch, "gaussian and grid dimensions differ");
  return discretize([&g](const Vector& x) { return g.density(x); }, spec, rule);
}

}  // namespace stochinv
