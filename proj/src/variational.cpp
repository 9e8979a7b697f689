#include "stochinv/variational.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "stochinv/error.hpp"
#include "stochinv/inversion.hpp"

namespace stochinv {

namespace {

void requireAlpha(double alpha) {
  require(std::isfinite(alpha) && alpha >= 0.0, ErrorCode::InvalidArgument, "alpha must be finite and >= 0");
}

double gridKl(const GridMeasure& a, const GridMeasure& b) { return fDivergenceGrid(FDivergenceSpec::kl(), a, b); }

double quadratic(const Matrix& p, const Vector& m) { return m.dot(p * m); }

double logDet(const Matrix& spd) {
  Eigen::LLT<Matrix> llt(spd);
  require(llt.info() == Eigen::Success, ErrorCode::InvalidMeasure, "matrix must be positive definite");
  return 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
}

GaussianMeasure invertGaussian(const LinearForwardMap& map, const GaussianMeasure& data) {
  require(map.inputDim() == map.outputDim(), ErrorCode::MissingInverse, "entropy regularization needs invertible G");
  require(data.dim() == map.outputDim(), ErrorCode::DimensionMismatch, "data dimension must match map output");
  return pushforwardGaussian(pseudoInverse(map), Vector::Zero(map.inputDim()), data);
}

}  // namespace

EntropyRegularizedSolution solveEntropyEntropy(const ForwardMap& map, const GridMeasure& data,
                                               const GridMeasure& prior, double alpha,
                                               const std::optional<GridMeasure>& truth) {
  requireAlpha(alpha);
  const GridMeasure pulled = pullbackToGrid(map, data, prior.spec());
  const Index cells = pulled.cells();
  const double volume = pulled.cellVolume();

  EntropyRegularizedSolution out{pulled, alpha, 1.0, std::nullopt};
  if (alpha > 0.0) {
    const double a = 1.0 / (1.0 + alpha);
    const double b = alpha / (1.0 + alpha);
    Vector logUnnormalized = Vector::Constant(cells, -std::numeric_limits<double>::infinity());
    for (Index c = 0; c < cells; ++c) {
      const double p = pulled.density()[c];
      const double q = prior.density()[c];
      if (p <= 0.0) continue;
      require(q > 0.0, ErrorCode::SupportMismatch,
              "prior vanishes at cell " + std::to_string(c) + " where the pulled-back data is positive");
      logUnnormalized[c] = a * std::log(p) + b * std::log(q);
    }
    const double top = logUnnormalized.maxCoeff();
    const Vector scaled = (logUnnormalized.array() - top).exp();
    const double mass = scaled.sum() * volume;
    const double logC = -(top + std::log(mass));
    out.normalizationC = std::exp(logC);
    out.solution = GridMeasure(prior.spec(), scaled / mass);
  }
  if (truth) {
    EntropyErrorTerms terms;
    terms.klDataTerm = gridKl(*truth, pulled);
    terms.klPriorTerm = gridKl(*truth, prior);
    terms.logC = std::log(out.normalizationC);
    out.errorTerms = terms;
  }
  return out;
}

EntropyRegularizedSolution solveEntropyEntropyGaussian(const LinearForwardMap& map, const GaussianMeasure& data,
                                                       const GaussianMeasure& prior, double alpha,
                                                       const std::optional<GaussianMeasure>& truth) {
  requireAlpha(alpha);
  const GaussianMeasure pulled = invertGaussian(map, data);
  require(prior.dim() == pulled.dim(), ErrorCode::DimensionMismatch, "prior dimension must match map input");
  const double a = 1.0 / (1.0 + alpha);
  const double b = alpha / (1.0 + alpha);
  const Matrix precision = a * pulled.precision() + b * prior.precision();
  const Vector shift = a * pulled.precision() * pulled.mean() + b * prior.precision() * prior.mean();
  const Matrix cov = precision.inverse();
  const Vector mean = cov * shift;

  EntropyRegularizedSolution out{GaussianMeasure(mean, 0.5 * (cov + cov.transpose())), alpha, 1.0, std::nullopt};
  // log C = -log ∫ p^a q^b.
  const double logC = 0.5 * (a * quadratic(pulled.precision(), pulled.mean()) +
                             b * quadratic(prior.precision(), prior.mean()) - quadratic(precision, mean)) +
                      0.5 * a * pulled.logDetCov() + 0.5 * b * prior.logDetCov() + 0.5 * logDet(precision);
  out.normalizationC = std::exp(logC);
  if (truth) {
    out.errorTerms = EntropyErrorTerms{klGaussian(*truth, pulled), klGaussian(*truth, prior), logC};
  }
  return out;
}

EntropyErrorIdentity entropyErrorIdentity(const EntropyRegularizedSolution& sol, const GridMeasure& truth,
                                          const ForwardMap& map, const GridMeasure& data, const GridMeasure& prior) {
  const auto* solution = std::get_if<GridMeasure>(&sol.solution);
  require(solution != nullptr, ErrorCode::UnsupportedCarrier, "grid identity needs a grid solution");
  require(truth.spec() == prior.spec(), ErrorCode::GridMismatch, "truth must live on the prior's grid");
  const GridMeasure pulled = pullbackToGrid(map, data, prior.spec());
  EntropyErrorIdentity out;
  out.terms.klDataTerm = gridKl(truth, pulled);
  out.terms.klPriorTerm = gridKl(truth, prior);
  out.terms.logC = std::log(sol.normalizationC);
  out.lhs = gridKl(truth, *solution);
  const double a = 1.0 / (1.0 + sol.alpha);
  const double b = sol.alpha / (1.0 + sol.alpha);
  out.rhs = a * out.terms.klDataTerm + (sol.alpha > 0.0 ? b * out.terms.klPriorTerm : 0.0) - out.terms.logC;
  out.residual = std::abs(out.lhs - out.rhs);
  return out;
}

EntropyErrorIdentity entropyErrorIdentity(const EntropyRegularizedSolution& sol, const GaussianMeasure& truth,
                                          const LinearForwardMap& map, const GaussianMeasure& data,
                                          const GaussianMeasure& prior) {
  const auto* solution = std::get_if<GaussianMeasure>(&sol.solution);
  require(solution != nullptr, ErrorCode::UnsupportedCarrier, "gaussian identity needs a gaussian solution");
  EntropyErrorIdentity out;
  out.terms.klDataTerm = klGaussian(truth, invertGaussian(map, data));
  out.terms.klPriorTerm = klGaussian(truth, prior);
  out.terms.logC = std::log(sol.normalizationC);
  out.lhs = klGaussian(truth, *solution);
  const double a = 1.0 / (1.0 + sol.alpha);
  const double b = sol.alpha / (1.0 + sol.alpha);
  out.rhs = a * out.terms.klDataTerm + b * out.terms.klPriorTerm - out.terms.logC;
  out.residual = std::abs(out.lhs - out.rhs);
  return out;
}

Matrix tikhonovOperator(const LinearForwardMap& map, double alpha) {
  requireAlpha(alpha);
  require(map.outputDim() >= map.inputDim(), ErrorCode::ShapeError,
          "W2 regularization needs n >= m, got " + std::to_string(map.outputDim()) + " x " +
              std::to_string(map.inputDim()));
  require(map.fullRank(), ErrorCode::RankDeficient, "W2 regularization needs full column rank");
  // V diag(s / (s^2 + alpha^2)) U^T, which is A^+ at alpha = 0.
  const Vector& s = map.sigma();
  const Vector gain = s.array() / (s.array().square() + alpha * alpha);
  return map.V() * gain.asDiagonal() * map.U().transpose();
}

TikhonovW2Solution solveW2Tikhonov(const LinearForwardMap& map, const Measure& data, double alpha,
                                   std::optional<double> noiseW2, std::optional<double> truthSecondMoment) {
  const Matrix op = tikhonovOperator(map, alpha);
  require(dimension(data) == map.outputDim(), ErrorCode::DimensionMismatch, "data dimension must match map output");
  require(!std::holds_alternative<GridMeasure>(data), ErrorCode::UnsupportedCarrier,
          "W2 regularization takes particle or gaussian data");
  Measure solution = std::holds_alternative<ParticleMeasure>(data)
                         ? Measure(ParticleMeasure(std::get<ParticleMeasure>(data).points() * op.transpose(),
                                                   std::get<ParticleMeasure>(data).weights()))
                         : Measure(pushforwardGaussian(op, Vector::Zero(op.rows()), std::get<GaussianMeasure>(data)));
  TikhonovW2Solution out{std::move(solution), alpha, op, std::nullopt};
  if (noiseW2 && alpha > 0.0) {
    out.bound = tikhonovErrorBound(map, alpha, *noiseW2, truthSecondMoment.value_or(secondMoment(data)));
  }
  return out;
}

TikhonovBound tikhonovErrorBound(const LinearForwardMap& map, double alpha, double dataNoise,
                                 double dataSecondMoment) {
  require(std::isfinite(alpha) && alpha > 0.0, ErrorCode::InvalidArgument, "bound needs alpha > 0");
  require(std::isfinite(dataNoise) && dataNoise >= 0.0, ErrorCode::InvalidArgument, "noise level must be >= 0");
  require(std::isfinite(dataSecondMoment) && dataSecondMoment >= 0.0, ErrorCode::InvalidArgument,
          "second moment must be >= 0");
  require(map.fullRank(), ErrorCode::RankDeficient, "bound needs full column rank");
  const double sigmaMin = map.sigmaMin();
  const double root = std::sqrt(dataSecondMoment);
  const double a2 = alpha * alpha;

  TikhonovBound b;
  b.noiseTerm = std::sqrt(1.0 / (2.0 * alpha)) * dataNoise;
  b.regTerm = std::sqrt(alpha / (2.0 * sigmaMin * sigmaMin)) * root;
  b.total = b.noiseTerm + b.regTerm;
  b.midRegTerm = std::sqrt(a2 / (sigmaMin * (sigmaMin * sigmaMin + a2))) * root;

  double gain = 0.0;
  double gap = 0.0;
  for (Index i = 0; i < map.sigma().size(); ++i) {
    const double s = map.sigma()[i];
    gain = std::max(gain, s / (s * s + a2));
    gap = std::max(gap, a2 / (s * (s * s + a2)));
  }
  b.sharpNoiseTerm = gain * dataNoise;
  b.sharpRegTerm = gap * root;
  b.sharpTotal = b.sharpNoiseTerm + b.sharpRegTerm;
  return b;
}

double balanceAlpha(const LinearForwardMap& map, double dataNoise, double dataSecondMoment) {
  require(dataSecondMoment > 0.0, ErrorCode::InvalidArgument, "balance alpha needs a positive second moment");
  return map.sigmaMin() * dataNoise / std::sqrt(dataSecondMoment);
}

double w2TikhonovObjective(const LinearForwardMap& map, const ParticleMeasure& data, double alpha,
                           const ParticleMeasure& candidate) {
  requireAlpha(alpha);
  const ParticleMeasure image = pushforward(map, candidate);
  const double transport = wassersteinExact(image, data, 2.0).coupling.cost;
  return transport + alpha * alpha * secondMoment(candidate);
}

AugmentedObjective augmentedObjectiveCheck(const LinearForwardMap& map, const ParticleMeasure& data, double alpha,
                                           const ParticleMeasure& candidate) {
  requireAlpha(alpha);
  require(data.dim() == map.outputDim(), ErrorCode::DimensionMismatch, "data dimension must match map output");
  AugmentedObjective out;
  out.lhs = w2TikhonovObjective(map, data, alpha, candidate);

  const Index n = map.outputDim();
  const Index m = map.inputDim();
  Matrix stacked = map.matrix();
  stacked.conservativeResize(n + m, m);
  stacked.bottomRows(m) = alpha * Matrix::Identity(m, m);
  const ParticleMeasure image(candidate.points() * stacked.transpose(), candidate.weights());
  Matrix padded = Matrix::Zero(data.size(), n + m);
  padded.leftCols(n) = data.points();
  const ParticleMeasure target(std::move(padded), data.weights());
  out.rhs = wassersteinExact(image, target, 2.0).coupling.cost;
  return out;
}

}  // namespace stochinv
