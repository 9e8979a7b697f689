#include "stochinv/maps.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stochinv/error.hpp"

namespace stochinv {

LinearForwardMap::LinearForwardMap(Matrix matrix) : matrix_(std::move(matrix)) {
  require(matrix_.rows() >= 1 && matrix_.cols() >= 1, ErrorCode::ShapeError, "map matrix must be non-empty");
  require(matrix_.allFinite(), ErrorCode::InvalidArgument, "map matrix must be finite");
  Eigen::JacobiSVD<Matrix> svd(matrix_, Eigen::ComputeThinU | Eigen::ComputeThinV);
  u_ = svd.matrixU();
  sigma_ = svd.singularValues();
  v_ = svd.matrixV();
  const double top = sigma_[0];
  rank_ = 0;
  if (top > 0.0) {
    for (Index i = 0; i < sigma_.size(); ++i) {
      if (sigma_[i] > kRankThreshold * top) ++rank_;
    }
  }
}

Matrix pseudoInverse(const LinearForwardMap& map) {
  require(map.fullRank(), ErrorCode::RankDeficient,
          "matrix has rank " + std::to_string(map.rank()) + " < " + std::to_string(map.sigma().size()));
  return map.V() * map.sigma().cwiseInverse().asDiagonal() * map.U().transpose();
}

Projectors projectors(const LinearForwardMap& map) {
  require(map.fullRank(), ErrorCode::RankDeficient, "projectors need a full-rank map");
  // V V^T is A^+ A computed without forming the product.
  Matrix row = map.V() * map.V().transpose();
  row = 0.5 * (row + row.transpose());
  const Index m = map.inputDim();
  return {row, Matrix::Identity(m, m) - row};
}

void SmoothForwardMap::validate() const {
  require(inputDim >= 1 && outputDim >= 1, ErrorCode::ShapeError, "smooth map dimensions must be positive");
  require(static_cast<bool>(evaluate), ErrorCode::InvalidArgument, "smooth map needs an evaluate function");
  require(static_cast<bool>(jacobian), ErrorCode::InvalidArgument, "smooth map needs a jacobian function");
}

SmoothForwardMap SmoothForwardMap::fromLinear(const LinearForwardMap& map) {
  SmoothForwardMap out;
  out.inputDim = map.inputDim();
  out.outputDim = map.outputDim();
  const Matrix a = map.matrix();
  out.evaluate = [a](const Vector& u) -> Vector { return a * u; };
  out.jacobian = [a](const Vector&) -> Matrix { return a; };
  if (map.inputDim() == map.outputDim() && map.fullRank()) {
    const Matrix inv = pseudoInverse(map);
    out.inverse = [inv](const Vector& y) -> Vector { return inv * y; };
  }
  return out;
}

Index inputDim(const ForwardMap& map) {
  return std::visit([](const auto& g) -> Index {
    if constexpr (std::is_same_v<std::decay_t<decltype(g)>, LinearForwardMap>) return g.inputDim();
    else return g.inputDim;
  }, map);
}

Index outputDim(const ForwardMap& map) {
  return std::visit([](const auto& g) -> Index {
    if constexpr (std::is_same_v<std::decay_t<decltype(g)>, LinearForwardMap>) return g.outputDim();
    else return g.outputDim;
  }, map);
}

Matrix finiteDifferenceJacobian(const VectorFn& evaluate, const Vector& u, double h) {
  const Vector f0 = evaluate(u);
  Matrix jac(f0.size(), u.size());
  Vector probe = u;
  for (Index j = 0; j < u.size(); ++j) {
    const double step = h * std::max(1.0, std::abs(u[j]));
    probe[j] = u[j] + step;
    const Vector plus = evaluate(probe);
    probe[j] = u[j] - step;
    const Vector minus = evaluate(probe);
    probe[j] = u[j];
    jac.col(j) = (plus - minus) / (2.0 * step);
  }
  return jac;
}

double jacobianDiscrepancy(const SmoothForwardMap& map, const std::vector<Vector>& probes) {
  map.validate();
  double worst = 0.0;
  for (const Vector& u : probes) {
    require(u.size() == map.inputDim, ErrorCode::DimensionMismatch, "probe dimension must match map input");
    const Matrix supplied = map.jacobian(u);
    const Matrix numeric = finiteDifferenceJacobian(map.evaluate, u);
    const double scale = std::max(1.0, numeric.norm());
    worst = std::max(worst, (supplied - numeric).norm() / scale);
  }
  return worst;
}

VectorFn newtonInverse(VectorFn evaluate, MatrixFn jacobian, NewtonOptions options) {
  return [evaluate = std::move(evaluate), jacobian = std::move(jacobian), options](const Vector& y) -> Vector {
    Vector u = Vector::Zero(y.size());
    Vector residual = evaluate(u) - y;
    require(residual.size() == y.size(), ErrorCode::ShapeError, "newton inversion needs a square map");
    for (int iter = 0; iter < options.maxIterations && residual.norm() > options.tolerance; ++iter) {
      const Vector step = jacobian(u).fullPivLu().solve(residual);
      if (!step.allFinite()) break;
      bool accepted = false;
      for (double t = 1.0; t > 1e-10; t *= 0.5) {
        const Vector trial = u - t * step;
        const Vector trial_residual = evaluate(trial) - y;
        if (trial_residual.norm() < residual.norm()) {
          u = trial;
          residual = trial_residual;
          accepted = true;
          break;
        }
      }
      if (!accepted) break;
    }
    if (residual.norm() <= options.tolerance) return u;

    if (y.size() == 1) {
      auto g = [&](double x) { return evaluate(Vector::Constant(1, x))[0] - y[0]; };
      double lo = options.bracketLow;
      double hi = options.bracketHigh;
      double glo = g(lo);
      double ghi = g(hi);
      for (int expand = 0; expand < 20 && glo * ghi > 0.0; ++expand) {
        lo *= 2.0;
        hi *= 2.0;
        glo = g(lo);
        ghi = g(hi);
      }
      if (glo * ghi <= 0.0) {
        for (int iter = 0; iter < 200; ++iter) {
          const double mid = 0.5 * (lo + hi);
          const double gmid = g(mid);
          if (std::abs(gmid) <= options.tolerance || hi - lo <= 1e-15 * std::max(1.0, std::abs(mid))) {
            return Vector::Constant(1, mid);
          }
          if ((gmid < 0.0) == (glo < 0.0)) {
            lo = mid;
            glo = gmid;
          } else {
            hi = mid;
          }
        }
        return Vector::Constant(1, 0.5 * (lo + hi));
      }
    }
    fail(ErrorCode::MissingInverse, "newton inversion did not reach the residual tolerance");
  };
}

ParticleMeasure pushforward(const LinearForwardMap& map, const ParticleMeasure& m) {
  require(map.inputDim() == m.dim(), ErrorCode::DimensionMismatch,
          "map input dimension " + std::to_string(map.inputDim()) + " != particle dimension " +
              std::to_string(m.dim()));
  return ParticleMeasure(m.points() * map.matrix().transpose(), m.weights());
}

ParticleMeasure pushforward(const SmoothForwardMap& map, const ParticleMeasure& m) {
  map.validate();
  require(map.inputDim == m.dim(), ErrorCode::DimensionMismatch,
          "map input dimension " + std::to_string(map.inputDim) + " != particle dimension " + std::to_string(m.dim()));
  Matrix out(m.size(), map.outputDim);
  for (Index i = 0; i < m.size(); ++i) {
    const Vector y = map.evaluate(m.point(i));
    require(y.size() == map.outputDim, ErrorCode::DimensionMismatch, "map returned a vector of the wrong size");
    out.row(i) = y.transpose();
  }
  return ParticleMeasure(std::move(out), m.weights());
}

ParticleMeasure pushforward(const ForwardMap& map, const ParticleMeasure& m) {
  return std::visit([&m](const auto& g) { return pushforward(g, m); }, map);
}

GaussianMeasure pushforwardGaussian(const Matrix& matrix, const Vector& shift, const GaussianMeasure& g) {
  require(matrix.cols() == g.dim(), ErrorCode::DimensionMismatch, "matrix columns must equal gaussian dimension");
  require(shift.size() == matrix.rows(), ErrorCode::DimensionMismatch, "shift length must equal matrix rows");
  Matrix cov = matrix * g.cov() * matrix.transpose();
  cov = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov, Eigen::EigenvaluesOnly);
  require(eig.eigenvalues().minCoeff() >= 1e-12, ErrorCode::DegenerateImage,
          "image covariance is singular; the pushforward has no density");
  return GaussianMeasure(matrix * g.mean() + shift, std::move(cov));
}

LinearForwardMap augmentedMap(const LinearForwardMap& map, double alpha) {
  require(std::isfinite(alpha) && alpha > 0.0, ErrorCode::InvalidArgument, "alpha must be positive");
  const Index n = map.outputDim();
  const Index m = map.inputDim();
  Matrix stacked(n + m, m);
  stacked.topRows(n) = map.matrix();
  stacked.bottomRows(m) = alpha * Matrix::Identity(m, m);
  return LinearForwardMap(std::move(stacked));
}

Matrix mobilityMatrix(const SmoothForwardMap& map, const Vector& y) {
  map.validate();
  require(map.hasInverse(), ErrorCode::MissingInverse, "mobility B(y) needs G^{-1}");
  require(y.size() == map.outputDim, ErrorCode::DimensionMismatch, "y dimension must match map output");
  const Vector u = map.inverse(y);
  const Matrix jac = map.jacobian(u);
  Matrix b = jac * jac.transpose();
  return 0.5 * (b + b.transpose());
}

Matrix mobilityMatrix(const LinearForwardMap& map) {
  Matrix b = map.matrix() * map.matrix().transpose();
  return 0.5 * (b + b.transpose());
}

}  // namespace stochinv
