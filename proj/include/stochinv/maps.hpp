#pragma once

#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include "stochinv/measures.hpp"

namespace stochinv {

/// Relative threshold below which a singular value counts as zero.
inline constexpr double kRankThreshold = 1e-12;

/// Matrix A in R^{n x m} (n outputs, m inputs) with its thin SVD cached.
/// Immutable once built.
class LinearForwardMap {
 public:
  explicit LinearForwardMap(Matrix matrix);

  const Matrix& matrix() const { return matrix_; }
  Index outputDim() const { return matrix_.rows(); }
  Index inputDim() const { return matrix_.cols(); }

  /// Thin factors: U is n x k, V is m x k, k = min(n, m); sigma descending.
  const Matrix& U() const { return u_; }
  const Vector& sigma() const { return sigma_; }
  const Matrix& V() const { return v_; }

  Index rank() const { return rank_; }
  bool fullRank() const { return rank_ == sigma_.size(); }
  double sigmaMax() const { return sigma_[0]; }
  double sigmaMin() const { return sigma_[sigma_.size() - 1]; }

  /// Orthonormal basis of Col(A) (first `rank` left singular vectors).
  Matrix columnSpaceBasis() const { return u_.leftCols(rank_); }

 private:
  Matrix matrix_;
  Matrix u_;
  Vector sigma_;
  Matrix v_;
  Index rank_ = 0;
};

/// Moore-Penrose inverse V diag(1/sigma) U^T. Throws RankDeficient.
Matrix pseudoInverse(const LinearForwardMap& map);

struct Projectors {
  Matrix rowSpace;   // A^+ A
  Matrix nullSpace;  // I - A^+ A
};

Projectors projectors(const LinearForwardMap& map);

using VectorFn = std::function<Vector(const Vector&)>;
using MatrixFn = std::function<Matrix(const Vector&)>;

/// Differentiable map G: R^m -> R^n with user-supplied Jacobian and an
/// optional inverse. Function handles must be safe to call concurrently.
struct SmoothForwardMap {
  Index inputDim = 0;
  Index outputDim = 0;
  VectorFn evaluate;
  MatrixFn jacobian;
  VectorFn inverse;
  /// Holder exponent of the inverse; only the Lipschitz case (1) is exercised.
  double inverseHolderExponent = 1.0;

  bool hasInverse() const { return static_cast<bool>(inverse); }
  void validate() const;

  /// Invertible linear maps get A^{-1} as inverse; others none.
  static SmoothForwardMap fromLinear(const LinearForwardMap& map);
};

using ForwardMap = std::variant<LinearForwardMap, SmoothForwardMap>;

Index inputDim(const ForwardMap& map);
Index outputDim(const ForwardMap& map);

/// Central differences with per-coordinate step h * max(1, |u_j|).
Matrix finiteDifferenceJacobian(const VectorFn& evaluate, const Vector& u, double h = 1e-6);

/// Largest relative deviation between the supplied Jacobian and central
/// differences over the probe points.
double jacobianDiscrepancy(const SmoothForwardMap& map, const std::vector<Vector>& probes);

struct NewtonOptions {
  double tolerance = 1e-10;
  int maxIterations = 100;
  /// Initial bisection bracket for scalar maps when Newton stalls.
  double bracketLow = -1e3;
  double bracketHigh = 1e3;
};

/// Inverse of a square map by damped Newton on |G(u) - y|, with bisection
/// fallback for scalar maps. Throws MissingInverse if no root is found.
VectorFn newtonInverse(VectorFn evaluate, MatrixFn jacobian, NewtonOptions options = {});

ParticleMeasure pushforward(const LinearForwardMap& map, const ParticleMeasure& m);
ParticleMeasure pushforward(const SmoothForwardMap& map, const ParticleMeasure& m);
ParticleMeasure pushforward(const ForwardMap& map, const ParticleMeasure& m);

/// Affine image x -> matrix * x + shift of a Gaussian. Throws DegenerateImage
/// if the image covariance has an eigenvalue below 1e-12.
GaussianMeasure pushforwardGaussian(const Matrix& matrix, const Vector& shift, const GaussianMeasure& g);

/// Stacked map [A; alpha I_m].
LinearForwardMap augmentedMap(const LinearForwardMap& map, double alpha);

/// B(y) = J J^T evaluated at u = G^{-1}(y).
Matrix mobilityMatrix(const SmoothForwardMap& map, const Vector& y);
/// Constant mobility A A^T of a linear map.
Matrix mobilityMatrix(const LinearForwardMap& map);

}  // namespace stochinv
