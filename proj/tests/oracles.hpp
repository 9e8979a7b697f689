#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "stochinv/rng.hpp"

// Reference computations that share no code with the library.
namespace oracle {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

constexpr double kPi = 3.14159265358979323846;

inline double normalPdf(double x, double mean, double var) {
  return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2.0 * kPi * var);
}

// Composite Simpson rule with an even number of panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int panels = 20000) {
  if (panels % 2) ++panels;
  const double h = (b - a) / panels;
  double sum = f(a) + f(b);
  for (int i = 1; i < panels; ++i) sum += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return sum * h / 3.0;
}

inline double klQuadrature(const std::function<double(double)>& p, const std::function<double(double)>& q, double a,
                           double b) {
  return simpson(
      [&](double x) {
        const double px = p(x);
        return px > 0.0 ? px * std::log(px / q(x)) : 0.0;
      },
      a, b);
}

// Minimum over all n! matchings of the mean |x_i - y_sigma(i)|^p, to the power 1/p.
inline double bruteForceWasserstein(const Matrix& x, const Matrix& y, double p) {
  const int n = static_cast<int>(x.rows());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (int i = 0; i < n; ++i) cost += std::pow((x.row(i) - y.row(perm[i])).norm(), p);
    best = std::min(best, cost / n);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::pow(best, 1.0 / p);
}

// Sorted matching of two equal-size uniform 1D clouds.
inline double sortedWasserstein(std::vector<double> x, std::vector<double> y, double p) {
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  double cost = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) cost += std::pow(std::abs(x[i] - y[i]), p);
  return std::pow(cost / static_cast<double>(x.size()), 1.0 / p);
}

// W2 between 1D Gaussians.
inline double gaussianW2_1d(double m1, double v1, double m2, double v2) {
  return std::hypot(m1 - m2, std::sqrt(v1) - std::sqrt(v2));
}

// KL between 1D Gaussians.
inline double gaussianKL_1d(double m1, double v1, double m2, double v2) {
  return 0.5 * (v1 / v2 + (m1 - m2) * (m1 - m2) / v2 - 1.0 + std::log(v2 / v1));
}

inline Matrix centralDifference(const std::function<Vector(const Vector&)>& f, const Vector& u, double h = 1e-6) {
  const Vector f0 = f(u);
  Matrix jac(f0.size(), u.size());
  for (Eigen::Index j = 0; j < u.size(); ++j) {
    Vector up = u, dn = u;
    up(j) += h;
    dn(j) -= h;
    jac.col(j) = (f(up) - f(dn)) / (2.0 * h);
  }
  return jac;
}

inline Matrix gaussianMatrix(stochinv::CounterRng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

inline Matrix randomOrthogonal(stochinv::CounterRng& rng, Eigen::Index n) {
  Eigen::HouseholderQR<Matrix> qr(gaussianMatrix(rng, n, n));
  return qr.householderQ() * Matrix::Identity(n, n);
}

// Random n x m matrix with prescribed singular values drawn from [lo, hi].
inline Matrix conditionedMatrix(stochinv::CounterRng& rng, Eigen::Index n, Eigen::Index m, double lo, double hi) {
  const Eigen::Index k = std::min(n, m);
  Matrix s = Matrix::Zero(n, m);
  for (Eigen::Index i = 0; i < k; ++i) s(i, i) = lo + (hi - lo) * rng.uniform();
  return randomOrthogonal(rng, n) * s * randomOrthogonal(rng, m).transpose();
}

inline Matrix randomSpd(stochinv::CounterRng& rng, Eigen::Index n, double floor = 0.2) {
  const Matrix l = gaussianMatrix(rng, n, n);
  return l * l.transpose() / static_cast<double>(n) + floor * Matrix::Identity(n, n);
}

// Symmetric PSD square root by eigen-decomposition.
inline Matrix sqrtm(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

// Bures W2 evaluated independently of the library.
inline double buresW2(const Vector& m1, const Matrix& c1, const Vector& m2, const Matrix& c2) {
  const Matrix r = sqrtm(c2);
  const double t = (c1 + c2 - 2.0 * sqrtm(r * c1 * r)).trace();
  return std::sqrt((m1 - m2).squaredNorm() + std::max(0.0, t));
}

// Ornstein-Uhlenbeck oracle for the flow toward N(0, 1) with mobility b from N(m0, 1).
inline double ouMean(double m0, double b, double t) { return m0 * std::exp(-b * t); }
inline double ouKL(double m0, double b, double t) {
  const double m = ouMean(m0, b, t);
  return 0.5 * m * m;
}

}  // namespace oracle
