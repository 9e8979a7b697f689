#include <doctest.h>

#include "oracles.hpp"
#include "stochinv/error.hpp"
#include "stochinv/maps.hpp"

using namespace stochinv;

namespace {

Matrix mat(Index rows, Index cols, std::initializer_list<double> v) {
  Matrix m(rows, cols);
  Index k = 0;
  for (double x : v) {
    m(k / cols, k % cols) = x;
    ++k;
  }
  return m;
}

double maxAbs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

SmoothForwardMap cubic() {
  SmoothForwardMap g;
  g.inputDim = 1;
  g.outputDim = 1;
  g.evaluate = [](const Vector& u) -> Vector { return u.array().cube() + u.array(); };
  g.jacobian = [](const Vector& u) -> Matrix { return (3.0 * u.array().square() + 1.0).matrix().asDiagonal(); };
  g.inverse = newtonInverse(g.evaluate, g.jacobian);
  return g;
}

}  // namespace

TEST_CASE("pseudoinverse examples") {
  CHECK(pseudoInverse(LinearForwardMap(mat(1, 1, {3.0})))(0, 0) == doctest::Approx(1.0 / 3.0));
  CHECK(maxAbs(pseudoInverse(LinearForwardMap(mat(1, 2, {1.0, 0.0}))) - mat(2, 1, {1.0, 0.0})) < 1e-15);

  // Minimal-norm solution of u1 + u2 = 1 by Lagrange multipliers: u = a^T / |a|^2.
  const Matrix a = mat(1, 2, {1.0, 1.0});
  const Matrix lagrange = a.transpose() / a.squaredNorm();
  CHECK(maxAbs(pseudoInverse(LinearForwardMap(a)) - lagrange) < 1e-14);
}

TEST_CASE("pseudoinverse rejects rank-deficient matrices") {
  const LinearForwardMap singular(mat(2, 2, {1.0, 2.0, 2.0, 4.0}));
  CHECK(singular.rank() == 1);
  CHECK_THROWS_AS(pseudoInverse(singular), Error);
  try {
    pseudoInverse(singular);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::RankDeficient);
  }
}

TEST_CASE("property: Moore-Penrose identities on random full-rank matrices") {
  CounterRng rng(101);
  const std::pair<Index, Index> shapes[] = {{3, 3}, {5, 2}, {2, 5}};
  for (int trial = 0; trial < 60; ++trial) {
    const auto [n, m] = shapes[trial % 3];
    const Matrix a = oracle::gaussianMatrix(rng, n, m);
    const LinearForwardMap map(a);
    const Matrix p = pseudoInverse(map);
    CHECK(maxAbs(a * p * a - a) < 1e-10);
    CHECK(maxAbs(p * a * p - p) < 1e-10);
    CHECK(maxAbs((a * p).transpose() - a * p) < 1e-10);
    CHECK(maxAbs((p * a).transpose() - p * a) < 1e-10);
    Eigen::JacobiSVD<Matrix> svd(p);
    CHECK(std::abs(svd.singularValues()(0) * map.sigmaMin() - 1.0) < 1e-10);
    CHECK(maxAbs(map.U() * map.sigma().asDiagonal() * map.V().transpose() - a) < 1e-10);
  }
}

TEST_CASE("projectors") {
  const Projectors id = projectors(LinearForwardMap(Matrix::Identity(2, 2)));
  CHECK(maxAbs(id.rowSpace - Matrix::Identity(2, 2)) < 1e-14);
  CHECK(maxAbs(id.nullSpace) < 1e-14);

  const Projectors axis = projectors(LinearForwardMap(mat(1, 2, {1.0, 0.0})));
  CHECK(maxAbs(axis.rowSpace - mat(2, 2, {1.0, 0.0, 0.0, 0.0})) < 1e-14);
  CHECK(maxAbs(axis.nullSpace - mat(2, 2, {0.0, 0.0, 0.0, 1.0})) < 1e-14);

  CounterRng rng(102);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = oracle::gaussianMatrix(rng, 2, 4);
    const Projectors p = projectors(LinearForwardMap(a));
    CHECK(maxAbs(p.rowSpace + p.nullSpace - Matrix::Identity(4, 4)) < 1e-10);
    CHECK(maxAbs(a * p.nullSpace) < 1e-10);
    for (const Matrix* q : {&p.rowSpace, &p.nullSpace}) {
      CHECK(maxAbs(*q * *q - *q) < 1e-10);
      CHECK(maxAbs(q->transpose() * *q - *q) < 1e-10);
    }
  }
}

TEST_CASE("particle pushforward") {
  const ParticleMeasure cloud(mat(3, 2, {1.0, 2.0, -1.0, 0.5, 0.0, 3.0}), Vector::Constant(3, 1.0 / 3.0));
  const ParticleMeasure same = pushforward(LinearForwardMap(Matrix::Identity(2, 2)), cloud);
  CHECK(same.points() == cloud.points());
  CHECK(same.weights() == cloud.weights());

  const ParticleMeasure dirac = pushforward(LinearForwardMap(mat(1, 1, {2.0})), ParticleMeasure::dirac(Vector::Ones(1)));
  CHECK(dirac.points()(0, 0) == 2.0);

  const Matrix a = mat(2, 2, {1.0, 1.0, 0.0, 1.0});
  const ParticleMeasure pushed = pushforward(LinearForwardMap(a), cloud);
  for (Index i = 0; i < 3; ++i) {
    const Vector expected = a * cloud.point(i);
    CHECK(pushed.point(i)(0) == doctest::Approx(expected(0)));
    CHECK(pushed.point(i)(1) == doctest::Approx(expected(1)));
  }
  CHECK(pushed.weights() == cloud.weights());

  CHECK_THROWS_AS(pushforward(LinearForwardMap(Matrix::Identity(3, 3)), cloud), Error);
}

TEST_CASE("property: pushforward commutes with composition") {
  CounterRng rng(103);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = oracle::gaussianMatrix(rng, 3, 2);
    const Matrix b = oracle::gaussianMatrix(rng, 2, 4);
    const ParticleMeasure cloud = ParticleMeasure::uniform(oracle::gaussianMatrix(rng, 6, 4));
    const ParticleMeasure direct = pushforward(LinearForwardMap(a * b), cloud);
    const ParticleMeasure nested = pushforward(LinearForwardMap(a), pushforward(LinearForwardMap(b), cloud));
    CHECK(maxAbs(direct.points() - nested.points()) < 1e-12);
  }
}

TEST_CASE("Gaussian pushforward") {
  const GaussianMeasure g(Vector::Constant(1, 2.0), Matrix::Identity(1, 1));
  const GaussianMeasure same = pushforwardGaussian(Matrix::Identity(1, 1), Vector::Zero(1), g);
  CHECK(same.mean()(0) == 2.0);
  const GaussianMeasure half = pushforwardGaussian(mat(1, 1, {0.5}), Vector::Zero(1), g);
  CHECK(half.mean()(0) == doctest::Approx(1.0));
  CHECK(half.cov()(0, 0) == doctest::Approx(0.25));
  const GaussianMeasure sum =
      pushforwardGaussian(mat(1, 2, {1.0, 1.0}), Vector::Zero(1), GaussianMeasure(Vector::Zero(2), Matrix::Identity(2, 2)));
  CHECK(sum.cov()(0, 0) == doctest::Approx(2.0));

  try {
    pushforwardGaussian(mat(2, 1, {1.0, 0.0}), Vector::Zero(2), g);
    FAIL("expected DegenerateImage");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateImage);
  }
}

TEST_CASE("augmented map") {
  const LinearForwardMap one = augmentedMap(LinearForwardMap(mat(1, 1, {1.0})), 1.0);
  CHECK(maxAbs(one.matrix() - mat(2, 1, {1.0, 1.0})) == 0.0);
  CHECK(one.sigmaMin() == doctest::Approx(std::sqrt(2.0)));
  CHECK(augmentedMap(LinearForwardMap(mat(1, 1, {2.0})), 1.0).sigmaMin() == doctest::Approx(std::sqrt(5.0)));

  CounterRng rng(104);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + trial % 3, m = 1 + trial % 2;
    const Matrix a = oracle::gaussianMatrix(rng, n, m);
    const double alpha = 0.1 + rng.uniform();
    const LinearForwardMap aug = augmentedMap(LinearForwardMap(a), alpha);
    const LinearForwardMap base(a);
    CHECK(aug.sigmaMin() * aug.sigmaMin() ==
          doctest::Approx(base.sigmaMin() * base.sigmaMin() + alpha * alpha).epsilon(1e-10));
    const Vector y = oracle::gaussianMatrix(rng, n, 1);
    Vector stacked = Vector::Zero(n + m);
    stacked.head(n) = y;
    const Matrix normal = a.transpose() * a + alpha * alpha * Matrix::Identity(m, m);
    const Vector expected = normal.ldlt().solve(a.transpose() * y);
    CHECK(maxAbs(pseudoInverse(aug) * stacked - expected) < 1e-10);

    // Operator norm of the regularized inverse against its spectral formula and 1/(2 alpha).
    const Matrix op = normal.inverse() * a.transpose();
    double spectral = 0.0;
    for (Index i = 0; i < base.sigma().size(); ++i) {
      const double s = base.sigma()(i);
      spectral = std::max(spectral, s / (s * s + alpha * alpha));
    }
    Eigen::JacobiSVD<Matrix> svd(op);
    CHECK(svd.singularValues()(0) == doctest::Approx(spectral).epsilon(1e-10));
    CHECK(spectral <= 1.0 / (2.0 * alpha) + 1e-12);
  }
}

TEST_CASE("mobility matrices") {
  SmoothForwardMap id;
  id.inputDim = id.outputDim = 2;
  id.evaluate = [](const Vector& u) { return u; };
  id.jacobian = [](const Vector&) -> Matrix { return Matrix::Identity(2, 2); };
  id.inverse = [](const Vector& y) { return y; };
  CHECK(maxAbs(mobilityMatrix(id, Vector::Constant(2, 3.0)) - Matrix::Identity(2, 2)) == 0.0);

  const Matrix a = mat(2, 2, {2.0, 1.0, 0.0, 1.0});
  CHECK(maxAbs(mobilityMatrix(LinearForwardMap(a)) - a * a.transpose()) < 1e-14);
  const SmoothForwardMap lifted = SmoothForwardMap::fromLinear(LinearForwardMap(a));
  CHECK(maxAbs(mobilityMatrix(lifted, Vector::Constant(2, -1.0)) - a * a.transpose()) < 1e-12);

  const SmoothForwardMap g = cubic();
  CHECK(mobilityMatrix(g, Vector::Zero(1))(0, 0) == doctest::Approx(1.0));
  // y = 10 has root u = 2 (8 + 2); B = (3 * 4 + 1)^2.
  CHECK(mobilityMatrix(g, Vector::Constant(1, 10.0))(0, 0) == doctest::Approx(169.0).epsilon(1e-9));

  SmoothForwardMap noInverse = g;
  noInverse.inverse = nullptr;
  try {
    mobilityMatrix(noInverse, Vector::Zero(1));
    FAIL("expected MissingInverse");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingInverse);
  }
}

TEST_CASE("Jacobian contract against central differences") {
  SmoothForwardMap g;
  g.inputDim = 2;
  g.outputDim = 2;
  g.evaluate = [](const Vector& u) -> Vector {
    Vector y(2);
    y << std::sinh(u(0)) + u(1), u(1) * u(1) * u(1) + u(1);
    return y;
  };
  g.jacobian = [](const Vector& u) -> Matrix {
    Matrix j(2, 2);
    j << std::cosh(u(0)), 1.0, 0.0, 3.0 * u(1) * u(1) + 1.0;
    return j;
  };
  CounterRng rng(105);
  std::vector<Vector> probes;
  for (int i = 0; i < 10; ++i) probes.push_back(oracle::gaussianMatrix(rng, 2, 1));
  CHECK(jacobianDiscrepancy(g, probes) < 1e-5);
  for (const auto& u : probes) {
    CHECK(maxAbs(finiteDifferenceJacobian(g.evaluate, u) - oracle::centralDifference(g.evaluate, u)) < 1e-6);
  }
  g.jacobian = [](const Vector&) -> Matrix { return Matrix::Identity(2, 2); };
  CHECK(jacobianDiscrepancy(g, probes) > 1e-2);
}

TEST_CASE("Newton inverse recovers roots") {
  const SmoothForwardMap g = cubic();
  for (double y : {-30.0, -1.0, 0.0, 0.5, 10.0, 1000.0}) {
    const Vector u = g.inverse(Vector::Constant(1, y));
    CHECK(std::abs(g.evaluate(u)(0) - y) < 1e-9 * std::max(1.0, std::abs(y)));
  }
}
