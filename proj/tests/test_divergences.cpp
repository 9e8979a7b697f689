#include <doctest.h>

#include <limits>

#include "oracles.hpp"
#include "stochinv/divergences.hpp"
#include "stochinv/error.hpp"
#include "stochinv/maps.hpp"

using namespace stochinv;

namespace {

ParticleMeasure atoms1d(std::initializer_list<double> xs) {
  Matrix p(static_cast<Index>(xs.size()), 1);
  Index i = 0;
  for (double x : xs) p(i++, 0) = x;
  return ParticleMeasure::uniform(p);
}

std::vector<double> column(const ParticleMeasure& m) {
  std::vector<double> out(m.points().rows());
  for (Index i = 0; i < m.points().rows(); ++i) out[i] = m.points()(i, 0);
  return out;
}

GaussianMeasure gauss1(double mean, double var) {
  return GaussianMeasure(Vector::Constant(1, mean), Matrix::Constant(1, 1, var));
}

void checkCoupling(const Coupling& c, const ParticleMeasure& mu, const ParticleMeasure& nu) {
  CHECK((c.plan.array() >= -1e-15).all());
  CHECK((c.plan.rowwise().sum() - mu.weights()).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((c.plan.colwise().sum().transpose() - nu.weights()).cwiseAbs().maxCoeff() < 1e-10);
}

}  // namespace

TEST_CASE("wasserstein1D examples") {
  CHECK(wasserstein1D(atoms1d({0.0}), atoms1d({3.0}), 2.0) == doctest::Approx(3.0));
  CHECK(wasserstein1D(atoms1d({0.0, 1.0}), atoms1d({2.0, 3.0}), 2.0) == doctest::Approx(2.0));

  const GridSpec spec = uniformGrid(-10.0, 12.0, 4000);
  const GridMeasure a = discretize(gauss1(0.0, 1.0), spec, CellRule::Average);
  const GridMeasure b = discretize(gauss1(2.0, 1.0), spec, CellRule::Average);
  CHECK(std::abs(wasserstein1D(a, b, 2.0) - 2.0) < 1e-3);

  // Unequal weights against the merged quantile sum done by hand: mass 0.25 moves 0 -> 1, 0.75 moves 2 -> 1.
  const ParticleMeasure mu((Matrix(2, 1) << 0.0, 2.0).finished(), (Vector(2) << 0.25, 0.75).finished());
  CHECK(wasserstein1D(mu, atoms1d({1.0}), 1.0) == doctest::Approx(1.0));

  CHECK_THROWS_AS(wasserstein1D(ParticleMeasure::uniform(Matrix::Zero(2, 2)), atoms1d({0.0, 1.0}), 2.0), Error);
}

TEST_CASE("exact OT examples") {
  CounterRng rng(201);
  const ParticleMeasure cloud = ParticleMeasure::uniform(oracle::gaussianMatrix(rng, 5, 2));
  const TransportResult self = wassersteinExact(cloud, cloud, 2.0);
  CHECK(self.value < 1e-12);
  checkCoupling(self.coupling, cloud, cloud);
  CHECK((self.coupling.plan - Matrix(cloud.weights().asDiagonal())).cwiseAbs().maxCoeff() < 1e-12);

  try {
    wassersteinExact(cloud, cloud, 2.0, 10);
    FAIL("expected SizeCap");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SizeCap);
  }
}

TEST_CASE("property: exact OT against permutation enumeration and sorted matching") {
  CounterRng rng(202);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 2 + trial % 5;
    const Index d = 1 + trial % 3;
    const double p = trial % 2 ? 1.0 : 2.0;
    const Matrix x = oracle::gaussianMatrix(rng, n, d);
    const Matrix y = oracle::gaussianMatrix(rng, n, d);
    const ParticleMeasure mu = ParticleMeasure::uniform(x), nu = ParticleMeasure::uniform(y);
    const TransportResult r = wassersteinExact(mu, nu, p);
    CHECK(std::abs(r.value - oracle::bruteForceWasserstein(x, y, p)) < 1e-9);
    checkCoupling(r.coupling, mu, nu);
  }
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 3 + trial % 12;
    const ParticleMeasure mu = ParticleMeasure::uniform(oracle::gaussianMatrix(rng, n, 1));
    const ParticleMeasure nu = ParticleMeasure::uniform(oracle::gaussianMatrix(rng, n, 1).array() + 0.5);
    const double exact = wassersteinExact(mu, nu, 2.0).value;
    CHECK(std::abs(exact - wasserstein1D(mu, nu, 2.0)) < 1e-9);
    CHECK(std::abs(exact - oracle::sortedWasserstein(column(mu), column(nu), 2.0)) < 1e-9);
  }
}

TEST_CASE("property: W2 metric axioms on small particle measures") {
  CounterRng rng(203);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n = 3 + trial % 3;
    const ParticleMeasure a = ParticleMeasure::uniform(oracle::gaussianMatrix(rng, n, 2));
    const ParticleMeasure b = ParticleMeasure::uniform(oracle::gaussianMatrix(rng, n + 1, 2));
    const ParticleMeasure c = ParticleMeasure::uniform(oracle::gaussianMatrix(rng, n + 2, 2));
    const double ab = wassersteinExact(a, b, 2.0).value;
    const double ba = wassersteinExact(b, a, 2.0).value;
    const double bc = wassersteinExact(b, c, 2.0).value;
    const double ac = wassersteinExact(a, c, 2.0).value;
    CHECK(ab >= 0.0);
    CHECK(std::abs(ab - ba) < 1e-9);
    CHECK(wassersteinExact(a, a, 2.0).value < 1e-9);
    CHECK(ac <= ab + bc + 1e-9);
  }
}

TEST_CASE("Sinkhorn approximates exact OT") {
  CounterRng rng(204);
  const ParticleMeasure cloud = ParticleMeasure::uniform(Vector::LinSpaced(10, 0.0, 4.5));
  SinkhornOptions opts;
  opts.epsilon = 0.01;
  const TransportResult self = sinkhorn(cloud, cloud, 2.0, opts);
  CHECK(self.value * self.value <= opts.epsilon * std::log(10.0) + 1e-12);
  for (Index i = 0; i < 10; ++i) {
    Index argmax;
    self.coupling.plan.row(i).maxCoeff(&argmax);
    CHECK(argmax == i);
  }

  const ParticleMeasure mu = ParticleMeasure::uniform(oracle::gaussianMatrix(rng, 10, 1));
  const ParticleMeasure nu = ParticleMeasure::uniform(oracle::gaussianMatrix(rng, 10, 1).array() + 1.0);
  const double exact = wassersteinExact(mu, nu, 2.0).value;
  double previous = std::numeric_limits<double>::infinity();
  opts.maxIterations = 200000;
  for (double eps : {1.0, 0.1, 0.01}) {
    opts.epsilon = eps;
    const TransportResult r = sinkhorn(mu, nu, 2.0, opts);
    CHECK(r.converged);
    CHECK((r.coupling.plan.rowwise().sum() - mu.weights()).lpNorm<1>() <= opts.tolerance);
    const double gap = std::abs(r.value - exact);
    CHECK(gap <= previous + 1e-12);
    previous = gap;
    if (eps == 0.01) CHECK(gap <= 0.02 * exact);
  }

  opts.epsilon = 0.1;
  opts.maxIterations = 50;
  const TransportResult capped = sinkhorn(mu, nu, 2.0, opts);
  CHECK_FALSE(capped.converged);
  CHECK(capped.iterations <= 50);
  CHECK(std::isfinite(capped.value));

  opts.epsilon = 0.0;
  CHECK_THROWS_AS(sinkhorn(mu, nu, 2.0, opts), Error);
}

TEST_CASE("Bures distance examples") {
  CHECK(wassersteinGaussian(gauss1(0.3, 2.0), gauss1(0.3, 2.0)) < 1e-12);
  CHECK(wassersteinGaussian(gauss1(0.0, 1.0), gauss1(0.0, 4.0)) == doctest::Approx(1.0));
  const GaussianMeasure g1(Vector::Zero(2), Matrix::Identity(2, 2));
  const GaussianMeasure g2((Vector(2) << 3.0, 4.0).finished(), Matrix::Identity(2, 2));
  CHECK(wassersteinGaussian(g1, g2) == doctest::Approx(5.0));

  CounterRng rng(205);
  for (int trial = 0; trial < 20; ++trial) {
    const Index d = 1 + trial % 3;
    const Vector m1 = oracle::gaussianMatrix(rng, d, 1), m2 = oracle::gaussianMatrix(rng, d, 1);
    const Matrix c1 = oracle::randomSpd(rng, d), c2 = oracle::randomSpd(rng, d);
    CHECK(wassersteinGaussian(GaussianMeasure(m1, c1), GaussianMeasure(m2, c2)) ==
          doctest::Approx(oracle::buresW2(m1, c1, m2, c2)).epsilon(1e-9));
    if (d == 1)
      CHECK(wassersteinGaussian(GaussianMeasure(m1, c1), GaussianMeasure(m2, c2)) ==
            doctest::Approx(oracle::gaussianW2_1d(m1(0), c1(0, 0), m2(0), c2(0, 0))).epsilon(1e-12));
  }
}

TEST_CASE("f-divergence on grids") {
  const GridSpec spec = uniformGrid(-12.0, 13.0, 5000);
  const GridMeasure p = discretize(gauss1(1.0, 1.0), spec, CellRule::Average);
  const GridMeasure q = discretize(gauss1(0.0, 1.0), spec, CellRule::Average);
  CHECK(fDivergenceGrid(FDivergenceSpec::kl(), q, q) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(std::abs(fDivergenceGrid(FDivergenceSpec::kl(), p, q) - 0.5) < 1e-3);

  // chi^2 between N(1,1) and N(0,1) is e - 1; squared Hellinger 2(1 - e^{-1/8}).
  CHECK(std::abs(fDivergenceGrid(FDivergenceSpec::chiSquared(), p, q) - (std::exp(1.0) - 1.0)) < 1e-3);
  CHECK(std::abs(fDivergenceGrid(FDivergenceSpec::totalVariationSquaredGenerator(), p, q) -
                 2.0 * (1.0 - std::exp(-0.125))) < 1e-3);
  CHECK(fDivergenceGaussian(FDivergenceSpec::chiSquared(), gauss1(1.0, 1.0), gauss1(0.0, 1.0)) ==
        doctest::Approx(std::exp(1.0) - 1.0));
  CHECK(hellingerSquaredGaussian(gauss1(1.0, 1.0), gauss1(0.0, 1.0)) ==
        doctest::Approx(2.0 * (1.0 - std::exp(-0.125))));

  const GridSpec small = uniformGrid(-1.0, 1.0, 8);
  Vector half = Vector::Zero(8);
  half.tail(4).setConstant(1.0);
  const GridMeasure halfSupport = normalize(small, half);
  const GridMeasure full = normalize(small, Vector::Ones(8));
  CHECK(std::isinf(fDivergenceGrid(FDivergenceSpec::kl(), full, halfSupport)));
  CHECK(std::isfinite(fDivergenceGrid(FDivergenceSpec::kl(), halfSupport, full)));
  CHECK(fDivergenceGrid(FDivergenceSpec::kl(), halfSupport, full) == doctest::Approx(std::log(2.0)));

  try {
    fDivergenceGrid(FDivergenceSpec::kl(), full, normalize(uniformGrid(-1.0, 1.0, 9), Vector::Ones(9)));
    FAIL("expected GridMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::GridMismatch);
  }
}

TEST_CASE("property: grid KL converges to the closed form at second order") {
  const GaussianMeasure a = gauss1(0.5, 0.8), b = gauss1(-0.2, 1.3);
  const double exact = klGaussian(a, b);
  double previous = 0.0;
  for (int cells : {100, 200, 400}) {
    const GridSpec spec = uniformGrid(-10.0, 10.0, cells);
    const double err = std::abs(fDivergenceGrid(FDivergenceSpec::kl(), discretize(a, spec, CellRule::Average),
                                                discretize(b, spec, CellRule::Average)) -
                                exact);
    if (previous > 0.0) CHECK(err < previous / 3.0);
    previous = err;
  }
  CHECK(previous < 1e-4);
}

TEST_CASE("generator validation") {
  CHECK_NOTHROW(FDivergenceSpec::kl().validate());
  CHECK_NOTHROW(FDivergenceSpec::chiSquared().validate());
  CHECK_THROWS_AS(FDivergenceSpec::custom([](double x) { return x * x; }, [](double x) { return 2 * x; },
                                          [](double) { return 2.0; }),
                  Error);
  CHECK_THROWS_AS(FDivergenceSpec::custom([](double x) { return -(x - 1) * (x - 1); },
                                          [](double x) { return -2 * (x - 1); }, [](double) { return -2.0; }),
                  Error);
  const FDivergenceSpec tv = FDivergenceSpec::custom([](double x) { return 0.5 * (x - 1) * (x - 1); },
                                                     [](double x) { return x - 1; }, [](double) { return 1.0; });
  CHECK_THROWS_AS(fDivergenceGaussian(tv, gauss1(0.0, 1.0), gauss1(1.0, 1.0)), Error);
}

TEST_CASE("Gaussian KL examples against quadrature") {
  CHECK(klGaussian(gauss1(0.7, 2.0), gauss1(0.7, 2.0)) == doctest::Approx(0.0));
  CHECK(klGaussian(gauss1(1.0, 1.0), gauss1(0.0, 1.0)) == doctest::Approx(0.5));
  CHECK(klGaussian(gauss1(0.0, 2.0), gauss1(0.0, 1.0)) == doctest::Approx(0.5 * (1.0 + std::log(0.5))));

  const struct {
    double m1, v1, m2, v2;
  } cases[] = {{1.0, 1.0, 0.0, 1.0}, {0.0, 2.0, 0.0, 1.0}, {0.3, 0.5, -1.0, 1.7}};
  for (const auto& c : cases) {
    const double quad = oracle::klQuadrature([&](double x) { return oracle::normalPdf(x, c.m1, c.v1); },
                                             [&](double x) { return oracle::normalPdf(x, c.m2, c.v2); }, -25.0, 25.0);
    CHECK(std::abs(klGaussian(gauss1(c.m1, c.v1), gauss1(c.m2, c.v2)) - quad) < 1e-8);
    CHECK(klGaussian(gauss1(c.m1, c.v1), gauss1(c.m2, c.v2)) ==
          doctest::Approx(oracle::gaussianKL_1d(c.m1, c.v1, c.m2, c.v2)).epsilon(1e-12));
  }
}

TEST_CASE("property: KL invariance and W2 contraction under linear maps") {
  CounterRng rng(206);
  for (int trial = 0; trial < 30; ++trial) {
    const Index d = 2 + trial % 2;
    const GaussianMeasure g1(oracle::gaussianMatrix(rng, d, 1), oracle::randomSpd(rng, d));
    const GaussianMeasure g2(oracle::gaussianMatrix(rng, d, 1), oracle::randomSpd(rng, d));
    const Matrix a = oracle::conditionedMatrix(rng, d, d, 0.3, 3.0);
    const Vector shift = oracle::gaussianMatrix(rng, d, 1);
    const GaussianMeasure h1 = pushforwardGaussian(a, shift, g1), h2 = pushforwardGaussian(a, shift, g2);
    CHECK(std::abs(klGaussian(h1, h2) - klGaussian(g1, g2)) < 1e-9 * std::max(1.0, klGaussian(g1, g2)));

    const Matrix b = oracle::gaussianMatrix(rng, 1 + trial % 3, d);
    const double norm = Eigen::JacobiSVD<Matrix>(b).singularValues()(0);
    const Vector zero = Vector::Zero(b.rows());
    const double imageW2 = wassersteinGaussian(b * g1.mean(), b * g1.cov() * b.transpose(), b * g2.mean(),
                                               b * g2.cov() * b.transpose());
    CHECK(imageW2 <= norm * wassersteinGaussian(g1, g2) + 1e-9);
  }
}

TEST_CASE("carrier dispatch") {
  const Measure a = gauss1(0.0, 1.0), b = gauss1(0.0, 4.0);
  CHECK(wassersteinDistance(a, b) == doctest::Approx(1.0));
  CHECK(fDivergence(FDivergenceSpec::kl(), a, b) == doctest::Approx(klGaussian(gauss1(0.0, 1.0), gauss1(0.0, 4.0))));
  const Measure particles = atoms1d({0.0, 1.0});
  CHECK_THROWS_AS(wassersteinDistance(a, particles), Error);
  CHECK_THROWS_AS(wassersteinDistance(a, b, 1.0), Error);
}
