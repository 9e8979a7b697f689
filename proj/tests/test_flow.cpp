#include <doctest.h>

#include "oracles.hpp"
#include "stochinv/error.hpp"
#include "stochinv/flow.hpp"

using namespace stochinv;

namespace {

GaussianMeasure gauss1(double mean, double var) {
  return GaussianMeasure(Vector::Constant(1, mean), Matrix::Constant(1, 1, var));
}

LinearForwardMap scalar(double a) { return LinearForwardMap(Matrix::Constant(1, 1, a)); }

double mean1(const ParticleMeasure& m) { return m.weights().dot(m.points().col(0)); }

// Atoms with weighted mean exactly `mean` and variance exactly `var`.
ParticleMeasure standardized(Index n, double mean, double var) {
  const ParticleMeasure s = stratifiedGaussianSample(gauss1(0.0, 1.0), n);
  Vector x = s.points().col(0);
  const double m = s.weights().dot(x);
  const double v = s.weights().dot((x.array() - m).square().matrix());
  x = ((x.array() - m) / std::sqrt(v) * std::sqrt(var) + mean).matrix();
  return ParticleMeasure(Matrix(x), s.weights());
}

GaussianMeasure correlatedTarget() {
  return GaussianMeasure((Vector(2) << 1.0, 2.0).finished(), (Matrix(2, 2) << 1.0, 0.5, 0.5, 1.0).finished());
}

LinearForwardMap tallMap() { return LinearForwardMap((Matrix(2, 1) << 1.0, 0.0).finished()); }

}  // namespace

TEST_CASE("Gaussian ODE examples") {
  FlowTrace still = gaussianFlowODE(gauss1(0.0, 1.0), scalar(1.0), gauss1(0.0, 1.0), 0.01, 1.0);
  for (double kl : still.klToTarget) CHECK(kl == doctest::Approx(0.0).epsilon(1e-14));

  const FlowTrace ou = gaussianFlowODE(gauss1(2.0, 1.0), scalar(1.0), gauss1(0.0, 1.0), 0.001, 2.0, 10);
  for (std::size_t i = 0; i < ou.times.size(); ++i) {
    const double expected = 2.0 * std::exp(-2.0 * ou.times[i]);
    CHECK(ou.klToTarget[i] == doctest::Approx(expected).epsilon(1e-6));
    CHECK(ou.klToTarget[i] == doctest::Approx(oracle::ouKL(2.0, 1.0, ou.times[i])).epsilon(1e-6));
  }
  CHECK(ou.decayFit.valid);
  CHECK(ou.decayFit.rate == doctest::Approx(-2.0).epsilon(1e-4));
  CHECK(ou.warnings.empty());

  const FlowTrace fast = gaussianFlowODE(gauss1(2.0, 1.0), scalar(2.0), gauss1(0.0, 1.0), 0.001, 1.0, 10);
  CHECK(fast.decayFit.rate == doctest::Approx(-8.0).epsilon(1e-4));

  const FlowTrace stiff = gaussianFlowODE(gauss1(2.0, 1.0), scalar(2.0), gauss1(0.0, 1.0), 0.1, 1.0);
  CHECK_FALSE(stiff.warnings.empty());
}

TEST_CASE("Gaussian ODE covariance relaxes toward the target") {
  // Variance ODE for B = 1, target N(0,1): dv/dt = 2 (1 - v), so v(t) = 1 + (v0 - 1) e^{-2t}.
  const FlowTrace trace = gaussianFlowODE(gauss1(0.0, 3.0), scalar(1.0), gauss1(0.0, 1.0), 0.001, 1.0, 100);
  const auto& last = std::get<GaussianMeasure>(trace.snapshots.back());
  CHECK(last.cov()(0, 0) == doctest::Approx(1.0 + 2.0 * std::exp(-2.0)).epsilon(1e-6));
  const double v = 1.0 + 2.0 * std::exp(-2.0);
  CHECK(trace.klToTarget.back() == doctest::Approx(oracle::gaussianKL_1d(0.0, v, 0.0, 1.0)).epsilon(1e-6));
}

TEST_CASE("runFlow bookkeeping") {
  FlowConfig cfg(scalar(1.0), gauss1(0.0, 1.0));
  cfg.scheme = FlowScheme::gaussianODE;
  cfg.tMax = 0.0;
  const FlowTrace empty = runFlow(gauss1(2.0, 1.0), cfg);
  CHECK(empty.snapshots.size() == 1);
  CHECK(empty.times.size() == 1);
  CHECK_FALSE(empty.decayFit.valid);

  cfg.tMax = 1.0;
  cfg.dt = 0.01;
  cfg.recordEvery = 7;
  const FlowTrace t = runFlow(gauss1(2.0, 1.0), cfg);
  CHECK(t.times.front() == 0.0);
  CHECK(t.times.back() == doctest::Approx(1.0));
  for (std::size_t i = 1; i < t.times.size(); ++i) CHECK(t.times[i] > t.times[i - 1]);
  for (double kl : t.klToTarget) CHECK(kl >= 0.0);

  cfg.tMax = 0.005;
  CHECK_THROWS_AS(runFlow(gauss1(2.0, 1.0), cfg), Error);
  cfg.tMax = 1.0;
  cfg.recordEvery = 0;
  CHECK_THROWS_AS(runFlow(gauss1(2.0, 1.0), cfg), Error);
  cfg.recordEvery = 1;
  CHECK_THROWS_AS(runFlow(ParticleMeasure::dirac(Vector::Zero(1)), cfg), Error);
}

TEST_CASE("decay fitting and certification") {
  std::vector<double> times, kl;
  for (int i = 0; i <= 20; ++i) {
    times.push_back(0.1 * i);
    kl.push_back(3.0 * std::exp(-1.5 * times.back()));
  }
  const DecayFit fit = fitDecay(times, kl);
  CHECK(fit.valid);
  CHECK(fit.rate == doctest::Approx(-1.5));
  CHECK(fit.r2 == doctest::Approx(1.0));
  CHECK_FALSE(fitDecay({0.0}, {1.0}).valid);

  FlowTrace trace;
  trace.times = times;
  trace.klToTarget = kl;
  CHECK(certifyDecay(trace, 1.5).satisfied);
  CHECK(certifyDecay(trace, 1.5).worstRatio == doctest::Approx(1.0));
  CHECK_FALSE(certifyDecay(trace, 2.0).satisfied);

  CHECK(certifiedDecayRate(scalar(1.0), gauss1(0.0, 1.0)) == doctest::Approx(2.0));
  CHECK(certifiedDecayRate(scalar(2.0), gauss1(0.0, 1.0)) == doctest::Approx(8.0));
  CHECK(certifiedDecayRate(scalar(1.0), gauss1(0.0, 4.0)) == doctest::Approx(0.5));
}

TEST_CASE("grid Fokker-Planck step invariants") {
  const GridSpec spec = uniformGrid(-8.0, 8.0, 256);
  const GridMeasure target = discretize(gauss1(0.0, 1.0), spec, CellRule::Average);
  const Matrix b = Matrix::Identity(1, 1);
  const double dt = cflLimit(spec, b);
  CHECK(dt == doctest::Approx(0.25 * spec.width(0) * spec.width(0)));

  const GridMeasure same = gridFokkerPlanckStep(target, b, target, dt);
  CHECK((same.density() - target.density()).cwiseAbs().maxCoeff() < 1e-12);

  CounterRng rng(501);
  Vector raw(256);
  for (Index i = 0; i < 256; ++i) raw(i) = 0.05 + rng.uniform();
  GridMeasure state = normalize(spec, raw);
  for (int k = 0; k < 50; ++k) {
    state = gridFokkerPlanckStep(state, b, target, dt);
    CHECK(std::abs(state.density().sum() * state.cellVolume() - 1.0) < 1e-12);
    CHECK((state.density().array() >= 0.0).all());
  }

  try {
    FlowConfig cfg(scalar(1.0), gauss1(0.0, 1.0));
    cfg.scheme = FlowScheme::gridFokkerPlanck;
    cfg.dt = 2.0 * dt;
    runFlow(target, cfg);
    FAIL("expected CFLViolation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CFLViolation);
  }
  CHECK_THROWS_AS(gridFokkerPlanckStep(target, b, discretize(gauss1(0.0, 1.0), uniformGrid(-8.0, 8.0, 128)), dt),
                  Error);
}

TEST_CASE("grid flow matches the Ornstein-Uhlenbeck oracle") {
  const GridSpec spec = uniformGrid(-8.0, 8.0, 512);
  FlowConfig cfg(scalar(1.0), gauss1(0.0, 1.0));
  cfg.scheme = FlowScheme::gridFokkerPlanck;
  cfg.dt = 0.00024;
  cfg.tMax = 1.0;
  cfg.recordEvery = 50;
  const FlowTrace trace = runFlow(discretize(gauss1(2.0, 1.0), spec, CellRule::Average), cfg);
  CHECK(trace.valid);
  CHECK(trace.coordinates == FlowCoordinates::data);
  CHECK(trace.decayFit.rate == doctest::Approx(-2.0).epsilon(0.1));
  for (std::size_t i = 0; i < trace.times.size(); ++i) {
    CHECK(std::abs(trace.klToTarget[i] - oracle::ouKL(2.0, 1.0, trace.times[i])) < 5e-3);
    if (i > 0) CHECK(trace.klToTarget[i] <= trace.klToTarget[i - 1] + 1e-3);
  }
  CHECK(certifyDecay(trace, 2.0).satisfied);
  CHECK(trace.w2ToTarget.size() == trace.times.size());
}

TEST_CASE("grid equilibrium is flat") {
  const GridSpec spec = uniformGrid(-8.0, 8.0, 128);
  const GridMeasure target = discretize(gauss1(0.0, 1.0), spec, CellRule::Average);
  CHECK(equilibriumFlatness(target, target) == doctest::Approx(0.0).epsilon(1e-12));

  FlowConfig cfg(scalar(1.0), gauss1(0.0, 1.0));
  cfg.scheme = FlowScheme::gridFokkerPlanck;
  cfg.dt = cflLimit(spec, Matrix::Identity(1, 1));
  cfg.tMax = 8.0;
  cfg.recordEvery = 100;
  const FlowTrace trace = runFlow(discretize(gauss1(2.0, 1.0), spec, CellRule::Average), cfg);
  CHECK(equilibriumFlatness(std::get<GridMeasure>(trace.snapshots.back()), target) < 0.02);
  CHECK(equilibriumFlatness(std::get<GridMeasure>(trace.snapshots.front()), target) > 0.5);
}

TEST_CASE("property: grid flow in data and reduced coordinates agree") {
  const double angle = 0.5;
  const Matrix rot = (Matrix(2, 2) << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle)).finished();
  const LinearForwardMap a(rot * (Matrix(2, 2) << 1.0, 0.0, 0.0, 0.7).finished());
  const GaussianMeasure target(Vector::Zero(2), Matrix::Identity(2, 2));
  const GaussianMeasure init((Vector(2) << 1.0, -0.5).finished(), Matrix::Identity(2, 2));

  const GridSpec spec = uniformGrid(Vector::Constant(2, -6.0), Vector::Constant(2, 6.0), 96);
  const double dt = std::min(cflLimit(spec, gridMobility(a, 2)), 0.004);
  auto run = [&](const GaussianMeasure& start) {
    FlowConfig cfg(a, target);
    cfg.scheme = FlowScheme::gridFokkerPlanck;
    cfg.dt = dt;
    cfg.tMax = 0.4;
    cfg.recordEvery = 25;
    return runFlow(discretize(start, spec, CellRule::Average), cfg);
  };
  const FlowTrace inY = run(init);
  CHECK(inY.coordinates == FlowCoordinates::data);

  // Same flow in z = U^T y with mobility diag(sigma^2), stepped by hand.
  const Matrix u = a.U();
  const Matrix reducedMobility = a.sigma().array().square().matrix().asDiagonal();
  const GridMeasure zTarget =
      discretize(GaussianMeasure(u.transpose() * target.mean(), u.transpose() * target.cov() * u), spec, CellRule::Average);
  GridMeasure z = discretize(GaussianMeasure(u.transpose() * init.mean(), u.transpose() * init.cov() * u), spec,
                             CellRule::Average);
  const int steps = static_cast<int>(std::ceil(0.4 / dt - 1e-9));
  std::vector<double> inZ{fDivergenceGrid(FDivergenceSpec::kl(), z, zTarget)};
  for (int k = 1; k <= steps; ++k) {
    z = gridFokkerPlanckStep(z, reducedMobility, zTarget, 0.4 / steps);
    if (k % 25 == 0 || k == steps) inZ.push_back(fDivergenceGrid(FDivergenceSpec::kl(), z, zTarget));
  }
  REQUIRE(inY.times.size() == inZ.size());
  for (std::size_t i = 0; i < inZ.size(); ++i) CHECK(std::abs(inY.klToTarget[i] - inZ[i]) < 1e-3);

  FlowConfig ode(a, target);
  ode.scheme = FlowScheme::gaussianODE;
  ode.dt = dt;
  ode.tMax = 0.4;
  ode.recordEvery = 25;
  const FlowTrace exact = runFlow(init, ode);
  REQUIRE(exact.times.size() == inY.times.size());
  for (std::size_t i = 0; i < inY.times.size(); ++i) CHECK(std::abs(inY.klToTarget[i] - exact.klToTarget[i]) < 1e-3);
}

TEST_CASE("property: certified envelope holds for Gaussian instances") {
  CounterRng rng(502);
  for (int trial = 0; trial < 10; ++trial) {
    const LinearForwardMap a(oracle::conditionedMatrix(rng, 2, 2, 0.5, 1.5));
    const GaussianMeasure target(oracle::gaussianMatrix(rng, 2, 1), oracle::randomSpd(rng, 2, 0.5));
    const GaussianMeasure init(oracle::gaussianMatrix(rng, 2, 1), oracle::randomSpd(rng, 2, 0.5));
    const FlowTrace trace = gaussianFlowODE(init, a, target, 0.002, 2.0, 5);
    CHECK(certifyDecay(trace, certifiedDecayRate(a, target)).satisfied);
    for (std::size_t i = 1; i < trace.times.size(); ++i) CHECK(trace.klToTarget[i] <= trace.klToTarget[i - 1] + 1e-12);
  }
  const LinearForwardMap id(Matrix::Identity(2, 2));
  const GaussianMeasure target(Vector::Zero(2), Matrix::Identity(2, 2));
  const FlowTrace t = gaussianFlowODE(GaussianMeasure((Vector(2) << 1.0, 2.0).finished(), Matrix::Identity(2, 2)), id,
                                      target, 0.001, 2.0, 10);
  CHECK(t.decayFit.rate <= -2.0 * (1.0 - 0.15));
}

TEST_CASE("particle velocity examples") {
  FlowConfig cfg(LinearForwardMap(Matrix::Identity(1, 1)), gauss1(0.0, 1.0));
  cfg.stateDensity = StateDensity::gaussianFit;
  cfg.dt = 0.01;
  const ParticleMeasure eq = standardized(500, 0.0, 1.0);
  const Matrix v = particleVelocity(eq, cfg);
  CHECK(v.cwiseAbs().maxCoeff() < 1e-6);
  const ParticleMeasure moved = particleFlowStep(eq, cfg);
  CHECK((moved.points() - eq.points()).cwiseAbs().maxCoeff() < 1e-6 * cfg.dt);

  // Lone atom at 2 under a kernel estimate: its own score vanishes and the target score is -2.
  cfg.stateDensity = StateDensity::kde;
  cfg.bandwidth = 0.5;
  const Matrix lone = particleVelocity(ParticleMeasure::dirac(Vector::Constant(1, 2.0)), cfg);
  CHECK(lone(0, 0) == doctest::Approx(-2.0));

  cfg.bandwidth.reset();
  try {
    particleVelocity(eq, cfg);
    FAIL("expected BandwidthRequired");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BandwidthRequired);
  }

  FlowConfig kdeTarget(LinearForwardMap(Matrix::Identity(1, 1)), eq);
  kdeTarget.bandwidth = 0.3;
  CHECK_THROWS_AS(particleVelocity(eq, kdeTarget), Error);
  kdeTarget.allowKdeTarget = true;
  CHECK(particleVelocity(eq, kdeTarget).allFinite());
}

TEST_CASE("particle flow mean follows the moment ODE") {
  FlowConfig cfg(LinearForwardMap(Matrix::Identity(1, 1)), gauss1(0.0, 1.0));
  cfg.stateDensity = StateDensity::gaussianFit;
  cfg.dt = 1e-3;
  ParticleMeasure state = stratifiedGaussianSample(gauss1(2.0, 1.0), 1000);
  double previous = mean1(state);
  const double m0 = previous;
  for (int k = 1; k <= 100; ++k) {
    state = particleFlowStep(state, cfg);
    const double m = mean1(state);
    CHECK(m < previous);
    previous = m;
  }
  // Moment-matched density: every atom moves at -mean when the fitted variance is one.
  CHECK(previous == doctest::Approx(oracle::ouMean(m0, 1.0, 0.1)).epsilon(2e-3));

  cfg.stateDensity = StateDensity::kde;
  cfg.bandwidth = 0.3;
  state = stratifiedGaussianSample(gauss1(2.0, 1.0), 1000);
  previous = mean1(state);
  for (int k = 1; k <= 100; ++k) {
    state = particleFlowStep(state, cfg);
    CHECK(mean1(state) < previous);
    previous = mean1(state);
  }
}

TEST_CASE("particle RK4 is closer to the oracle than Euler") {
  FlowConfig cfg(LinearForwardMap(Matrix::Identity(1, 1)), gauss1(0.0, 1.0));
  cfg.stateDensity = StateDensity::gaussianFit;
  cfg.dt = 0.1;
  cfg.tMax = 1.0;
  const ParticleMeasure init = standardized(200, 2.0, 1.0);
  const FlowTrace euler = runFlow(init, cfg);
  cfg.scheme = FlowScheme::particleRK4;
  const FlowTrace rk4 = runFlow(init, cfg);
  CHECK(euler.coordinates == FlowCoordinates::parameter);
  const double exact = oracle::ouMean(2.0, 1.0, 1.0);
  const double eErr = std::abs(mean1(std::get<ParticleMeasure>(euler.snapshots.back())) - exact);
  const double rErr = std::abs(mean1(std::get<ParticleMeasure>(rk4.snapshots.back())) - exact);
  CHECK(rErr < 1e-5);
  CHECK(rErr < eErr / 100.0);
  for (std::size_t i = 1; i < rk4.times.size(); ++i) CHECK(rk4.klToTarget[i] <= rk4.klToTarget[i - 1] + 1e-3);
}

TEST_CASE("particle flow through a nonlinear map") {
  SmoothForwardMap g;
  g.inputDim = g.outputDim = 1;
  g.evaluate = [](const Vector& u) -> Vector { return u.array().sinh(); };
  g.jacobian = [](const Vector& u) -> Matrix { return u.array().cosh().matrix().asDiagonal(); };
  FlowConfig cfg(g, gauss1(0.0, 1.0));
  cfg.stateDensity = StateDensity::gaussianFit;
  cfg.dt = 0.01;
  cfg.tMax = 2.0;
  cfg.recordEvery = 20;
  const FlowTrace trace = runFlow(stratifiedGaussianSample(gauss1(1.0, 0.2), 300), cfg);
  CHECK(trace.klToTarget.back() < 0.1 * trace.klToTarget.front());
  for (std::size_t i = 1; i < trace.times.size(); ++i) CHECK(trace.klToTarget[i] <= trace.klToTarget[i - 1] + 1e-3);
}

TEST_CASE("equilibrium classification") {
  // Uncorrelated target with zero off-subspace mean: both labels coincide.
  const GaussianMeasure plain((Vector(2) << 1.0, 0.0).finished(), Matrix::Identity(2, 2));
  FlowConfig cfg(tallMap(), plain);
  cfg.scheme = FlowScheme::gaussianODE;
  cfg.tMax = 3.0;
  cfg.dt = 0.01;
  const FlowTrace tie = runFlow(GaussianMeasure((Vector(2) << 3.0, 0.0).finished(), Matrix::Identity(2, 2)), cfg);
  const EquilibriumClassification c = classifyEquilibrium(tie, tallMap(), plain);
  CHECK(c.label == EquilibriumLabel::neither);
  CHECK(std::abs(c.distanceConditional - c.distanceMarginal) < 1e-6);

  const GaussianMeasure target = correlatedTarget();
  cfg = FlowConfig(tallMap(), target);
  cfg.scheme = FlowScheme::gaussianODE;
  cfg.tMax = 10.0;
  cfg.dt = 0.01;
  const FlowTrace kl = runFlow(GaussianMeasure((Vector(2) << 2.0, 0.0).finished(), Matrix::Identity(2, 2)), cfg);
  const EquilibriumClassification k = classifyEquilibrium(kl, tallMap(), target);
  CHECK(k.label == EquilibriumLabel::conditional);
  CHECK(k.distanceConditional < 1e-3);
  CHECK(k.distanceMarginal == doctest::Approx(oracle::gaussianW2_1d(0.0, 0.75, 1.0, 1.0)).epsilon(1e-3));
  CHECK(std::string(equilibriumLabelName(k.label)) == "conditional");
}

TEST_CASE("particle flows reach the conditional and the marginal") {
  const GaussianMeasure target = correlatedTarget();
  const ParticleMeasure init = stratifiedGaussianSample(gauss1(2.0, 1.0), 400);

  FlowConfig kl(tallMap(), target);
  kl.stateDensity = StateDensity::gaussianFit;
  kl.dt = 0.02;
  kl.tMax = 6.0;
  kl.recordEvery = 50;
  const EquilibriumClassification a = classifyEquilibrium(runFlow(init, kl), tallMap(), target);
  CHECK(a.label == EquilibriumLabel::conditional);
  CHECK(a.distanceConditional < 0.05);
  CHECK(a.distanceMarginal > 2.0 * a.distanceConditional);

  FlowConfig w2(tallMap(), target);
  w2.scheme = FlowScheme::particleW2;
  w2.dt = 0.05;
  w2.tMax = 6.0;
  w2.recordEvery = 20;
  const EquilibriumClassification b = classifyEquilibrium(runFlow(init, w2), tallMap(), target);
  CHECK(b.label == EquilibriumLabel::marginal);
  CHECK(b.distanceMarginal < 0.05);
  CHECK(b.distanceConditional > 2.0 * b.distanceMarginal);
}

TEST_CASE("W2 to Gaussian against the quantile oracle") {
  // Oracle: atom i carries the slab between the normal quantiles at i/n and (i+1)/n.
  const Index n = 200;
  const ParticleMeasure cloud = stratifiedGaussianSample(gauss1(0.0, 1.0), n);
  auto cdf = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
  auto quantile = [&](double t) {
    double lo = -12.0, hi = 12.0;
    for (int k = 0; k < 200; ++k) {
      const double mid = 0.5 * (lo + hi);
      if (cdf(mid) < t)
        lo = mid;
      else
        hi = mid;
    }
    return 0.5 * (lo + hi);
  };
  std::vector<double> atoms(cloud.points().data(), cloud.points().data() + n);
  std::sort(atoms.begin(), atoms.end());
  double cost = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double a = i == 0 ? -12.0 : quantile(static_cast<double>(i) / n);
    const double b = i == n - 1 ? 12.0 : quantile(static_cast<double>(i + 1) / n);
    cost += oracle::simpson([&](double x) { return (x - atoms[i]) * (x - atoms[i]) * oracle::normalPdf(x, 0.0, 1.0); },
                            a, b, 400);
  }
  CHECK(w2ToGaussian(cloud, gauss1(0.0, 1.0)) == doctest::Approx(std::sqrt(cost)).epsilon(1e-6));
  CHECK(w2ToGaussian(ParticleMeasure::dirac(Vector::Constant(1, 0.0)), gauss1(0.0, 1.0)) == doctest::Approx(1.0));
  CHECK(w2ToGaussian(ParticleMeasure::dirac(Vector::Constant(1, 3.0)), gauss1(0.0, 4.0)) ==
        doctest::Approx(std::sqrt(9.0 + 4.0)));
}
