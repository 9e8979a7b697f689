#include "stochinv/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "stochinv/error.hpp"

namespace stochinv {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kLogFloor = 1e-300;

int stepCount(double tMax, double dt) {
  if (tMax <= 0.0) return 0;
  return static_cast<int>(std::ceil(tMax / dt - 1e-9));
}

bool shouldRecord(int step, int steps, int recordEvery) { return step % recordEvery == 0 || step == steps; }

std::vector<double> sortedSnapshotTimes(const std::vector<double>& times) {
  std::vector<double> sorted = times;
  std::sort(sorted.begin(), sorted.end());
  return sorted;
}

// Moment-matched mean and covariance of a particle cloud.
std::pair<Vector, Matrix> moments(const ParticleMeasure& m) { return {m.mean(), m.covariance()}; }

std::pair<Vector, Matrix> moments(const GridMeasure& m) {
  const GridSpec& spec = m.spec();
  const Index d = spec.dim();
  const double volume = spec.cellVolume();
  Vector mean = Vector::Zero(d);
  Matrix second = Matrix::Zero(d, d);
  for (Index c = 0; c < m.cells(); ++c) {
    const double w = m.density()[c] * volume;
    if (w == 0.0) continue;
    const Vector x = spec.center(c);
    mean += w * x;
    second += w * x * x.transpose();
  }
  Matrix cov = second - mean * mean.transpose();
  // Within-cell spread of a piecewise-constant density.
  for (Index k = 0; k < d; ++k) cov(k, k) += spec.width(k) * spec.width(k) / 12.0;
  return {mean, 0.5 * (cov + cov.transpose())};
}

double klToGaussianFit(const ParticleMeasure& m, const GaussianMeasure& target) {
  const auto [mean, cov] = moments(m);
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success || Matrix(llt.matrixL()).diagonal().minCoeff() <= 1e-150) return kInf;
  return klGaussian(GaussianMeasure(mean, cov), target);
}

}  // namespace

const char* flowSchemeName(FlowScheme scheme) {
  switch (scheme) {
    case FlowScheme::particleEuler: return "particleEuler";
    case FlowScheme::particleRK4: return "particleRK4";
    case FlowScheme::gridFokkerPlanck: return "gridFokkerPlanck";
    case FlowScheme::gaussianODE: return "gaussianODE";
    case FlowScheme::particleW2: return "particleW2";
  }
  return "particleEuler";
}

const char* equilibriumLabelName(EquilibriumLabel label) {
  switch (label) {
    case EquilibriumLabel::conditional: return "conditional";
    case EquilibriumLabel::marginal: return "marginal";
    case EquilibriumLabel::neither: return "neither";
  }
  return "neither";
}

void FlowConfig::validate() const {
  require(std::isfinite(dt) && dt > 0.0, ErrorCode::InvalidArgument, "dt must be positive");
  require(std::isfinite(tMax) && tMax >= 0.0, ErrorCode::InvalidArgument, "tMax must be >= 0");
  require(tMax == 0.0 || tMax >= dt, ErrorCode::InvalidArgument, "tMax must be >= dt");
  require(recordEvery >= 1, ErrorCode::InvalidArgument, "recordEvery must be >= 1");
  if (bandwidth) {
    require(std::isfinite(*bandwidth) && *bandwidth > 0.0, ErrorCode::InvalidArgument, "bandwidth must be positive");
  }
  for (double t : snapshotTimes) {
    require(std::isfinite(t) && t >= 0.0, ErrorCode::InvalidArgument, "snapshot times must be >= 0");
  }
  divergence.validate();
  if (scheme == FlowScheme::gridFokkerPlanck || scheme == FlowScheme::gaussianODE ||
      scheme == FlowScheme::particleW2) {
    require(std::holds_alternative<LinearForwardMap>(map), ErrorCode::InvalidArgument,
            std::string(flowSchemeName(scheme)) + " needs a linear map");
  }
  if (const auto* s = std::get_if<SmoothForwardMap>(&map)) s->validate();
}

DecayFit fitDecay(const std::vector<double>& times, const std::vector<double>& kl) {
  require(times.size() == kl.size(), ErrorCode::ShapeError, "times and KL values differ in length");
  DecayFit fit;
  const std::size_t start = times.size() / 2;
  std::vector<double> t;
  std::vector<double> y;
  for (std::size_t i = start; i < times.size(); ++i) {
    if (kl[i] > 0.0 && std::isfinite(kl[i])) {
      t.push_back(times[i]);
      y.push_back(std::log(kl[i]));
    }
  }
  if (t.size() < 2) return fit;
  const double n = static_cast<double>(t.size());
  const double tMean = std::accumulate(t.begin(), t.end(), 0.0) / n;
  const double yMean = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double stt = 0.0;
  double sty = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    stt += (t[i] - tMean) * (t[i] - tMean);
    sty += (t[i] - tMean) * (y[i] - yMean);
    syy += (y[i] - yMean) * (y[i] - yMean);
  }
  if (stt <= 0.0) return fit;
  fit.rate = sty / stt;
  const double intercept = yMean - fit.rate * tMean;
  double ssRes = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = y[i] - (intercept + fit.rate * t[i]);
    ssRes += r * r;
  }
  fit.r2 = syy > 0.0 ? 1.0 - ssRes / syy : 1.0;
  fit.valid = true;
  return fit;
}

Matrix gridMobility(const LinearForwardMap& map, Index gridDim) {
  if (gridDim == map.outputDim()) return mobilityMatrix(map);
  require(gridDim == map.rank(), ErrorCode::DimensionMismatch,
          "grid dimension " + std::to_string(gridDim) + " matches neither the data dimension nor rank(A)");
  return map.sigma().head(map.rank()).array().square().matrix().asDiagonal();
}

double cflLimit(const GridSpec& spec, const Matrix& mobility) {
  double hMin = kInf;
  for (Index k = 0; k < spec.dim(); ++k) hMin = std::min(hMin, spec.width(k));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (mobility + mobility.transpose()), Eigen::EigenvaluesOnly);
  const double norm = eig.eigenvalues().cwiseAbs().maxCoeff();
  return norm > 0.0 ? 0.25 * hMin * hMin / norm : kInf;
}

GridMeasure gridFokkerPlanckStep(const GridMeasure& state, const Matrix& mobility, const GridMeasure& target,
                                 double dt, double* clampedMass) {
  require(state.spec() == target.spec(), ErrorCode::GridMismatch, "state and target grids differ");
  const GridSpec& spec = state.spec();
  const Index d = spec.dim();
  require(mobility.rows() == d && mobility.cols() == d, ErrorCode::DimensionMismatch,
          "mobility must be d x d for the grid dimension");
  require(std::isfinite(dt) && dt > 0.0, ErrorCode::InvalidArgument, "dt must be positive");
  const double limit = cflLimit(spec, mobility);
  require(dt <= limit * (1.0 + 1e-12), ErrorCode::CFLViolation,
          "dt = " + std::to_string(dt) + " exceeds the CFL limit " + std::to_string(limit));

  const Index cells = state.cells();
  const Vector& rho = state.density();
  Vector phi(cells);
  for (Index c = 0; c < cells; ++c) {
    if (rho[c] <= 0.0) {
      phi[c] = 0.0;
      continue;
    }
    require(target.density()[c] > 0.0, ErrorCode::SupportMismatch,
            "target vanishes at cell " + std::to_string(c) + " where the state is positive");
    phi[c] = std::log(std::max(rho[c], kLogFloor)) - std::log(std::max(target.density()[c], kLogFloor));
  }

  std::vector<Index> strides(static_cast<std::size_t>(d));
  for (Index k = 0; k < d; ++k) strides[k] = spec.stride(k);
  auto coord = [&](Index c, Index k) { return (c / strides[k]) % spec.shape[k]; };

  bool crossTerms = false;
  for (Index k = 0; k < d && !crossTerms; ++k) {
    for (Index l = 0; l < d; ++l) {
      if (l != k && mobility(k, l) != 0.0) crossTerms = true;
    }
  }
  // Cell-centered gradients of phi, falling back to one-sided differences
  // next to the boundary or to empty cells.
  Matrix grad;
  if (crossTerms) {
    grad = Matrix::Zero(cells, d);
    for (Index c = 0; c < cells; ++c) {
      if (rho[c] <= 0.0) continue;
      for (Index l = 0; l < d; ++l) {
        const Index i = coord(c, l);
        const bool hasPlus = i + 1 < spec.shape[l] && rho[c + strides[l]] > 0.0;
        const bool hasMinus = i > 0 && rho[c - strides[l]] > 0.0;
        const double h = spec.width(l);
        if (hasPlus && hasMinus) {
          grad(c, l) = (phi[c + strides[l]] - phi[c - strides[l]]) / (2.0 * h);
        } else if (hasPlus) {
          grad(c, l) = (phi[c + strides[l]] - phi[c]) / h;
        } else if (hasMinus) {
          grad(c, l) = (phi[c] - phi[c - strides[l]]) / h;
        }
      }
    }
  }

  Vector next = rho;
  for (Index c = 0; c < cells; ++c) {
    for (Index k = 0; k < d; ++k) {
      if (coord(c, k) + 1 >= spec.shape[k]) continue;
      const Index j = c + strides[k];
      const double a = rho[c];
      const double b = rho[j];
      if (a <= 0.0 || b <= 0.0) continue;
      const double face = 2.0 * a * b / (a + b);
      const double h = spec.width(k);
      double drive = mobility(k, k) * (phi[j] - phi[c]) / h;
      if (crossTerms) {
        for (Index l = 0; l < d; ++l) {
          if (l != k) drive += mobility(k, l) * 0.5 * (grad(c, l) + grad(j, l));
        }
      }
      const double transfer = -dt / h * face * drive;
      next[c] -= transfer;
      next[j] += transfer;
    }
  }

  double clamped = 0.0;
  for (Index c = 0; c < cells; ++c) {
    if (next[c] < 0.0) {
      clamped -= next[c] * spec.cellVolume();
      next[c] = 0.0;
    }
  }
  if (clampedMass) *clampedMass += clamped;
  if (clamped > 0.0) return normalize(spec, std::move(next));
  return GridMeasure(spec, std::move(next));
}

GridMeasure gridFokkerPlanckStep(const GridMeasure& state, const LinearForwardMap& map, const GridMeasure& target,
                                 double dt, double* clampedMass) {
  return gridFokkerPlanckStep(state, gridMobility(map, state.dim()), target, dt, clampedMass);
}

namespace {

// Reduced (z = U^T y) view of a Gaussian over y. Inputs already of the
// reduced dimension pass through when rank(A) < n.
GaussianMeasure reduceState(const GaussianMeasure& g, const LinearForwardMap& map) {
  const Matrix basis = map.columnSpaceBasis();
  if (g.dim() == map.rank() && map.rank() < map.outputDim()) return g;
  require(g.dim() == map.outputDim(), ErrorCode::DimensionMismatch, "gaussian must live in data or reduced space");
  return gaussianMarginalOnSubspace(g, basis);
}

GaussianMeasure reduceTarget(const GaussianMeasure& g, const LinearForwardMap& map) {
  const Matrix basis = map.columnSpaceBasis();
  if (g.dim() == map.rank() && map.rank() < map.outputDim()) return g;
  require(g.dim() == map.outputDim(), ErrorCode::DimensionMismatch, "target must live in data or reduced space");
  return gaussianConditionalOnSubspace(g, basis);
}

}  // namespace

FlowTrace gaussianFlowODE(const GaussianMeasure& init, const LinearForwardMap& map, const GaussianMeasure& target,
                          double dt, double tMax, int recordEvery) {
  require(std::isfinite(dt) && dt > 0.0, ErrorCode::InvalidArgument, "dt must be positive");
  require(std::isfinite(tMax) && tMax >= 0.0, ErrorCode::InvalidArgument, "tMax must be >= 0");
  require(recordEvery >= 1, ErrorCode::InvalidArgument, "recordEvery must be >= 1");
  const GaussianMeasure z0 = reduceState(init, map);
  const GaussianMeasure zTarget = reduceTarget(target, map);
  const Vector sigma2 = map.sigma().head(map.rank()).array().square();
  const Matrix mobility = sigma2.asDiagonal();
  const Matrix& precision = zTarget.precision();
  const Vector& targetMean = zTarget.mean();

  const int steps = stepCount(tMax, dt);
  const double h = steps > 0 ? tMax / steps : 0.0;

  FlowTrace trace;
  trace.coordinates = FlowCoordinates::reduced;
  {
    const Vector root = sigma2.cwiseSqrt();
    const Matrix sym = root.asDiagonal() * precision * root.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (sym + sym.transpose()), Eigen::EigenvaluesOnly);
    const double fastest = 2.0 * eig.eigenvalues().maxCoeff();
    if (h * fastest > 0.1) {
      trace.warnings.push_back("StiffnessWarning: dt * largest rate = " + std::to_string(h * fastest) + " > 0.1");
    }
  }

  const Matrix drift = mobility * precision;
  auto meanRate = [&](const Vector& m) -> Vector { return -drift * (m - targetMean); };
  auto covRate = [&](const Matrix& s) -> Matrix {
    return -drift * s - s * drift.transpose() + 2.0 * mobility;
  };

  Vector m = z0.mean();
  Matrix s = z0.cov();
  auto record = [&](double t) {
    const GaussianMeasure state(m, 0.5 * (s + s.transpose()));
    trace.times.push_back(t);
    trace.klToTarget.push_back(klGaussian(state, zTarget));
    trace.w2ToTarget.push_back(wassersteinGaussian(state, zTarget));
    trace.snapshotTimes.push_back(t);
    trace.snapshots.emplace_back(state);
  };
  record(0.0);
  for (int step = 1; step <= steps; ++step) {
    const Vector km1 = meanRate(m);
    const Matrix ks1 = covRate(s);
    const Vector km2 = meanRate(m + 0.5 * h * km1);
    const Matrix ks2 = covRate(s + 0.5 * h * ks1);
    const Vector km3 = meanRate(m + 0.5 * h * km2);
    const Matrix ks3 = covRate(s + 0.5 * h * ks2);
    const Vector km4 = meanRate(m + h * km3);
    const Matrix ks4 = covRate(s + h * ks3);
    m += h / 6.0 * (km1 + 2.0 * km2 + 2.0 * km3 + km4);
    s += h / 6.0 * (ks1 + 2.0 * ks2 + 2.0 * ks3 + ks4);
    s = 0.5 * (s + s.transpose());
    if (shouldRecord(step, steps, recordEvery)) record(step * h);
  }
  trace.decayFit = fitDecay(trace.times, trace.klToTarget);
  return trace;
}

namespace {

// Everything a particle flow needs, resolved once per run.
struct ParticleContext {
  bool reduced = false;
  Matrix reducedJacobian;  // U^T A when reduced
  Matrix basis;            // U when reduced
  const SmoothForwardMap* smooth = nullptr;
  std::optional<GaussianMeasure> gaussianTarget;  // in the flow coordinates
  std::optional<ParticleMeasure> particleTarget;  // in data coordinates
  Vector targetBandwidths;
  Index flowDim = 0;

  Vector forward(const Vector& u) const { return reduced ? Vector(reducedJacobian * u) : smooth->evaluate(u); }
  Matrix jacobian(const Vector& u) const { return reduced ? reducedJacobian : smooth->jacobian(u); }

  double targetLogDensity(const Vector& x) const {
    if (gaussianTarget) return gaussianTarget->logDensity(x);
    const Vector y = reduced ? Vector(basis * x) : x;
    return kdeLogDensity(*particleTarget, y, targetBandwidths);
  }
  Vector targetScore(const Vector& x) const {
    if (gaussianTarget) return gaussianTarget->score(x);
    const Vector y = reduced ? Vector(basis * x) : x;
    const Vector g = kdeScore(*particleTarget, y, targetBandwidths);
    return reduced ? Vector(basis.transpose() * g) : g;
  }
};

ParticleContext makeContext(const FlowConfig& cfg) {
  ParticleContext ctx;
  if (const auto* linear = std::get_if<LinearForwardMap>(&cfg.map)) {
    ctx.reduced = true;
    ctx.basis = linear->columnSpaceBasis();
    ctx.reducedJacobian = ctx.basis.transpose() * linear->matrix();
    ctx.flowDim = linear->rank();
    if (const auto* g = std::get_if<GaussianMeasure>(&cfg.target)) {
      ctx.gaussianTarget = cfg.scheme == FlowScheme::particleW2 ? gaussianMarginalOnSubspace(*g, ctx.basis)
                                                                : reduceTarget(*g, *linear);
    }
  } else {
    ctx.smooth = &std::get<SmoothForwardMap>(cfg.map);
    ctx.flowDim = ctx.smooth->outputDim;
    if (const auto* g = std::get_if<GaussianMeasure>(&cfg.target)) {
      require(g->dim() == ctx.flowDim, ErrorCode::DimensionMismatch, "target dimension must match map output");
      ctx.gaussianTarget = *g;
    }
  }
  if (const auto* p = std::get_if<ParticleMeasure>(&cfg.target)) {
    require(cfg.allowKdeTarget || cfg.scheme == FlowScheme::particleW2, ErrorCode::InvalidArgument,
            "particle targets need allowKdeTarget: both densities would be kernel estimates");
    require(p->dim() == outputDim(cfg.map), ErrorCode::DimensionMismatch, "target dimension must match map output");
    ctx.particleTarget = *p;
    if (cfg.scheme != FlowScheme::particleW2) {
      require(cfg.bandwidth.has_value(), ErrorCode::BandwidthRequired, "KDE of the target needs a bandwidth");
      ctx.targetBandwidths = Vector::Constant(p->dim(), *cfg.bandwidth);
    }
  }
  require(!std::holds_alternative<GridMeasure>(cfg.target), ErrorCode::UnsupportedCarrier,
          "particle flows take gaussian or particle targets");
  return ctx;
}

ParticleMeasure pushState(const ParticleContext& ctx, const ParticleMeasure& state) {
  Matrix out(state.size(), ctx.flowDim);
  for (Index i = 0; i < state.size(); ++i) out.row(i) = ctx.forward(state.point(i)).transpose();
  return ParticleMeasure(std::move(out), state.weights());
}

Matrix fVelocity(const ParticleContext& ctx, const ParticleMeasure& state, const FlowConfig& cfg) {
  require(state.dim() == inputDim(cfg.map), ErrorCode::DimensionMismatch, "particles must live in parameter space");
  const ParticleMeasure pushed = pushState(ctx, state);
  const Index k = pushed.dim();

  std::optional<GaussianMeasure> fit;
  Vector bandwidths;
  if (cfg.stateDensity == StateDensity::gaussianFit) {
    const auto [mean, cov] = moments(pushed);
    fit.emplace(mean, cov);
  } else {
    require(cfg.bandwidth.has_value(), ErrorCode::BandwidthRequired,
            "the pushed state has no analytic density; set a KDE bandwidth or use gaussianFit");
    bandwidths = Vector::Constant(k, *cfg.bandwidth);
  }
  const bool isKl = cfg.divergence.kind == FDivergenceKind::KL;

  Matrix velocity(state.size(), state.dim());
  for (Index i = 0; i < state.size(); ++i) {
    const Vector x = pushed.point(i);
    const Vector stateScore = fit ? fit->score(x) : kdeScore(pushed, x, bandwidths);
    double factor = 1.0;
    if (!isKl) {
      const double logState = fit ? fit->logDensity(x) : kdeLogDensity(pushed, x, bandwidths);
      const double r = std::exp(logState - ctx.targetLogDensity(x));
      factor = cfg.divergence.fDoublePrime(r) * r;
    }
    const Vector v = -factor * (ctx.jacobian(state.point(i)).transpose() * (stateScore - ctx.targetScore(x)));
    require(v.allFinite(), ErrorCode::NonFiniteVelocity, "velocity of atom " + std::to_string(i) + " is not finite");
    velocity.row(i) = v.transpose();
  }
  return velocity;
}

// Targets of the W2 objective flow: the target projected to Col(A)
// coordinates, one atom per particle.
ParticleMeasure w2Targets(const ParticleContext& ctx, const FlowConfig& cfg, Index n) {
  if (const auto* g = std::get_if<GaussianMeasure>(&cfg.target)) {
    const ParticleMeasure samples = stratifiedGaussianSample(*g, n);
    return ParticleMeasure(samples.points() * ctx.basis, samples.weights());
  }
  const auto& p = *ctx.particleTarget;
  return ParticleMeasure(p.points() * ctx.basis, p.weights());
}

Matrix w2Velocity(const ParticleContext& ctx, const ParticleMeasure& state, const ParticleMeasure& targets) {
  const ParticleMeasure pushed = pushState(ctx, state);
  const Index n = pushed.size();
  Matrix mapped(n, pushed.dim());
  const bool uniformPair = targets.size() == n && pushed.dim() == 1 &&
                           (pushed.weights().array() == pushed.weights()[0]).all() &&
                           (targets.weights().array() == targets.weights()[0]).all();
  if (uniformPair) {
    std::vector<Index> a(static_cast<std::size_t>(n));
    std::vector<Index> b(static_cast<std::size_t>(n));
    std::iota(a.begin(), a.end(), Index{0});
    std::iota(b.begin(), b.end(), Index{0});
    std::stable_sort(a.begin(), a.end(), [&](Index i, Index j) { return pushed.points()(i, 0) < pushed.points()(j, 0); });
    std::stable_sort(b.begin(), b.end(), [&](Index i, Index j) { return targets.points()(i, 0) < targets.points()(j, 0); });
    for (Index r = 0; r < n; ++r) mapped(a[r], 0) = targets.points()(b[r], 0);
  } else {
    const TransportResult ot = wassersteinExact(pushed, targets, 2.0);
    for (Index i = 0; i < n; ++i) {
      mapped.row(i) = (ot.coupling.plan.row(i) * targets.points()) / pushed.weights()[i];
    }
  }
  Matrix velocity(n, state.dim());
  for (Index i = 0; i < n; ++i) {
    const Vector residual = (pushed.point(i) - mapped.row(i).transpose());
    velocity.row(i) = (-2.0 * ctx.reducedJacobian.transpose() * residual).transpose();
  }
  require(velocity.allFinite(), ErrorCode::NonFiniteVelocity, "W2 flow velocity is not finite");
  return velocity;
}

ParticleMeasure advance(const ParticleMeasure& state, const Matrix& velocity, double h) {
  return ParticleMeasure(state.points() + h * velocity, state.weights());
}

}  // namespace

Matrix particleVelocity(const ParticleMeasure& state, const FlowConfig& cfg) {
  const ParticleContext ctx = makeContext(cfg);
  return fVelocity(ctx, state, cfg);
}

ParticleMeasure particleFlowStep(const ParticleMeasure& state, const FlowConfig& cfg) {
  cfg.validate();
  const ParticleContext ctx = makeContext(cfg);
  if (cfg.scheme == FlowScheme::particleW2) {
    return advance(state, w2Velocity(ctx, state, w2Targets(ctx, cfg, state.size())), cfg.dt);
  }
  const Matrix k1 = fVelocity(ctx, state, cfg);
  if (cfg.scheme != FlowScheme::particleRK4) return advance(state, k1, cfg.dt);
  const double h = cfg.dt;
  const Matrix k2 = fVelocity(ctx, advance(state, k1, 0.5 * h), cfg);
  const Matrix k3 = fVelocity(ctx, advance(state, k2, 0.5 * h), cfg);
  const Matrix k4 = fVelocity(ctx, advance(state, k3, h), cfg);
  return advance(state, (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0, h);
}

namespace {

FlowTrace runParticles(const ParticleMeasure& init, const FlowConfig& cfg) {
  const ParticleContext ctx = makeContext(cfg);
  require(init.dim() == inputDim(cfg.map), ErrorCode::DimensionMismatch, "particles must live in parameter space");
  const int steps = stepCount(cfg.tMax, cfg.dt);
  const double h = steps > 0 ? cfg.tMax / steps : 0.0;
  const bool w2 = cfg.scheme == FlowScheme::particleW2;
  std::optional<ParticleMeasure> targets;
  if (w2) targets = w2Targets(ctx, cfg, init.size());

  FlowTrace trace;
  trace.coordinates = FlowCoordinates::parameter;
  std::vector<double> pending = sortedSnapshotTimes(cfg.snapshotTimes);
  std::size_t nextSnapshot = 0;

  auto diagnostics = [&](const ParticleMeasure& state, double t) {
    const ParticleMeasure pushed = pushState(ctx, state);
    trace.times.push_back(t);
    if (ctx.gaussianTarget) {
      trace.klToTarget.push_back(klToGaussianFit(pushed, *ctx.gaussianTarget));
      trace.w2ToTarget.push_back(w2ToGaussian(pushed, *ctx.gaussianTarget));
    } else {
      // Resubstitution estimate with the target bandwidth.
      const Vector hState = cfg.bandwidth ? Vector::Constant(pushed.dim(), *cfg.bandwidth) : silvermanBandwidth(pushed);
      double kl = 0.0;
      for (Index i = 0; i < pushed.size(); ++i) {
        const Vector x = pushed.point(i);
        kl += pushed.weights()[i] * (kdeLogDensity(pushed, x, hState) - ctx.targetLogDensity(x));
      }
      trace.klToTarget.push_back(std::max(0.0, kl));
    }
  };
  auto snapshotIfDue = [&](const ParticleMeasure& state, double t, bool force) {
    bool due = force;
    while (nextSnapshot < pending.size() && pending[nextSnapshot] <= t + 1e-12) {
      due = true;
      ++nextSnapshot;
    }
    if (due) {
      trace.snapshotTimes.push_back(t);
      trace.snapshots.emplace_back(state);
    }
  };

  FlowConfig stepCfg = cfg;
  stepCfg.dt = h;
  ParticleMeasure state = init;
  diagnostics(state, 0.0);
  snapshotIfDue(state, 0.0, true);
  for (int step = 1; step <= steps; ++step) {
    if (w2) {
      state = advance(state, w2Velocity(ctx, state, *targets), h);
    } else {
      const Matrix k1 = fVelocity(ctx, state, stepCfg);
      if (cfg.scheme == FlowScheme::particleRK4) {
        const Matrix k2 = fVelocity(ctx, advance(state, k1, 0.5 * h), stepCfg);
        const Matrix k3 = fVelocity(ctx, advance(state, k2, 0.5 * h), stepCfg);
        const Matrix k4 = fVelocity(ctx, advance(state, k3, h), stepCfg);
        state = advance(state, (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0, h);
      } else {
        state = advance(state, k1, h);
      }
    }
    const double t = step * h;
    if (shouldRecord(step, steps, cfg.recordEvery)) diagnostics(state, t);
    snapshotIfDue(state, t, step == steps);
  }
  if (trace.w2ToTarget.size() != trace.times.size()) trace.w2ToTarget.clear();
  trace.decayFit = fitDecay(trace.times, trace.klToTarget);
  return trace;
}

FlowTrace runGrid(const GridMeasure& init, const FlowConfig& cfg) {
  const auto& map = std::get<LinearForwardMap>(cfg.map);
  const Index d = init.dim();
  const Matrix mobility = gridMobility(map, d);
  const GridMeasure target = gridFlowTarget(map, cfg.target, init.spec());
  const double limit = cflLimit(init.spec(), mobility);
  require(cfg.dt <= limit * (1.0 + 1e-12), ErrorCode::CFLViolation,
          "dt = " + std::to_string(cfg.dt) + " exceeds the CFL limit " + std::to_string(limit));

  const int steps = stepCount(cfg.tMax, cfg.dt);
  const double h = steps > 0 ? cfg.tMax / steps : 0.0;
  const FDivergenceSpec kl = FDivergenceSpec::kl();
  const bool oneDim = d == 1;

  FlowTrace trace;
  trace.coordinates = d == map.outputDim() ? FlowCoordinates::data : FlowCoordinates::reduced;
  std::vector<double> pending = sortedSnapshotTimes(cfg.snapshotTimes);
  std::size_t nextSnapshot = 0;
  auto record = [&](const GridMeasure& state, double t) {
    trace.times.push_back(t);
    trace.klToTarget.push_back(fDivergenceGrid(kl, state, target));
    if (oneDim) trace.w2ToTarget.push_back(wasserstein1D(state, target, 2.0));
  };
  auto snapshotIfDue = [&](const GridMeasure& state, double t, bool force) {
    bool due = force;
    while (nextSnapshot < pending.size() && pending[nextSnapshot] <= t + 1e-12) {
      due = true;
      ++nextSnapshot;
    }
    if (due) {
      trace.snapshotTimes.push_back(t);
      trace.snapshots.emplace_back(state);
    }
  };

  GridMeasure state = init;
  record(state, 0.0);
  snapshotIfDue(state, 0.0, true);
  for (int step = 1; step <= steps; ++step) {
    state = gridFokkerPlanckStep(state, mobility, target, h, &trace.clampedMass);
    const double t = step * h;
    if (shouldRecord(step, steps, cfg.recordEvery)) record(state, t);
    snapshotIfDue(state, t, step == steps);
  }
  trace.valid = trace.clampedMass < 1e-6;
  trace.decayFit = fitDecay(trace.times, trace.klToTarget);
  return trace;
}

}  // namespace

GridMeasure gridFlowTarget(const LinearForwardMap& map, const Measure& target, const GridSpec& spec) {
  if (const auto* g = std::get_if<GridMeasure>(&target)) {
    require(g->spec() == spec, ErrorCode::GridMismatch, "target grid must equal the state grid");
    return *g;
  }
  if (const auto* g = std::get_if<GaussianMeasure>(&target)) {
    const GaussianMeasure inGrid = spec.dim() == map.outputDim() ? *g : reduceTarget(*g, map);
    require(inGrid.dim() == spec.dim(), ErrorCode::DimensionMismatch, "target and grid dimensions differ");
    return discretize(inGrid, spec, CellRule::Average);
  }
  fail(ErrorCode::UnsupportedCarrier, "grid flows take grid or gaussian targets");
}

FlowTrace runFlow(const Measure& init, const FlowConfig& cfg) {
  cfg.validate();
  switch (cfg.scheme) {
    case FlowScheme::gaussianODE: {
      const auto* g = std::get_if<GaussianMeasure>(&init);
      const auto* target = std::get_if<GaussianMeasure>(&cfg.target);
      require(g && target, ErrorCode::UnsupportedCarrier, "gaussianODE needs gaussian init and target");
      FlowTrace trace = gaussianFlowODE(*g, std::get<LinearForwardMap>(cfg.map), *target, cfg.dt, cfg.tMax,
                                        cfg.recordEvery);
      return trace;
    }
    case FlowScheme::gridFokkerPlanck: {
      const auto* g = std::get_if<GridMeasure>(&init);
      require(g != nullptr, ErrorCode::UnsupportedCarrier, "gridFokkerPlanck needs a grid init");
      return runGrid(*g, cfg);
    }
    case FlowScheme::particleEuler:
    case FlowScheme::particleRK4:
    case FlowScheme::particleW2: {
      const auto* p = std::get_if<ParticleMeasure>(&init);
      require(p != nullptr, ErrorCode::UnsupportedCarrier, "particle schemes need a particle init");
      return runParticles(*p, cfg);
    }
  }
  fail(ErrorCode::InvalidArgument, "unknown flow scheme");
}

double w2ToGaussian(const ParticleMeasure& m, const GaussianMeasure& g) {
  require(m.dim() == g.dim(), ErrorCode::DimensionMismatch, "particles and gaussian dimensions differ");
  if (m.dim() > 1) {
    const auto [mean, cov] = moments(m);
    return wassersteinGaussian(mean, cov, g.mean(), g.cov());
  }
  const double mu = g.mean()[0];
  const double sd = std::sqrt(g.cov()(0, 0));
  std::vector<Index> order(static_cast<std::size_t>(m.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return m.points()(a, 0) < m.points()(b, 0); });
  const double invRoot2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  // For s = Phi^{-1}(t): phi(s), and Phi(s) - s phi(s), the antiderivative of s^2 phi(s).
  auto pdfAt = [&](double t) {
    if (t <= 0.0 || t >= 1.0) return 0.0;
    const double s = standardNormalQuantile(t);
    return invRoot2Pi * std::exp(-0.5 * s * s);
  };
  auto secondAt = [&](double t) {
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    const double s = standardNormalQuantile(t);
    return t - s * invRoot2Pi * std::exp(-0.5 * s * s);
  };
  double total = 0.0;
  double lo = 0.0;
  for (Index idx : order) {
    const double hi = std::min(1.0, lo + m.weights()[idx]);
    const double x = m.points()(idx, 0) - mu;
    const double first = pdfAt(lo) - pdfAt(hi);
    const double second = secondAt(hi) - secondAt(lo);
    total += x * x * (hi - lo) - 2.0 * x * sd * first + sd * sd * second;
    lo = hi;
  }
  return std::sqrt(std::max(0.0, total));
}

double w2ToGaussian(const GridMeasure& m, const GaussianMeasure& g) {
  require(m.dim() == g.dim(), ErrorCode::DimensionMismatch, "grid and gaussian dimensions differ");
  if (m.dim() == 1) return wasserstein1D(m, discretize(g, m.spec(), CellRule::Average), 2.0);
  const auto [mean, cov] = moments(m);
  return wassersteinGaussian(mean, cov, g.mean(), g.cov());
}

EquilibriumClassification classifyEquilibrium(const FlowTrace& trace, const LinearForwardMap& map,
                                              const GaussianMeasure& target) {
  require(!trace.snapshots.empty(), ErrorCode::InvalidArgument, "trace has no snapshot");
  require(target.dim() == map.outputDim(), ErrorCode::DimensionMismatch, "target must live in data space");
  const Matrix basis = map.columnSpaceBasis();
  GaussianMeasure conditional = gaussianConditionalOnSubspace(target, basis);
  GaussianMeasure marginal = gaussianMarginalOnSubspace(target, basis);
  Measure last = trace.snapshots.back();

  if (trace.coordinates == FlowCoordinates::parameter) {
    const auto* p = std::get_if<ParticleMeasure>(&last);
    require(p != nullptr, ErrorCode::UnsupportedCarrier, "parameter snapshots must be particles");
    last = ParticleMeasure(p->points() * (basis.transpose() * map.matrix()).transpose(), p->weights());
  } else if (trace.coordinates == FlowCoordinates::data) {
    require(map.rank() == map.outputDim(), ErrorCode::UnsupportedCarrier,
            "data-coordinate snapshots need Col(A) to be the whole data space");
    conditional = GaussianMeasure(basis * conditional.mean(), basis * conditional.cov() * basis.transpose());
    marginal = GaussianMeasure(basis * marginal.mean(), basis * marginal.cov() * basis.transpose());
  }

  auto distance = [&](const GaussianMeasure& oracle) {
    if (const auto* p = std::get_if<ParticleMeasure>(&last)) return w2ToGaussian(*p, oracle);
    if (const auto* g = std::get_if<GridMeasure>(&last)) return w2ToGaussian(*g, oracle);
    return wassersteinGaussian(std::get<GaussianMeasure>(last), oracle);
  };
  EquilibriumClassification out;
  out.distanceConditional = distance(conditional);
  out.distanceMarginal = distance(marginal);
  if (out.distanceConditional < 0.5 * out.distanceMarginal) {
    out.label = EquilibriumLabel::conditional;
  } else if (out.distanceMarginal < 0.5 * out.distanceConditional) {
    out.label = EquilibriumLabel::marginal;
  }
  return out;
}

DecayCertificate certifyDecay(const FlowTrace& trace, double rate, double slack) {
  require(!trace.klToTarget.empty(), ErrorCode::InvalidArgument, "trace has no KL samples");
  DecayCertificate out;
  out.rate = rate;
  const double kl0 = trace.klToTarget.front();
  for (std::size_t i = 0; i < trace.times.size(); ++i) {
    const double envelope = std::exp(-rate * trace.times[i]) * kl0;
    const double value = trace.klToTarget[i];
    double ratio = 0.0;
    if (envelope > 0.0) {
      ratio = value / envelope;
    } else if (value > 1e-14) {
      ratio = kInf;
    }
    out.worstRatio = std::max(out.worstRatio, ratio);
  }
  out.satisfied = out.worstRatio <= 1.0 + slack;
  return out;
}

double certifiedDecayRate(const LinearForwardMap& map, const GaussianMeasure& target) {
  const GaussianMeasure reduced = reduceTarget(target, map);
  const double sigmaMin = map.sigma()[map.rank() - 1];
  return 2.0 * sigmaMin * sigmaMin * logConcavity(reduced).lambda;
}

double equilibriumFlatness(const GridMeasure& state, const GridMeasure& target, double threshold) {
  require(state.spec() == target.spec(), ErrorCode::GridMismatch, "state and target grids differ");
  const double cutoff = threshold * state.density().maxCoeff();
  double sum = 0.0;
  double sumSq = 0.0;
  double count = 0.0;
  for (Index c = 0; c < state.cells(); ++c) {
    if (state.density()[c] <= cutoff) continue;
    require(target.density()[c] > 0.0, ErrorCode::SupportMismatch, "target vanishes on the state's support");
    const double r = state.density()[c] / target.density()[c];
    sum += r;
    sumSq += r * r;
    count += 1.0;
  }
  require(count > 0.0, ErrorCode::ZeroMass, "state has no effective support");
  const double mean = sum / count;
  const double var = std::max(0.0, sumSq / count - mean * mean);
  return std::sqrt(var) / mean;
}

}  // namespace stochinv
