#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "stochinv/divergences.hpp"
#include "stochinv/error.hpp"

namespace stochinv {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMassZero = 1e-15;

void requireExponent(double p) {
  require(std::isfinite(p) && p >= 1.0, ErrorCode::InvalidArgument, "exponent p must be >= 1");
}

Matrix costMatrix(const ParticleMeasure& mu, const ParticleMeasure& nu, double p) {
  require(mu.dim() == nu.dim(), ErrorCode::DimensionMismatch,
          "measures live in dimensions " + std::to_string(mu.dim()) + " and " + std::to_string(nu.dim()));
  Matrix cost(mu.size(), nu.size());
  for (Index i = 0; i < mu.size(); ++i) {
    for (Index j = 0; j < nu.size(); ++j) {
      const double dist = (mu.points().row(i) - nu.points().row(j)).norm();
      cost(i, j) = p == 2.0 ? dist * dist : std::pow(dist, p);
    }
  }
  return cost;
}

// Integral over [0, length] of |d0 + (d1 - d0) s / length|^p.
double linearPowerIntegral(double d0, double d1, double length, double p) {
  if (length <= 0.0) return 0.0;
  if ((d0 < 0.0 && d1 > 0.0) || (d0 > 0.0 && d1 < 0.0)) {
    const double root = length * d0 / (d0 - d1);
    return linearPowerIntegral(d0, 0.0, root, p) + linearPowerIntegral(0.0, d1, length - root, p);
  }
  const double a = std::abs(d0);
  const double b = std::abs(d1);
  if (std::abs(a - b) <= 1e-14 * std::max(a, b)) return length * std::pow(0.5 * (a + b), p);
  return length * (std::pow(b, p + 1.0) - std::pow(a, p + 1.0)) / ((p + 1.0) * (b - a));
}

// Breakpoints (cumulative mass, position) of the piecewise-linear quantile
// function of a 1D grid density.
struct QuantileKnots {
  std::vector<double> t;
  std::vector<double> x;
};

QuantileKnots gridQuantile(const GridMeasure& m) {
  const GridSpec& spec = m.spec();
  const double h = spec.width(0);
  const double mass = m.density().sum() * h;
  QuantileKnots knots;
  knots.t.push_back(0.0);
  knots.x.push_back(spec.lower[0]);
  double cumulative = 0.0;
  for (Index k = 0; k < m.cells(); ++k) {
    const double cell = m.density()[k] * h / mass;
    if (cell <= 0.0) continue;
    const double left = spec.lower[0] + static_cast<double>(k) * h;
    if (knots.x.back() != left) {
      // Zero-mass gap: the quantile jumps.
      knots.t.push_back(cumulative);
      knots.x.push_back(left);
    }
    cumulative += cell;
    knots.t.push_back(cumulative);
    knots.x.push_back(left + h);
  }
  knots.t.back() = 1.0;
  return knots;
}

double evalQuantile(const QuantileKnots& q, std::size_t segment, double t) {
  const double t0 = q.t[segment];
  const double t1 = q.t[segment + 1];
  if (t1 <= t0) return q.x[segment + 1];
  return q.x[segment] + (q.x[segment + 1] - q.x[segment]) * (t - t0) / (t1 - t0);
}

}  // namespace

double wasserstein1D(const ParticleMeasure& mu, const ParticleMeasure& nu, double p) {
  requireExponent(p);
  require(mu.dim() == 1 && nu.dim() == 1, ErrorCode::DimensionMismatch, "wasserstein1D needs 1D measures");
  auto order = [](const ParticleMeasure& m) {
    std::vector<Index> idx(static_cast<std::size_t>(m.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
    std::stable_sort(idx.begin(), idx.end(), [&m](Index a, Index b) { return m.points()(a, 0) < m.points()(b, 0); });
    return idx;
  };
  const std::vector<Index> a = order(mu);
  const std::vector<Index> b = order(nu);
  std::size_t i = 0;
  std::size_t j = 0;
  double remA = mu.weights()[a[0]];
  double remB = nu.weights()[b[0]];
  double total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double step = std::min(remA, remB);
    const double dist = std::abs(mu.points()(a[i], 0) - nu.points()(b[j], 0));
    total += step * std::pow(dist, p);
    remA -= step;
    remB -= step;
    if (remA <= kMassZero) {
      if (++i < a.size()) remA = mu.weights()[a[i]];
    }
    if (remB <= kMassZero) {
      if (++j < b.size()) remB = nu.weights()[b[j]];
    }
  }
  return std::pow(total, 1.0 / p);
}

double wasserstein1D(const GridMeasure& mu, const GridMeasure& nu, double p) {
  requireExponent(p);
  require(mu.dim() == 1 && nu.dim() == 1, ErrorCode::DimensionMismatch, "wasserstein1D needs 1D measures");
  const QuantileKnots qa = gridQuantile(mu);
  const QuantileKnots qb = gridQuantile(nu);
  std::vector<double> ts = qa.t;
  ts.insert(ts.end(), qb.t.begin(), qb.t.end());
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  std::size_t sa = 0;
  std::size_t sb = 0;
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const double t0 = ts[k];
    const double t1 = ts[k + 1];
    if (t1 <= t0) continue;
    const double mid = 0.5 * (t0 + t1);
    while (sa + 2 < qa.t.size() && qa.t[sa + 1] <= mid) ++sa;
    while (sb + 2 < qb.t.size() && qb.t[sb + 1] <= mid) ++sb;
    const double d0 = evalQuantile(qa, sa, t0) - evalQuantile(qb, sb, t0);
    const double d1 = evalQuantile(qa, sa, t1) - evalQuantile(qb, sb, t1);
    total += linearPowerIntegral(d0, d1, t1 - t0, p);
  }
  return std::pow(total, 1.0 / p);
}

TransportResult wassersteinExact(const ParticleMeasure& mu, const ParticleMeasure& nu, double p, Index sizeCap) {
  requireExponent(p);
  const Index n1 = mu.size();
  const Index n2 = nu.size();
  require(n1 * n2 <= sizeCap, ErrorCode::SizeCap,
          "cost matrix has " + std::to_string(n1 * n2) + " entries, cap is " + std::to_string(sizeCap) +
              "; use sinkhorn");
  const Matrix cost = costMatrix(mu, nu, p);

  Vector supply = mu.weights();
  Vector demand = nu.weights();
  Matrix plan = Matrix::Zero(n1, n2);
  Vector potS = Vector::Zero(n1);
  Vector potT = Vector::Zero(n2);
  Vector distS(n1);
  Vector distT(n2);
  std::vector<Index> parentS(static_cast<std::size_t>(n1));
  std::vector<Index> parentT(static_cast<std::size_t>(n2));
  std::vector<char> doneS(static_cast<std::size_t>(n1));
  std::vector<char> doneT(static_cast<std::size_t>(n2));

  int augmentations = 0;
  while (supply.maxCoeff() > kMassZero && demand.maxCoeff() > kMassZero) {
    for (Index i = 0; i < n1; ++i) {
      distS[i] = supply[i] > kMassZero ? 0.0 : kInf;
      parentS[i] = -1;
    }
    distT.setConstant(kInf);
    std::fill(doneS.begin(), doneS.end(), 0);
    std::fill(doneT.begin(), doneT.end(), 0);

    Index sink = -1;
    double reach = kInf;
    while (true) {
      double best = kInf;
      Index node = -1;
      bool isSource = true;
      for (Index i = 0; i < n1; ++i) {
        if (!doneS[i] && distS[i] < best) {
          best = distS[i];
          node = i;
          isSource = true;
        }
      }
      for (Index j = 0; j < n2; ++j) {
        if (!doneT[j] && distT[j] < best) {
          best = distT[j];
          node = j;
          isSource = false;
        }
      }
      if (node < 0) break;
      if (isSource) {
        doneS[node] = 1;
        for (Index j = 0; j < n2; ++j) {
          if (doneT[j]) continue;
          const double reduced = std::max(0.0, cost(node, j) + potS[node] - potT[j]);
          if (best + reduced < distT[j]) {
            distT[j] = best + reduced;
            parentT[j] = node;
          }
        }
      } else {
        doneT[node] = 1;
        if (demand[node] > kMassZero) {
          sink = node;
          reach = best;
          break;
        }
        for (Index i = 0; i < n1; ++i) {
          if (doneS[i] || plan(i, node) <= kMassZero) continue;
          const double reduced = std::max(0.0, -cost(i, node) + potT[node] - potS[i]);
          if (best + reduced < distS[i]) {
            distS[i] = best + reduced;
            parentS[i] = node;
          }
        }
      }
    }
    if (sink < 0) break;

    for (Index i = 0; i < n1; ++i) potS[i] += std::min(distS[i], reach);
    for (Index j = 0; j < n2; ++j) potT[j] += std::min(distT[j], reach);

    double flow = demand[sink];
    Index j = sink;
    Index i = parentT[j];
    while (parentS[i] >= 0) {
      const Index prev = parentS[i];
      flow = std::min(flow, plan(i, prev));
      j = prev;
      i = parentT[j];
    }
    flow = std::min(flow, supply[i]);

    j = sink;
    i = parentT[j];
    demand[sink] -= flow;
    if (demand[sink] <= kMassZero) demand[sink] = 0.0;
    while (true) {
      plan(i, j) += flow;
      const Index prev = parentS[i];
      if (prev < 0) break;
      plan(i, prev) -= flow;
      if (plan(i, prev) <= kMassZero) plan(i, prev) = 0.0;
      j = prev;
      i = parentT[j];
    }
    supply[i] -= flow;
    if (supply[i] <= kMassZero) supply[i] = 0.0;
    ++augmentations;
  }

  TransportResult result;
  result.coupling.plan = std::move(plan);
  result.coupling.cost = std::max(0.0, (result.coupling.plan.array() * cost.array()).sum());
  result.value = std::pow(result.coupling.cost, 1.0 / p);
  result.iterations = augmentations;
  result.converged = true;
  return result;
}

TransportResult sinkhorn(const ParticleMeasure& mu, const ParticleMeasure& nu, double p,
                         const SinkhornOptions& options) {
  requireExponent(p);
  require(std::isfinite(options.epsilon) && options.epsilon > 0.0, ErrorCode::InvalidArgument,
          "sinkhorn epsilon must be positive");
  require(options.maxIterations >= 1, ErrorCode::InvalidArgument, "sinkhorn needs maxIterations >= 1");
  const Matrix cost = costMatrix(mu, nu, p);
  const Index n1 = mu.size();
  const Index n2 = nu.size();
  const double target = options.epsilon;
  const Vector logA = mu.weights().array().log();
  const Vector logB = nu.weights().array().log();

  Vector f = Vector::Zero(n1);
  Vector g = Vector::Zero(n2);
  auto logSumExp = [](auto&& values) {
    const double top = values.maxCoeff();
    if (!std::isfinite(top)) return top;
    return top + std::log((values.array() - top).exp().sum());
  };
  Vector row(n2);
  Vector col(n1);
  auto sweep = [&](double eps) {
    for (Index i = 0; i < n1; ++i) {
      if (!std::isfinite(logA[i])) {
        f[i] = -kInf;
        continue;
      }
      for (Index j = 0; j < n2; ++j) row[j] = (g[j] - cost(i, j)) / eps;
      f[i] = eps * (logA[i] - logSumExp(row));
    }
    for (Index j = 0; j < n2; ++j) {
      if (!std::isfinite(logB[j])) {
        g[j] = -kInf;
        continue;
      }
      for (Index i = 0; i < n1; ++i) col[i] = (f[i] - cost(i, j)) / eps;
      g[j] = eps * (logB[j] - logSumExp(col));
    }
  };
  auto buildPlan = [&](double eps) {
    Matrix plan(n1, n2);
    for (Index i = 0; i < n1; ++i) {
      for (Index j = 0; j < n2; ++j) plan(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / eps);
    }
    return plan;
  };
  auto violationOf = [&](const Matrix& plan) { return (plan.rowwise().sum() - mu.weights()).cwiseAbs().sum(); };

  // Epsilon annealing with warm-started potentials.
  int iter = 0;
  const double coarseTolerance = std::max(options.tolerance, 1e-6);
  for (double eps = std::max(target, 0.5 * cost.maxCoeff()); eps > target && iter < options.maxIterations;
       eps = std::max(target, 0.5 * eps)) {
    for (int k = 0; k < 100 && iter < options.maxIterations; ++k) {
      sweep(eps);
      ++iter;
      if (violationOf(buildPlan(eps)) <= coarseTolerance) break;
    }
  }

  TransportResult result;
  result.converged = false;
  double bestViolation = kInf;
  while (iter < options.maxIterations) {
    sweep(target);
    ++iter;
    Matrix plan = buildPlan(target);
    const double violation = violationOf(plan);
    if (violation < bestViolation) {
      bestViolation = violation;
      result.coupling.plan = std::move(plan);
      result.iterations = iter;
    }
    if (violation <= options.tolerance) {
      result.converged = true;
      break;
    }
  }
  if (!std::isfinite(bestViolation)) {
    result.coupling.plan = buildPlan(target);
    result.iterations = iter;
  }
  result.coupling.cost = (result.coupling.plan.array() * cost.array()).sum();
  result.value = std::pow(std::max(0.0, result.coupling.cost), 1.0 / p);
  return result;
}

}  // namespace stochinv
