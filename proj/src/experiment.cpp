#include "stochinv/experiment.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "stochinv/error.hpp"
#include "stochinv/rng.hpp"

#ifndef STOCHINV_VERSION
#define STOCHINV_VERSION "0.0.0"
#endif

namespace stochinv {

namespace {

using io::Json;

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr long long kMaxSteps = 10'000'000;
constexpr long long kMaxAtoms = 100'000;
constexpr long long kMaxCells = 4'000'000;

[[noreturn]] void configError(const std::string& path, const std::string& message) {
  fail(ErrorCode::ConfigError, path + ": " + message);
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void requireObject(const Json& j, const std::string& path) {
  if (!j.is_object()) configError(path, "must be a JSON object");
}

void allowKeys(const Json& j, const std::string& path, std::initializer_list<const char*> keys) {
  requireObject(j, path);
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) configError(join(path, item.key()), "unknown field");
  }
}

const Json& need(const Json& j, const std::string& path, const std::string& key) {
  requireObject(j, path);
  if (!j.contains(key)) configError(join(path, key), "required field is missing");
  return j.at(key);
}

double finiteNumber(const Json& v, const std::string& path) {
  if (!v.is_number()) configError(path, "must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) configError(path, "must be finite");
  return x;
}

double positiveNumber(const Json& v, const std::string& path) {
  const double x = finiteNumber(v, path);
  if (x <= 0.0) configError(path, "must be positive");
  return x;
}

double nonNegativeNumber(const Json& v, const std::string& path) {
  const double x = finiteNumber(v, path);
  if (x < 0.0) configError(path, "must be >= 0");
  return x;
}

long long integerIn(const Json& v, const std::string& path, long long lo, long long hi) {
  if (!v.is_number_integer()) configError(path, "must be an integer");
  if (v.is_number_unsigned() && v.get<unsigned long long>() > static_cast<unsigned long long>(hi)) {
    configError(path, "must be at most " + std::to_string(hi));
  }
  const long long x = v.get<long long>();
  if (x < lo || x > hi) configError(path, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return x;
}

bool boolean(const Json& v, const std::string& path) {
  if (!v.is_boolean()) configError(path, "must be true or false");
  return v.get<bool>();
}

std::string choice(const Json& v, const std::string& path, std::initializer_list<const char*> options) {
  if (!v.is_string()) configError(path, "must be a string");
  const std::string s = v.get<std::string>();
  std::string list;
  for (const char* o : options) {
    if (s == o) return s;
    list += list.empty() ? o : std::string(", ") + o;
  }
  configError(path, "must be one of " + list + "; got \"" + s + "\"");
}

std::vector<double> numberList(const Json& v, const std::string& path) {
  if (!v.is_array() || v.empty()) configError(path, "must be a nonempty array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(finiteNumber(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

std::optional<double> optionalPositive(const Json& j, const std::string& path, const std::string& key) {
  if (!j.contains(key)) return std::nullopt;
  return positiveNumber(j.at(key), join(path, key));
}

// Library errors raised while building a value from config become ConfigError
// at the field that produced them.
template <typename F>
auto asConfig(const std::string& path, F&& build) -> decltype(build()) {
  try {
    return build();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError) throw;
    configError(path, e.what());
  } catch (const Json::exception& e) {
    configError(path, e.what());
  }
}

fs::path resolve(const fs::path& baseDir, const std::string& file) {
  const fs::path p(file);
  return p.is_absolute() || baseDir.empty() ? p : baseDir / p;
}

std::string fileField(const Json& j, const std::string& path) {
  const Json& f = j.at("file");
  if (!f.is_string() || f.get<std::string>().empty()) configError(join(path, "file"), "must be a nonempty path");
  return f.get<std::string>();
}

GridSpec gridSpecFromJson(const Json& j, const std::string& path) {
  allowKeys(j, path, {"lower", "upper", "shape"});
  GridSpec spec;
  const auto lower = numberList(need(j, path, "lower"), join(path, "lower"));
  const auto upper = numberList(need(j, path, "upper"), join(path, "upper"));
  spec.lower = Eigen::Map<const Vector>(lower.data(), static_cast<Index>(lower.size()));
  spec.upper = Eigen::Map<const Vector>(upper.data(), static_cast<Index>(upper.size()));
  const Json& shape = need(j, path, "shape");
  if (!shape.is_array() || shape.empty()) configError(join(path, "shape"), "must be a nonempty array of integers");
  long long cells = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const long long s = integerIn(shape[i], join(path, "shape") + "[" + std::to_string(i) + "]", 1, kMaxCells);
    cells *= s;
    if (cells > kMaxCells) configError(join(path, "shape"), "grid exceeds " + std::to_string(kMaxCells) + " cells");
    spec.shape.push_back(static_cast<int>(s));
  }
  asConfig(path, [&] {
    spec.validate();
    return 0;
  });
  return spec;
}

FDivergenceSpec divergenceFromName(const Json& v, const std::string& path) {
  const std::string name = choice(v, path, {"kl", "chi2", "hellinger"});
  if (name == "chi2") return FDivergenceSpec::chiSquared();
  if (name == "hellinger") return FDivergenceSpec::totalVariationSquaredGenerator();
  return FDivergenceSpec::kl();
}

const LinearForwardMap& requireLinear(const ForwardMap& map, const std::string& path) {
  const auto* l = std::get_if<LinearForwardMap>(&map);
  if (!l) configError(path, "this experiment needs a linear map (inline matrix)");
  return *l;
}

const GaussianMeasure& requireGaussian(const Measure& m, const std::string& path) {
  const auto* g = std::get_if<GaussianMeasure>(&m);
  if (!g) configError(path, "must be a gaussian measure");
  return *g;
}

std::string snapshotExtension(const Measure& m) { return std::holds_alternative<ParticleMeasure>(m) ? ".csv" : ".json"; }

}  // namespace

const char* experimentKindName(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::stability: return "stability";
    case ExperimentKind::regularizeSweep: return "regularizeSweep";
    case ExperimentKind::flowConvergence: return "flowConvergence";
    case ExperimentKind::equilibriumContrast: return "equilibriumContrast";
    case ExperimentKind::distance: return "distance";
    case ExperimentKind::invert: return "invert";
  }
  return "distance";
}

ForwardMap parseMap(const Json& j, const fs::path& baseDir) {
  const std::string path = "parameters.map";
  requireObject(j, path);
  if (j.contains("file")) {
    allowKeys(j, path, {"name", "file"});
    const fs::path file = resolve(baseDir, fileField(j, path));
    return asConfig(path, [&] { return ForwardMap(LinearForwardMap(io::readMatrix(file))); });
  }
  if (j.contains("elementwise")) {
    allowKeys(j, path, {"name", "elementwise", "dim"});
    const std::string kind = choice(j.at("elementwise"), join(path, "elementwise"), {"sinh", "cubic"});
    const Index d = static_cast<Index>(integerIn(need(j, path, "dim"), join(path, "dim"), 1, 64));
    SmoothForwardMap map;
    map.inputDim = d;
    map.outputDim = d;
    if (kind == "sinh") {
      map.evaluate = [](const Vector& u) -> Vector { return u.array().sinh(); };
      map.jacobian = [](const Vector& u) -> Matrix { return u.array().cosh().matrix().asDiagonal(); };
      map.inverse = [](const Vector& y) -> Vector { return y.array().asinh(); };
    } else {
      map.evaluate = [](const Vector& u) -> Vector { return u.array() + u.array().cube(); };
      map.jacobian = [](const Vector& u) -> Matrix { return (1.0 + 3.0 * u.array().square()).matrix().asDiagonal(); };
      map.inverse = newtonInverse(map.evaluate, map.jacobian);
    }
    return map;
  }
  allowKeys(j, path, {"name", "matrix"});
  if (j.contains("name") && !j.at("name").is_string()) configError(join(path, "name"), "must be a string");
  const Json& m = need(j, path, "matrix");
  return asConfig(join(path, "matrix"), [&] {
    const Matrix a = io::matrixFromJson(m, "matrix");
    if (!a.allFinite()) configError(join(path, "matrix"), "entries must be finite");
    return ForwardMap(LinearForwardMap(a));
  });
}

Measure parseMeasure(const Json& j, const fs::path& baseDir, std::uint64_t seed, std::string_view field) {
  const std::string path(field);
  requireObject(j, path);
  if (j.contains("file")) {
    allowKeys(j, path, {"file"});
    const fs::path file = resolve(baseDir, fileField(j, path));
    return asConfig(path, [&] { return io::readMeasure(file); });
  }
  const std::string type = j.contains("type") ? choice(j.at("type"), join(path, "type"),
                                                       {"gaussian", "grid", "particles", "sample", "discretize"})
                                              : "";
  if (type == "sample") {
    allowKeys(j, path, {"type", "gaussian", "n", "method"});
    const GaussianMeasure g = asConfig(join(path, "gaussian"), [&] {
      const Json& spec = need(j, path, "gaussian");
      if (spec.is_object()) allowKeys(spec, join(path, "gaussian"), {"mean", "cov"});
      return io::gaussianFromJson(spec);
    });
    const Index n = static_cast<Index>(integerIn(need(j, path, "n"), join(path, "n"), 1, kMaxAtoms));
    const std::string method =
        j.contains("method") ? choice(j.at("method"), join(path, "method"), {"random", "stratified"}) : "stratified";
    return asConfig(path, [&]() -> Measure {
      if (method == "stratified") return stratifiedGaussianSample(g, n);
      CounterRng rng(seed, fnv1a64(path));
      return sampleGaussian(g, n, rng);
    });
  }
  if (type == "discretize") {
    allowKeys(j, path, {"type", "gaussian", "grid", "rule"});
    const GaussianMeasure g = asConfig(join(path, "gaussian"), [&] {
      const Json& spec = need(j, path, "gaussian");
      if (spec.is_object()) allowKeys(spec, join(path, "gaussian"), {"mean", "cov"});
      return io::gaussianFromJson(spec);
    });
    const GridSpec spec = gridSpecFromJson(need(j, path, "grid"), join(path, "grid"));
    if (spec.dim() != g.dim()) configError(join(path, "grid"), "dimension differs from the gaussian");
    const std::string rule =
        j.contains("rule") ? choice(j.at("rule"), join(path, "rule"), {"average", "center"}) : "average";
    return asConfig(path, [&]() -> Measure {
      return discretize(g, spec, rule == "average" ? CellRule::Average : CellRule::Center);
    });
  }
  std::string inferred = type;
  if (inferred.empty()) {
    if (j.contains("mean")) {
      inferred = "gaussian";
    } else if (j.contains("density")) {
      inferred = "grid";
    } else if (j.contains("points")) {
      inferred = "particles";
    }
  }
  if (inferred == "gaussian") allowKeys(j, path, {"type", "mean", "cov"});
  if (inferred == "grid") allowKeys(j, path, {"type", "lower", "upper", "shape", "density"});
  if (inferred == "particles") allowKeys(j, path, {"type", "points", "weights"});
  if (j.contains("shape")) {
    const Json& shape = j.at("shape");
    if (shape.is_array()) {
      long long cells = 1;
      for (const Json& s : shape) {
        if (!s.is_number_integer() || s.get<long long>() < 1) configError(join(path, "shape"), "must hold positive integers");
        cells *= s.get<long long>();
        if (cells > kMaxCells) configError(join(path, "shape"), "grid too large");
      }
    }
  }
  return asConfig(path, [&] { return io::measureFromJson(j); });
}

FlowProblem parseFlowProblem(const Json& j, const fs::path& baseDir, std::uint64_t seed) {
  const std::string path = "parameters";
  allowKeys(j, path,
            {"map", "target", "init", "scheme", "dt", "tMax", "bandwidth", "recordEvery", "stateDensity", "divergence",
             "allowKdeTarget", "snapshotTimes", "grid", "expectedRate", "rateTolerance", "flatnessTolerance"});
  ForwardMap map = parseMap(need(j, path, "map"), baseDir);
  Measure target = parseMeasure(need(j, path, "target"), baseDir, seed, "parameters.target");
  Measure init = parseMeasure(need(j, path, "init"), baseDir, seed, "parameters.init");
  FlowProblem problem{FlowConfig(map, target), init, std::nullopt, 0.1};
  FlowConfig& cfg = problem.config;

  const std::string scheme = j.contains("scheme") ? choice(j.at("scheme"), "parameters.scheme",
                                                           {"particleEuler", "particleRK4", "gridFokkerPlanck",
                                                            "gaussianODE", "particleW2"})
                                                  : "particleEuler";
  if (scheme == "particleRK4") cfg.scheme = FlowScheme::particleRK4;
  if (scheme == "gridFokkerPlanck") cfg.scheme = FlowScheme::gridFokkerPlanck;
  if (scheme == "gaussianODE") cfg.scheme = FlowScheme::gaussianODE;
  if (scheme == "particleW2") cfg.scheme = FlowScheme::particleW2;
  cfg.dt = positiveNumber(need(j, path, "dt"), "parameters.dt");
  cfg.tMax = nonNegativeNumber(need(j, path, "tMax"), "parameters.tMax");
  if (cfg.tMax > 0.0 && cfg.tMax < cfg.dt) configError("parameters.tMax", "must be 0 or at least dt");
  if (cfg.tMax / cfg.dt > static_cast<double>(kMaxSteps)) {
    configError("parameters.dt", "tMax / dt exceeds " + std::to_string(kMaxSteps) + " steps");
  }
  cfg.bandwidth = optionalPositive(j, path, "bandwidth");
  if (j.contains("recordEvery")) {
    cfg.recordEvery = static_cast<int>(integerIn(j.at("recordEvery"), "parameters.recordEvery", 1, kMaxSteps));
  }
  if (j.contains("stateDensity")) {
    cfg.stateDensity = choice(j.at("stateDensity"), "parameters.stateDensity", {"kde", "gaussianFit"}) == "kde"
                           ? StateDensity::kde
                           : StateDensity::gaussianFit;
  }
  if (j.contains("divergence")) cfg.divergence = divergenceFromName(j.at("divergence"), "parameters.divergence");
  if (j.contains("allowKdeTarget")) cfg.allowKdeTarget = boolean(j.at("allowKdeTarget"), "parameters.allowKdeTarget");
  if (j.contains("snapshotTimes")) {
    const Json& times = j.at("snapshotTimes");
    if (!times.is_array()) configError("parameters.snapshotTimes", "must be an array of times");
    for (std::size_t i = 0; i < times.size(); ++i) {
      cfg.snapshotTimes.push_back(nonNegativeNumber(times[i], "parameters.snapshotTimes[" + std::to_string(i) + "]"));
    }
  }
  if (j.contains("expectedRate")) problem.expectedRate = finiteNumber(j.at("expectedRate"), "parameters.expectedRate");
  if (j.contains("rateTolerance")) problem.rateTolerance = positiveNumber(j.at("rateTolerance"), "parameters.rateTolerance");
  if (j.contains("flatnessTolerance")) positiveNumber(j.at("flatnessTolerance"), "parameters.flatnessTolerance");

  asConfig(path, [&] {
    cfg.validate();
    return 0;
  });

  const Index m = inputDim(cfg.map);
  const Index n = outputDim(cfg.map);
  switch (cfg.scheme) {
    case FlowScheme::gridFokkerPlanck: {
      const auto& linear = requireLinear(cfg.map, "parameters.map");
      if (j.contains("grid")) {
        const GridSpec spec = gridSpecFromJson(j.at("grid"), "parameters.grid");
        const auto& g = requireGaussian(problem.init, "parameters.init");
        if (g.dim() != spec.dim()) configError("parameters.grid", "dimension differs from the initial gaussian");
        problem.init = asConfig("parameters.init", [&] { return discretize(g, spec, CellRule::Average); });
      }
      const auto* grid = std::get_if<GridMeasure>(&problem.init);
      if (!grid) configError("parameters.init", "gridFokkerPlanck needs a grid init (or a gaussian init plus \"grid\")");
      if (grid->dim() != n && grid->dim() != linear.rank()) {
        configError("parameters.init", "grid dimension must equal the data dimension or rank(A)");
      }
      asConfig("parameters.target", [&] { return gridFlowTarget(linear, cfg.target, grid->spec()); });
      const double limit = cflLimit(grid->spec(), gridMobility(linear, grid->dim()));
      if (cfg.dt > limit * (1.0 + 1e-12)) {
        configError("parameters.dt", "CFLViolation: dt exceeds the explicit limit " + io::formatNumber(limit));
      }
      break;
    }
    case FlowScheme::gaussianODE: {
      const auto& linear = requireLinear(cfg.map, "parameters.map");
      const auto& g = requireGaussian(problem.init, "parameters.init");
      const auto& t = requireGaussian(cfg.target, "parameters.target");
      if (t.dim() != n) configError("parameters.target", "dimension must equal the map output");
      if (g.dim() != n && g.dim() != linear.rank()) {
        configError("parameters.init", "dimension must equal the data dimension or rank(A)");
      }
      asConfig("parameters.target", [&] { return gaussianConditionalOnSubspace(t, linear.columnSpaceBasis()); });
      break;
    }
    default: {
      if (j.contains("grid")) configError("parameters.grid", "only used by gridFokkerPlanck");
      const auto* p = std::get_if<ParticleMeasure>(&problem.init);
      if (!p) configError("parameters.init", "particle schemes need a particle init");
      if (p->dim() != m) configError("parameters.init", "dimension must equal the map input");
      if (dimension(cfg.target) != n) configError("parameters.target", "dimension must equal the map output");
      if (std::holds_alternative<GridMeasure>(cfg.target)) {
        configError("parameters.target", "particle flows take gaussian or particle targets");
      }
      if (std::holds_alternative<ParticleMeasure>(cfg.target) && !cfg.allowKdeTarget &&
          cfg.scheme != FlowScheme::particleW2) {
        configError("parameters.allowKdeTarget", "a particle target needs allowKdeTarget = true");
      }
      if (cfg.scheme == FlowScheme::particleW2) {
        requireLinear(cfg.map, "parameters.map");
        if (const auto* t = std::get_if<ParticleMeasure>(&cfg.target); t && t->size() != p->size()) {
          // Unequal sizes fall back to exact OT, which has a size cap.
          if (static_cast<double>(t->size()) * static_cast<double>(p->size()) > 1e6) {
            configError("parameters.target", "particle target too large for exact OT");
          }
        }
      } else {
        if (cfg.stateDensity == StateDensity::kde && !cfg.bandwidth) {
          configError("parameters.bandwidth", "BandwidthRequired: kde state density needs a bandwidth");
        }
        if (std::holds_alternative<ParticleMeasure>(cfg.target) && !cfg.bandwidth) {
          configError("parameters.bandwidth", "BandwidthRequired: a particle target needs a bandwidth");
        }
        if (const auto* linear = std::get_if<LinearForwardMap>(&cfg.map)) {
          if (const auto* t = std::get_if<GaussianMeasure>(&cfg.target)) {
            asConfig("parameters.target", [&] { return gaussianConditionalOnSubspace(*t, linear->columnSpaceBasis()); });
          }
        }
      }
      break;
    }
  }
  return problem;
}

namespace {

struct DistancePlan {
  Measure mu;
  Measure nu;
  std::string metric;
  std::optional<double> sinkhornEpsilon;
  std::optional<double> expect;
  double tolerance = 1e-9;
};

struct InvertPlan {
  ForwardMap map;
  Measure data;
  InversionOptions options;
  std::string format;
};

struct StabilityPlan {
  LinearForwardMap map;
  GaussianMeasure data;
  std::vector<double> perturbations;
  StabilityMetric metric = StabilityMetric::W2;
  SweepOptions options;
};

struct SweepPlan {
  LinearForwardMap map;
  Measure truth;
  Measure data;
  std::vector<double> alphas;
};

struct ContrastPlan {
  FlowConfig klConfig;
  FlowConfig w2Config;
  Measure init;
  GaussianMeasure target;
  double tolerance = 0.05;
};

struct FlowPlan {
  FlowProblem problem;
  std::optional<double> flatnessTolerance;
};

using Plan = std::variant<DistancePlan, InvertPlan, StabilityPlan, SweepPlan, FlowPlan, ContrastPlan>;

std::string distanceMetric(const Json& v, const std::string& path) {
  return choice(v, path, {"w2", "w1", "kl", "chi2", "hellinger"});
}

Plan buildPlan(const ExperimentConfig& cfg) {
  const Json& p = cfg.parameters;
  const std::string path = "parameters";
  requireObject(p, path);
  const fs::path& base = cfg.baseDir;
  switch (cfg.kind) {
    case ExperimentKind::distance: {
      allowKeys(p, path, {"mu", "nu", "metric", "sinkhornEpsilon", "expect", "tolerance"});
      DistancePlan plan{parseMeasure(need(p, path, "mu"), base, cfg.seed, "parameters.mu"),
                        parseMeasure(need(p, path, "nu"), base, cfg.seed, "parameters.nu"),
                        p.contains("metric") ? distanceMetric(p.at("metric"), "parameters.metric") : "w2",
                        optionalPositive(p, path, "sinkhornEpsilon"), std::nullopt, 1e-9};
      if (p.contains("expect")) plan.expect = finiteNumber(p.at("expect"), "parameters.expect");
      if (p.contains("tolerance")) plan.tolerance = nonNegativeNumber(p.at("tolerance"), "parameters.tolerance");
      if (plan.mu.index() != plan.nu.index()) configError("parameters.nu", "must use the same carrier as mu");
      if (dimension(plan.mu) != dimension(plan.nu)) configError("parameters.nu", "dimension differs from mu");
      const bool f = plan.metric == "kl" || plan.metric == "chi2" || plan.metric == "hellinger";
      if (f && std::holds_alternative<ParticleMeasure>(plan.mu)) {
        configError("parameters.metric", "f-divergences need grid or gaussian measures");
      }
      if (!f && std::holds_alternative<GaussianMeasure>(plan.mu) && plan.metric != "w2") {
        configError("parameters.metric", "gaussian measures support w2 only among transport metrics");
      }
      if (!f && std::holds_alternative<GridMeasure>(plan.mu) && dimension(plan.mu) != 1) {
        configError("parameters.mu", "grid transport distances are 1D only");
      }
      if (f && std::holds_alternative<GridMeasure>(plan.mu) &&
          !(std::get<GridMeasure>(plan.mu).spec() == std::get<GridMeasure>(plan.nu).spec())) {
        configError("parameters.nu", "f-divergences need identical grids");
      }
      if (plan.sinkhornEpsilon && (f || !std::holds_alternative<ParticleMeasure>(plan.mu))) {
        configError("parameters.sinkhornEpsilon", "only applies to particle transport metrics");
      }
      if (!f && std::holds_alternative<ParticleMeasure>(plan.mu) && dimension(plan.mu) > 1) {
        const double cells = static_cast<double>(std::get<ParticleMeasure>(plan.mu).size()) *
                             static_cast<double>(std::get<ParticleMeasure>(plan.nu).size());
        if (cells > static_cast<double>(kDefaultSizeCap)) configError("parameters.mu", "SizeCap: too many atoms for exact OT");
      }
      return plan;
    }
    case ExperimentKind::invert: {
      allowKeys(p, path, {"map", "data", "samples", "format"});
      InvertPlan plan{parseMap(need(p, path, "map"), base),
                      parseMeasure(need(p, path, "data"), base, cfg.seed, "parameters.data"), {}, "auto"};
      if (p.contains("samples")) {
        plan.options.degenerateSamples = static_cast<Index>(integerIn(p.at("samples"), "parameters.samples", 1, kMaxAtoms));
      }
      if (p.contains("format")) plan.format = choice(p.at("format"), "parameters.format", {"auto", "csv", "json"});
      if (dimension(plan.data) != outputDim(plan.map)) configError("parameters.data", "dimension must equal the map output");
      if (const auto* s = std::get_if<SmoothForwardMap>(&plan.map); s && !s->hasInverse()) {
        configError("parameters.map", "MissingInverse: direct inversion needs an inverse");
      }
      if (std::holds_alternative<GridMeasure>(plan.data) && inputDim(plan.map) != outputDim(plan.map)) {
        configError("parameters.data", "grid data can only be inverted through square maps");
      }
      if (const auto* l = std::get_if<LinearForwardMap>(&plan.map);
          l && std::holds_alternative<GridMeasure>(plan.data) && !l->fullRank()) {
        configError("parameters.map", "grid inversion needs an invertible matrix");
      }
      return plan;
    }
    case ExperimentKind::stability: {
      allowKeys(p, path, {"map", "data", "metric", "perturbations", "perturbation", "direction", "divergence"});
      const ForwardMap map = parseMap(need(p, path, "map"), base);
      const Measure data = parseMeasure(need(p, path, "data"), base, cfg.seed, "parameters.data");
      StabilityPlan plan{requireLinear(map, "parameters.map"), requireGaussian(data, "parameters.data"), {},
                         StabilityMetric::W2, {}};
      if (plan.data.dim() != plan.map.outputDim()) configError("parameters.data", "dimension must equal the map output");
      plan.perturbations = numberList(need(p, path, "perturbations"), "parameters.perturbations");
      const std::string metric = p.contains("metric") ? choice(p.at("metric"), "parameters.metric", {"w2", "kl", "chi2", "hellinger"}) : "w2";
      if (metric != "w2") {
        plan.metric = StabilityMetric::fDivergence;
        plan.options.divergence = divergenceFromName(Json(metric), "parameters.metric");
      }
      if (p.contains("divergence")) {
        if (plan.metric == StabilityMetric::W2) configError("parameters.divergence", "only used with an f-divergence metric");
        plan.options.divergence = divergenceFromName(p.at("divergence"), "parameters.divergence");
      }
      if (p.contains("perturbation")) {
        plan.options.kind = choice(p.at("perturbation"), "parameters.perturbation", {"meanShift", "covarianceInflation"}) ==
                                    "meanShift"
                                ? PerturbationKind::MeanShift
                                : PerturbationKind::CovarianceInflation;
      }
      for (std::size_t i = 0; i < plan.perturbations.size(); ++i) {
        if (plan.options.kind == PerturbationKind::CovarianceInflation && plan.perturbations[i] <= -1.0) {
          configError("parameters.perturbations[" + std::to_string(i) + "]", "covariance inflation must exceed -1");
        }
      }
      if (p.contains("direction")) {
        const auto d = numberList(p.at("direction"), "parameters.direction");
        plan.options.direction = Eigen::Map<const Vector>(d.data(), static_cast<Index>(d.size()));
        if (plan.options.direction.size() != plan.data.dim() || plan.options.direction.norm() == 0.0) {
          configError("parameters.direction", "must be a nonzero vector of the data dimension");
        }
      }
      return plan;
    }
    case ExperimentKind::regularizeSweep: {
      allowKeys(p, path, {"map", "truth", "data", "alphas", "alphaRange"});
      const ForwardMap map = parseMap(need(p, path, "map"), base);
      SweepPlan plan{requireLinear(map, "parameters.map"),
                     parseMeasure(need(p, path, "truth"), base, cfg.seed, "parameters.truth"),
                     parseMeasure(need(p, path, "data"), base, cfg.seed, "parameters.data"), {}};
      if (plan.map.outputDim() < plan.map.inputDim()) configError("parameters.map", "ShapeError: needs n >= m");
      if (!plan.map.fullRank()) configError("parameters.map", "RankDeficient: needs full column rank");
      if (plan.truth.index() != plan.data.index()) configError("parameters.data", "must use the same carrier as truth");
      if (std::holds_alternative<GridMeasure>(plan.data)) configError("parameters.data", "UnsupportedCarrier: grid data");
      if (dimension(plan.data) != plan.map.outputDim() || dimension(plan.truth) != plan.map.outputDim()) {
        configError("parameters.data", "truth and data must have the map output dimension");
      }
      if (p.contains("alphas") == p.contains("alphaRange")) {
        configError("parameters.alphas", "give exactly one of alphas or alphaRange");
      }
      if (p.contains("alphas")) {
        plan.alphas = numberList(p.at("alphas"), "parameters.alphas");
      } else {
        const Json& r = p.at("alphaRange");
        allowKeys(r, "parameters.alphaRange", {"lower", "upper", "count"});
        const double lo = positiveNumber(need(r, "parameters.alphaRange", "lower"), "parameters.alphaRange.lower");
        const double hi = positiveNumber(need(r, "parameters.alphaRange", "upper"), "parameters.alphaRange.upper");
        const int count = static_cast<int>(integerIn(need(r, "parameters.alphaRange", "count"), "parameters.alphaRange.count", 2, 10000));
        if (hi <= lo) configError("parameters.alphaRange.upper", "must exceed lower");
        plan.alphas = logSpace(lo, hi, count);
      }
      for (std::size_t i = 0; i < plan.alphas.size(); ++i) {
        if (plan.alphas[i] <= 0.0) configError("parameters.alphas[" + std::to_string(i) + "]", "must be positive");
      }
      if (const auto* d = std::get_if<ParticleMeasure>(&plan.data)) {
        const auto& t = std::get<ParticleMeasure>(plan.truth);
        if (d->dim() > 1 && static_cast<double>(d->size()) * static_cast<double>(t.size()) > static_cast<double>(kDefaultSizeCap)) {
          configError("parameters.data", "SizeCap: too many atoms for exact OT");
        }
      }
      return plan;
    }
    case ExperimentKind::flowConvergence: {
      std::optional<double> flat;
      if (p.is_object() && p.contains("flatnessTolerance")) flat = positiveNumber(p.at("flatnessTolerance"), "parameters.flatnessTolerance");
      FlowPlan plan{parseFlowProblem(p, base, cfg.seed), flat};
      if (flat && plan.problem.config.scheme != FlowScheme::gridFokkerPlanck) {
        configError("parameters.flatnessTolerance", "only applies to gridFokkerPlanck");
      }
      return plan;
    }
    case ExperimentKind::equilibriumContrast: {
      allowKeys(p, path, {"map", "target", "init", "bandwidth", "dt", "tMax", "w2Dt", "w2TMax", "scheme", "stateDensity", "tolerance"});
      const ForwardMap map = parseMap(need(p, path, "map"), base);
      const LinearForwardMap& linear = requireLinear(map, "parameters.map");
      const Measure targetMeasure = parseMeasure(need(p, path, "target"), base, cfg.seed, "parameters.target");
      const GaussianMeasure target = requireGaussian(targetMeasure, "parameters.target");
      const Measure init = parseMeasure(need(p, path, "init"), base, cfg.seed, "parameters.init");
      const auto* particles = std::get_if<ParticleMeasure>(&init);
      if (!particles) configError("parameters.init", "must be a particle measure");
      if (particles->dim() != linear.inputDim()) configError("parameters.init", "dimension must equal the map input");
      if (target.dim() != linear.outputDim()) configError("parameters.target", "dimension must equal the map output");
      asConfig("parameters.target", [&] { return gaussianConditionalOnSubspace(target, linear.columnSpaceBasis()); });
      ContrastPlan plan{FlowConfig(map, target), FlowConfig(map, target), init, target, 0.05};
      FlowConfig& kl = plan.klConfig;
      kl.dt = positiveNumber(need(p, path, "dt"), "parameters.dt");
      kl.tMax = positiveNumber(need(p, path, "tMax"), "parameters.tMax");
      if (p.contains("scheme")) {
        kl.scheme = choice(p.at("scheme"), "parameters.scheme", {"particleEuler", "particleRK4"}) == "particleRK4"
                        ? FlowScheme::particleRK4
                        : FlowScheme::particleEuler;
      }
      if (p.contains("stateDensity")) {
        kl.stateDensity = choice(p.at("stateDensity"), "parameters.stateDensity", {"kde", "gaussianFit"}) == "kde"
                              ? StateDensity::kde
                              : StateDensity::gaussianFit;
      }
      kl.bandwidth = optionalPositive(p, path, "bandwidth");
      if (kl.stateDensity == StateDensity::kde && !kl.bandwidth) {
        configError("parameters.bandwidth", "BandwidthRequired: kde state density needs a bandwidth");
      }
      FlowConfig& w2 = plan.w2Config;
      w2.scheme = FlowScheme::particleW2;
      w2.dt = p.contains("w2Dt") ? positiveNumber(p.at("w2Dt"), "parameters.w2Dt") : kl.dt;
      w2.tMax = p.contains("w2TMax") ? positiveNumber(p.at("w2TMax"), "parameters.w2TMax") : kl.tMax;
      if (p.contains("tolerance")) plan.tolerance = positiveNumber(p.at("tolerance"), "parameters.tolerance");
      for (const auto* c : {&kl, &w2}) {
        if (c->tMax < c->dt) configError("parameters.tMax", "must be at least dt");
        if (c->tMax / c->dt > static_cast<double>(kMaxSteps)) configError("parameters.dt", "too many steps");
        asConfig(path, [&] {
          c->validate();
          return 0;
        });
      }
      return plan;
    }
  }
  configError("kind", "unknown experiment kind");
}

std::vector<Verdict> runDistance(const DistancePlan& plan, const fs::path& dir, std::vector<std::string>& produced) {
  const Json record = computeDistance(plan.mu, plan.nu, plan.metric, plan.sinkhornEpsilon);
  io::writeTextAtomic(dir / "distance.json", record.dump(2) + "\n");
  produced.push_back("distance.json");
  const double value = record.at("value").get<double>();
  std::vector<Verdict> out;
  if (plan.expect) {
    out.push_back({"expectedValue", std::abs(value - *plan.expect) <= plan.tolerance, value, *plan.expect,
                   "tolerance " + io::formatNumber(plan.tolerance)});
  } else {
    out.push_back({"finiteNonnegative", std::isfinite(value) && value >= 0.0, value, 0.0, ""});
  }
  return out;
}

std::vector<Verdict> runInvert(const InvertPlan& plan, const fs::path& dir, std::vector<std::string>& produced) {
  const Measure solution = directInvert(plan.map, plan.data, plan.options);
  const bool particles = std::holds_alternative<ParticleMeasure>(solution);
  const bool csv = plan.format == "csv" || (plan.format == "auto" && particles);
  require(!csv || particles, ErrorCode::IoError, "only particle solutions can be written as CSV");
  const std::string file = csv ? "solution.csv" : "solution.json";
  io::writeMeasure(dir / file, solution);
  produced.push_back(file);

  std::vector<Verdict> out;
  // G(solution) must reproduce the data (its projection onto Col(A) for linear maps).
  if (const auto* sol = std::get_if<ParticleMeasure>(&solution)) {
    ParticleMeasure reference = *sol;
    if (const auto* d = std::get_if<ParticleMeasure>(&plan.data)) {
      reference = *d;
    } else if (const auto* g = std::get_if<GaussianMeasure>(&plan.data)) {
      reference = stratifiedGaussianSample(*g, plan.options.degenerateSamples);
    }
    const ParticleMeasure pushed = pushforward(plan.map, *sol);
    Matrix expected = reference.points();
    if (const auto* l = std::get_if<LinearForwardMap>(&plan.map)) {
      const Matrix basis = l->columnSpaceBasis();
      expected = reference.points() * basis * basis.transpose();
    }
    const double residual = (pushed.points() - expected).cwiseAbs().maxCoeff();
    const double scale = 1.0 + expected.cwiseAbs().maxCoeff();
    out.push_back({"pushforwardConsistency", residual <= 1e-8 * scale, residual, 1e-8 * scale, ""});
  } else if (const auto* sol = std::get_if<GaussianMeasure>(&solution)) {
    const auto& l = std::get<LinearForwardMap>(plan.map);
    const auto& g = std::get<GaussianMeasure>(plan.data);
    const Matrix basis = l.columnSpaceBasis();
    const Matrix proj = basis * basis.transpose();
    const double residual = wassersteinGaussian(l.matrix() * sol->mean(), l.matrix() * sol->cov() * l.matrix().transpose(),
                                                proj * g.mean(), proj * g.cov() * proj);
    const double scale = 1.0 + std::sqrt(secondMoment(g));
    out.push_back({"pushforwardConsistency", residual <= 1e-6 * scale, residual, 1e-6 * scale, ""});
  }
  return out;
}

std::vector<Verdict> runStability(const StabilityPlan& plan, const fs::path& dir, std::vector<std::string>& produced) {
  const auto reports = stabilitySweep(plan.map, plan.data, plan.perturbations, plan.metric, plan.options);
  io::writeTextAtomic(dir / "stability.csv", stabilityCsv(reports));
  produced.push_back("stability.csv");
  bool all = true;
  double worst = 0.0;
  for (const auto& r : reports) {
    all = all && r.satisfied;
    if (r.bound > 0.0) worst = std::max(worst, r.outputDistance / r.bound);
  }
  return {{"stabilityBound", all, worst, 1.0, stabilityMetricName(plan.metric)}};
}

std::vector<Verdict> runSweep(const SweepPlan& plan, const fs::path& dir, std::vector<std::string>& produced) {
  const SweepResult sweep = regularizeSweep(plan.map, plan.truth, plan.data, plan.alphas);
  io::writeTextAtomic(dir / "sweep.csv", sweepCsv(sweep));
  produced.push_back("sweep.csv");
  Json summary{{"noiseW2", sweep.noiseW2},
               {"truthSecondMoment", sweep.truthSecondMoment},
               {"balanceAlpha", sweep.balanceAlpha},
               {"argminAlpha", sweep.argminAlpha}};
  io::writeTextAtomic(dir / "sweep.json", summary.dump(2) + "\n");
  produced.push_back("sweep.json");

  std::vector<Verdict> out;
  double worst = 0.0;
  for (const auto& row : sweep.rows) worst = std::max(worst, row.errorW2 / row.bound);
  out.push_back({"tikhonovBound", worst <= 1.0 + 1e-6, worst, 1.0 + 1e-6, "max error / bound"});

  std::vector<double> sorted = plan.alphas;
  std::sort(sorted.begin(), sorted.end());
  double step = 0.0;
  for (std::size_t i = 1; i < sorted.size(); ++i) step = std::max(step, std::log10(sorted[i] / sorted[i - 1]));
  if (sorted.size() >= 2 && sweep.balanceAlpha > 0.0) {
    const double gap = std::abs(std::log10(sweep.argminAlpha / sweep.balanceAlpha));
    out.push_back({"balanceAlpha", gap <= step * (1.0 + 1e-9), gap, step, "log10 distance of argmin from balance alpha"});
  }
  return out;
}

}  // namespace

std::vector<Verdict> writeFlowOutputs(const fs::path& dir, const FlowProblem& problem, const FlowTrace& trace,
                                      const std::string& prefix) {
  const FlowConfig& cfg = problem.config;
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < trace.times.size(); ++i) {
    rows.push_back({trace.times[i], trace.klToTarget[i], i < trace.w2ToTarget.size() ? trace.w2ToTarget[i] : kNan});
  }
  io::writeTextAtomic(dir / (prefix + "trace.csv"), io::csvText({"t", "kl", "w2"}, rows));

  Json report{{"scheme", flowSchemeName(cfg.scheme)},
              {"coordinates", trace.coordinates == FlowCoordinates::parameter ? "parameter"
                              : trace.coordinates == FlowCoordinates::data    ? "data"
                                                                              : "reduced"},
              {"decayFit", {{"rate", trace.decayFit.rate}, {"r2", trace.decayFit.r2}, {"valid", trace.decayFit.valid}}},
              {"clampedMass", trace.clampedMass},
              {"valid", trace.valid},
              {"warnings", trace.warnings}};
  Json snapshots = Json::array();
  for (std::size_t k = 0; k < trace.snapshots.size(); ++k) {
    const std::string file = prefix + "snapshot_" + std::to_string(k) + snapshotExtension(trace.snapshots[k]);
    io::writeMeasure(dir / file, trace.snapshots[k]);
    snapshots.push_back({{"t", trace.snapshotTimes[k]}, {"file", file}});
  }
  report["snapshots"] = snapshots;

  std::vector<Verdict> verdicts;
  const auto* linear = std::get_if<LinearForwardMap>(&cfg.map);
  const auto* gaussianTarget = std::get_if<GaussianMeasure>(&cfg.target);
  if (linear && gaussianTarget && !trace.klToTarget.empty() && gaussianTarget->dim() == linear->outputDim()) {
    const double rate = certifiedDecayRate(*linear, *gaussianTarget);
    const DecayCertificate cert = certifyDecay(trace, rate);
    report["certificate"] = {{"rate", rate}, {"worstRatio", cert.worstRatio}, {"satisfied", cert.satisfied}};
    if (cfg.scheme == FlowScheme::gaussianODE || cfg.scheme == FlowScheme::gridFokkerPlanck) {
      verdicts.push_back({"decayCertificate", cert.satisfied, cert.worstRatio, 1.05, "KL(t) / (exp(-rate t) KL(0))"});
    }
    try {
      const EquilibriumClassification cls = classifyEquilibrium(trace, *linear, *gaussianTarget);
      report["equilibrium"] = {{"label", equilibriumLabelName(cls.label)},
                               {"distanceConditional", cls.distanceConditional},
                               {"distanceMarginal", cls.distanceMarginal}};
    } catch (const Error& e) {
      report["equilibrium"] = {{"error", e.what()}};
    }
  }
  if (problem.expectedRate) {
    const double expected = *problem.expectedRate;
    const double tol = problem.rateTolerance * std::abs(expected);
    const double got = trace.decayFit.rate;
    verdicts.push_back({"decayRate", trace.decayFit.valid && std::abs(got - expected) <= tol, got, expected,
                        "tolerance " + io::formatNumber(tol)});
  }
  if (cfg.scheme == FlowScheme::gridFokkerPlanck && linear) {
    verdicts.push_back({"clampedMass", trace.valid, trace.clampedMass, 1e-6, ""});
    const auto& last = std::get<GridMeasure>(trace.snapshots.back());
    const double flat = equilibriumFlatness(last, gridFlowTarget(*linear, cfg.target, last.spec()));
    report["flatness"] = flat;
  }
  io::writeTextAtomic(dir / (prefix + "report.json"), report.dump(2) + "\n");
  return verdicts;
}

namespace {

std::vector<Verdict> runFlowPlan(const FlowPlan& plan, const fs::path& dir) {
  const FlowTrace trace = runFlow(plan.problem.init, plan.problem.config);
  std::vector<Verdict> verdicts = writeFlowOutputs(dir, plan.problem, trace);
  if (plan.flatnessTolerance) {
    const auto& linear = std::get<LinearForwardMap>(plan.problem.config.map);
    const auto& last = std::get<GridMeasure>(trace.snapshots.back());
    const double flat = equilibriumFlatness(last, gridFlowTarget(linear, plan.problem.config.target, last.spec()));
    verdicts.push_back({"equilibriumFlatness", flat < *plan.flatnessTolerance, flat, *plan.flatnessTolerance,
                        "coefficient of variation of state / target"});
  }
  return verdicts;
}

std::vector<Verdict> runContrast(const ContrastPlan& plan, const fs::path& dir) {
  const auto& linear = std::get<LinearForwardMap>(plan.klConfig.map);
  const FlowTrace klTrace = runFlow(plan.init, plan.klConfig);
  const FlowTrace w2Trace = runFlow(plan.init, plan.w2Config);
  writeFlowOutputs(dir, FlowProblem{plan.klConfig, plan.init, std::nullopt, 0.1}, klTrace, "kl_");
  writeFlowOutputs(dir, FlowProblem{plan.w2Config, plan.init, std::nullopt, 0.1}, w2Trace, "w2_");
  const EquilibriumClassification kl = classifyEquilibrium(klTrace, linear, plan.target);
  const EquilibriumClassification w2 = classifyEquilibrium(w2Trace, linear, plan.target);
  const Json summary{{"kl", {{"label", equilibriumLabelName(kl.label)},
                             {"distanceConditional", kl.distanceConditional},
                             {"distanceMarginal", kl.distanceMarginal}}},
                     {"w2", {{"label", equilibriumLabelName(w2.label)},
                             {"distanceConditional", w2.distanceConditional},
                             {"distanceMarginal", w2.distanceMarginal}}}};
  io::writeTextAtomic(dir / "contrast.json", summary.dump(2) + "\n");
  return {{"klFlowLabel", kl.label == EquilibriumLabel::conditional, kl.distanceConditional, 0.5 * kl.distanceMarginal,
           std::string("label ") + equilibriumLabelName(kl.label)},
          {"w2FlowLabel", w2.label == EquilibriumLabel::marginal, w2.distanceMarginal, 0.5 * w2.distanceConditional,
           std::string("label ") + equilibriumLabelName(w2.label)},
          {"klLimitDistance", kl.distanceConditional <= plan.tolerance, kl.distanceConditional, plan.tolerance, ""},
          {"w2LimitDistance", w2.distanceMarginal <= plan.tolerance, w2.distanceMarginal, plan.tolerance, ""}};
}

std::vector<std::string> listFiles(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(fs::relative(entry.path(), dir).generic_string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

void removeStaleArtifacts(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  if (!fs::exists(manifest)) return;
  try {
    const Json old = Json::parse(io::readText(manifest));
    for (const auto& a : old.at("artifacts")) {
      const fs::path p = dir / a.get<std::string>();
      std::error_code ec;
      if (fs::is_regular_file(p, ec)) fs::remove(p, ec);
    }
  } catch (const std::exception&) {
    // An unreadable manifest is simply overwritten.
  }
}

}  // namespace

std::vector<double> logSpace(double lower, double upper, int n) {
  require(lower > 0.0 && upper > lower && n >= 2, ErrorCode::InvalidArgument, "log space needs 0 < lower < upper, n >= 2");
  std::vector<double> out(static_cast<std::size_t>(n));
  const double a = std::log10(lower);
  const double b = std::log10(upper);
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = std::pow(10.0, a + (b - a) * i / (n - 1));
  out.front() = lower;
  out.back() = upper;
  return out;
}

Json computeDistance(const Measure& mu, const Measure& nu, const std::string& metric,
                     std::optional<double> sinkhornEpsilon) {
  Json out{{"metric", metric}};
  if (metric == "kl" || metric == "chi2" || metric == "hellinger") {
    const FDivergenceSpec spec = metric == "kl"     ? FDivergenceSpec::kl()
                                 : metric == "chi2" ? FDivergenceSpec::chiSquared()
                                                    : FDivergenceSpec::totalVariationSquaredGenerator();
    out["value"] = fDivergence(spec, mu, nu);
    return out;
  }
  require(metric == "w2" || metric == "w1", ErrorCode::InvalidArgument, "unknown metric " + metric);
  const double p = metric == "w2" ? 2.0 : 1.0;
  if (sinkhornEpsilon) {
    const auto* a = std::get_if<ParticleMeasure>(&mu);
    const auto* b = std::get_if<ParticleMeasure>(&nu);
    require(a && b, ErrorCode::UnsupportedCarrier, "sinkhorn needs particle measures");
    SinkhornOptions opts;
    opts.epsilon = *sinkhornEpsilon;
    const TransportResult r = sinkhorn(*a, *b, p, opts);
    out["value"] = r.value;
    out["iterations"] = r.iterations;
    out["converged"] = r.converged;
    return out;
  }
  const auto* a = std::get_if<ParticleMeasure>(&mu);
  const auto* b = std::get_if<ParticleMeasure>(&nu);
  if (a && b && (a->dim() > 1 || b->dim() > 1)) {
    const TransportResult r = wassersteinExact(*a, *b, p);
    out["value"] = r.value;
    out["iterations"] = r.iterations;
    return out;
  }
  out["value"] = wassersteinDistance(mu, nu, p);
  return out;
}

std::string stabilityCsv(const std::vector<StabilityReport>& reports) {
  std::vector<std::vector<double>> rows;
  for (const auto& r : reports) {
    rows.push_back({r.level, r.inputPerturbation, r.outputDistance, r.bound, r.satisfied ? 1.0 : 0.0});
  }
  return io::csvText({"perturbation", "input_distance", "output_distance", "bound", "satisfied"}, rows);
}

SweepResult regularizeSweep(const LinearForwardMap& map, const Measure& truth, const Measure& data,
                            const std::vector<double>& alphas) {
  require(!alphas.empty(), ErrorCode::InvalidArgument, "sweep needs at least one alpha");
  SweepResult out;
  const Measure canonical = solveW2Tikhonov(map, truth, 0.0).solution;
  out.noiseW2 = wassersteinDistance(truth, data);
  out.truthSecondMoment = secondMoment(truth);
  out.balanceAlpha = out.truthSecondMoment > 0.0 ? balanceAlpha(map, out.noiseW2, out.truthSecondMoment) : 0.0;
  double best = kInf;
  for (double alpha : alphas) {
    require(alpha > 0.0, ErrorCode::InvalidArgument, "sweep alphas must be positive");
    const TikhonovW2Solution sol = solveW2Tikhonov(map, data, alpha, out.noiseW2, out.truthSecondMoment);
    SweepRow row;
    row.alpha = alpha;
    row.errorW2 = wassersteinDistance(sol.solution, canonical);
    row.noiseTerm = sol.bound->noiseTerm;
    row.regTerm = sol.bound->regTerm;
    row.bound = sol.bound->total;
    if (row.errorW2 < best) {
      best = row.errorW2;
      out.argminAlpha = alpha;
    }
    out.rows.push_back(row);
  }
  return out;
}

std::string sweepCsv(const SweepResult& sweep) {
  std::vector<std::vector<double>> rows;
  for (const auto& r : sweep.rows) rows.push_back({r.alpha, r.errorW2, r.noiseTerm, r.regTerm, r.bound});
  return io::csvText({"alpha", "error_w2", "noise_term", "reg_term", "bound"}, rows);
}

ExperimentConfig parseExperimentConfig(const Json& j, const fs::path& baseDir) {
  allowKeys(j, "config", {"name", "kind", "seed", "parameters", "outputDir"});
  ExperimentConfig cfg;
  cfg.baseDir = baseDir;
  cfg.source = j;
  const Json& name = need(j, "config", "name");
  if (!name.is_string() || name.get<std::string>().empty()) configError("name", "must be a nonempty string");
  cfg.name = name.get<std::string>();
  for (char c : cfg.name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) {
      configError("name", "may only contain letters, digits, '_', '-' and '.'");
    }
  }
  if (cfg.name == "." || cfg.name == "..") configError("name", "must name a directory");
  const std::string kind = choice(need(j, "config", "kind"), "kind",
                                  {"stability", "regularizeSweep", "flowConvergence", "equilibriumContrast", "distance",
                                   "invert"});
  if (kind == "stability") cfg.kind = ExperimentKind::stability;
  if (kind == "regularizeSweep") cfg.kind = ExperimentKind::regularizeSweep;
  if (kind == "flowConvergence") cfg.kind = ExperimentKind::flowConvergence;
  if (kind == "equilibriumContrast") cfg.kind = ExperimentKind::equilibriumContrast;
  if (kind == "distance") cfg.kind = ExperimentKind::distance;
  if (kind == "invert") cfg.kind = ExperimentKind::invert;
  if (j.contains("seed")) {
    const Json& seed = j.at("seed");
    if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<long long>() >= 0)) {
      configError("seed", "must be a nonnegative 64-bit integer");
    }
    cfg.seed = seed.get<std::uint64_t>();
  }
  cfg.parameters = need(j, "config", "parameters");
  requireObject(cfg.parameters, "parameters");
  if (j.contains("outputDir")) {
    const Json& out = j.at("outputDir");
    if (!out.is_string() || out.get<std::string>().empty()) configError("outputDir", "must be a nonempty path");
    cfg.outputDir = out.get<std::string>();
  } else {
    cfg.outputDir = fs::path("runs") / cfg.name;
  }
  return cfg;
}

ExperimentConfig loadExperimentConfig(const fs::path& path) {
  std::string text;
  try {
    text = io::readText(path);
  } catch (const Error& e) {
    configError(path.string(), e.what());
  }
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    configError(path.string(), std::string("invalid JSON: ") + e.what());
  }
  return parseExperimentConfig(j, path.parent_path());
}

void validateExperimentConfig(const ExperimentConfig& cfg) { buildPlan(cfg); }

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::string configHash(const Json& config) {
  char buffer[17];
  std::snprintf(buffer, sizeof(buffer), "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buffer;
}

Json versionRecord() {
  return Json{{"stochinv", STOCHINV_VERSION},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
              {"compiler", __VERSION__},
              {"cplusplus", __cplusplus}};
}

Json toJson(const RunManifest& manifest) {
  Json verdicts = Json::array();
  for (const auto& v : manifest.verdicts) {
    Json item{{"criterion", v.criterion}, {"pass", v.pass}, {"value", v.value}, {"bound", v.bound}};
    if (!v.note.empty()) item["note"] = v.note;
    verdicts.push_back(std::move(item));
  }
  return Json{{"configHash", manifest.configHash},
              {"versions", manifest.versions},
              {"wallClockSeconds", manifest.wallClockSeconds},
              {"artifacts", manifest.artifacts},
              {"verdicts", verdicts},
              {"numericalError", manifest.numericalError}};
}

RunManifest runExperiment(const ExperimentConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const Plan plan = buildPlan(cfg);
  RunManifest manifest;
  Json hashed = cfg.source;
  hashed["seed"] = cfg.seed;
  manifest.configHash = configHash(hashed);
  manifest.versions = versionRecord();

  const fs::path dir = cfg.outputDir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(fs::is_directory(dir), ErrorCode::IoError, "cannot create output directory " + dir.string());
  removeStaleArtifacts(dir);

  std::vector<std::string> produced;
  try {
    manifest.verdicts = std::visit(
        [&](const auto& p) -> std::vector<Verdict> {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, DistancePlan>) return runDistance(p, dir, produced);
          if constexpr (std::is_same_v<T, InvertPlan>) return runInvert(p, dir, produced);
          if constexpr (std::is_same_v<T, StabilityPlan>) return runStability(p, dir, produced);
          if constexpr (std::is_same_v<T, SweepPlan>) return runSweep(p, dir, produced);
          if constexpr (std::is_same_v<T, FlowPlan>) return runFlowPlan(p, dir);
          if constexpr (std::is_same_v<T, ContrastPlan>) return runContrast(p, dir);
        },
        plan);
  } catch (const std::exception& e) {
    manifest.numericalError = true;
    manifest.verdicts.push_back({"execution", false, kNan, kNan, e.what()});
  }

  manifest.wallClockSeconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  manifest.artifacts = listFiles(dir);
  if (std::find(manifest.artifacts.begin(), manifest.artifacts.end(), "manifest.json") == manifest.artifacts.end()) {
    manifest.artifacts.push_back("manifest.json");
    std::sort(manifest.artifacts.begin(), manifest.artifacts.end());
  }
  Json persisted = toJson(manifest);
  persisted["name"] = cfg.name;
  persisted["kind"] = experimentKindName(cfg.kind);
  persisted["seed"] = cfg.seed;
  io::writeTextAtomic(dir / "manifest.json", persisted.dump(2) + "\n");
  return manifest;
}

int exitCode(const RunManifest& manifest) {
  if (manifest.numericalError) return 3;
  for (const auto& v : manifest.verdicts) {
    if (!v.pass) return 1;
  }
  return 0;
}

std::vector<BatchEntry> runBatch(const fs::path& dir, int jobs, const fs::path& outRoot) {
  require(fs::is_directory(dir), ErrorCode::ConfigError, dir.string() + ": not a directory");
  require(jobs >= 1, ErrorCode::ConfigError, "--jobs must be >= 1");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<BatchEntry> entries(files.size());
  std::vector<std::optional<ExperimentConfig>> configs(files.size());
  std::map<std::string, std::size_t> claimed;
  for (std::size_t i = 0; i < files.size(); ++i) {
    entries[i].config = files[i];
    try {
      ExperimentConfig cfg = loadExperimentConfig(files[i]);
      if (!outRoot.empty()) cfg.outputDir = outRoot / cfg.name;
      const std::string key = fs::weakly_canonical(cfg.outputDir).string();
      if (claimed.count(key)) {
        configError("outputDir", "shared with " + files[claimed[key]].filename().string());
      }
      claimed[key] = i;
      configs[i] = std::move(cfg);
    } catch (const Error& e) {
      entries[i].exitCode = 2;
      entries[i].error = e.what();
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < files.size(); i = next++) {
      if (!configs[i]) continue;
      try {
        entries[i].manifest = runExperiment(*configs[i]);
        entries[i].exitCode = exitCode(*entries[i].manifest);
      } catch (const Error& e) {
        entries[i].exitCode = e.code() == ErrorCode::ConfigError || e.code() == ErrorCode::SchemaError ? 2 : 3;
        entries[i].error = e.what();
      } catch (const std::exception& e) {
        entries[i].exitCode = 3;
        entries[i].error = e.what();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(files.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return entries;
}

}  // namespace stochinv
