#include <CLI11.hpp>
#include <iostream>
#include <sstream>

#include "stochinv/error.hpp"
#include "stochinv/experiment.hpp"
#include "stochinv/plot.hpp"

namespace {

using namespace stochinv;
using io::Json;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
};

int errorExit(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroMass:
    case ErrorCode::DegenerateRestriction:
    case ErrorCode::DegenerateImage:
    case ErrorCode::NonFiniteVelocity:
      return 3;
    default:
      return 2;
  }
}

void say(const Globals& g, const std::string& text) {
  if (!g.quiet) std::cout << text << "\n";
}

std::vector<double> parseList(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorCode::ConfigError, flag + ": \"" + item + "\" is not a number");
    }
  }
  require(!out.empty(), ErrorCode::ConfigError, flag + ": empty list");
  return out;
}

ForwardMap loadMap(const std::string& path) { return LinearForwardMap(io::readMatrix(path)); }

void writeOrPrint(const Globals& g, const std::string& text) {
  if (g.out.empty()) {
    say(g, text.back() == '\n' ? text.substr(0, text.size() - 1) : text);
    return;
  }
  io::writeTextAtomic(g.out, text);
  say(g, g.out);
}

int verdictExit(const Globals& g, const std::vector<Verdict>& verdicts) {
  int code = 0;
  for (const auto& v : verdicts) {
    say(g, std::string(v.pass ? "PASS " : "FAIL ") + v.criterion + " value=" + io::formatNumber(v.value) +
               " bound=" + io::formatNumber(v.bound));
    if (!v.pass) code = 1;
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic inverse problems: transport, regularized inversion and gradient flows"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seedValue = 0;
  auto* seedOpt = app.add_option("--seed", seedValue, "Seed for all sampling");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_flag("--quiet", g.quiet, "Suppress stdout");

  std::function<int()> action;

  // distance
  auto* distance = app.add_subcommand("distance", "Distance or divergence between two measures");
  std::string metric = "w2", muPath, nuPath;
  std::optional<double> sinkhornEps;
  distance->add_option("--metric", metric)->check(CLI::IsMember({"w2", "w1", "kl", "chi2", "hellinger"}));
  distance->add_option("--mu", muPath)->required();
  distance->add_option("--nu", nuPath)->required();
  distance->add_option("--sinkhorn-eps", sinkhornEps)->check(CLI::PositiveNumber);
  distance->callback([&] {
    action = [&] {
      const Json r = computeDistance(io::readMeasure(muPath), io::readMeasure(nuPath), metric, sinkhornEps);
      writeOrPrint(g, r.dump() + "\n");
      return 0;
    };
  });

  // invert
  auto* invert = app.add_subcommand("invert", "Direct inversion G^-1#data");
  std::string mapPath, dataPath;
  invert->add_option("--map", mapPath)->required();
  invert->add_option("--data", dataPath)->required();
  invert->callback([&] {
    action = [&] {
      require(!g.out.empty(), ErrorCode::ConfigError, "--out: required");
      const Measure sol = directInvert(loadMap(mapPath), io::readMeasure(dataPath));
      io::writeMeasure(g.out, sol);
      say(g, g.out);
      return 0;
    };
  });

  // stability
  auto* stability = app.add_subcommand("stability", "Perturbation sweep of solution-set distances");
  std::string stabilityMetric = "w2", perturb;
  stability->add_option("--map", mapPath)->required();
  stability->add_option("--data", dataPath)->required();
  stability->add_option("--metric", stabilityMetric)->check(CLI::IsMember({"w2", "kl", "chi2", "hellinger"}));
  stability->add_option("--perturb", perturb)->required();
  stability->callback([&] {
    action = [&] {
      const LinearForwardMap map(io::readMatrix(mapPath));
      const Measure data = io::readMeasure(dataPath);
      const auto* gauss = std::get_if<GaussianMeasure>(&data);
      require(gauss, ErrorCode::UnsupportedCarrier, "--data: stability sweeps need a Gaussian");
      SweepOptions opts;
      StabilityMetric m = StabilityMetric::W2;
      if (stabilityMetric != "w2") {
        m = StabilityMetric::fDivergence;
        opts.divergence = stabilityMetric == "kl"     ? FDivergenceSpec::kl()
                          : stabilityMetric == "chi2" ? FDivergenceSpec::chiSquared()
                                                      : FDivergenceSpec::totalVariationSquaredGenerator();
      }
      const auto reports = stabilitySweep(map, *gauss, parseList(perturb, "--perturb"), m, opts);
      writeOrPrint(g, stabilityCsv(reports));
      bool ok = true;
      for (const auto& r : reports) ok = ok && r.satisfied;
      return ok ? 0 : 1;
    };
  });

  // regularize
  auto* regularize = app.add_subcommand("regularize", "Regularized inversion (KL-KL or W2-W2)");
  std::string pair = "w2", priorPath, truthPath;
  double alpha = 0.5;
  std::optional<double> noiseW2;
  regularize->add_option("--pair", pair)->check(CLI::IsMember({"kl", "w2"}));
  regularize->add_option("--map", mapPath)->required();
  regularize->add_option("--data", dataPath)->required();
  regularize->add_option("--prior", priorPath);
  regularize->add_option("--alpha", alpha)->check(CLI::NonNegativeNumber);
  regularize->add_option("--truth", truthPath);
  regularize->add_option("--noise-w2", noiseW2)->check(CLI::NonNegativeNumber);
  regularize->callback([&] {
    action = [&] {
      require(!g.out.empty(), ErrorCode::ConfigError, "--out: required");
      const fs::path dir = g.out;
      fs::create_directories(dir);
      const LinearForwardMap map(io::readMatrix(mapPath));
      const Measure data = io::readMeasure(dataPath);
      Json report{{"pair", pair}, {"alpha", alpha}};
      Measure solution = data;
      if (pair == "w2") {
        std::optional<double> moment;
        if (!truthPath.empty()) {
          const Measure truth = io::readMeasure(truthPath);
          moment = secondMoment(truth);
          if (!noiseW2) noiseW2 = wassersteinDistance(truth, data);
        }
        const TikhonovW2Solution sol = solveW2Tikhonov(map, data, alpha, noiseW2, moment);
        solution = sol.solution;
        if (sol.bound) {
          report["bound"] = {{"noiseTerm", sol.bound->noiseTerm},
                             {"regTerm", sol.bound->regTerm},
                             {"total", sol.bound->total},
                             {"sharpTotal", sol.bound->sharpTotal}};
          report["noiseW2"] = *noiseW2;
        }
      } else {
        require(!priorPath.empty(), ErrorCode::ConfigError, "--prior: required for --pair kl");
        const Measure prior = io::readMeasure(priorPath);
        const auto* gd = std::get_if<GaussianMeasure>(&data);
        const auto* gp = std::get_if<GaussianMeasure>(&prior);
        EntropyRegularizedSolution sol = [&] {
          if (gd && gp) {
            std::optional<GaussianMeasure> truth;
            if (!truthPath.empty()) truth = std::get<GaussianMeasure>(io::readMeasure(truthPath));
            return solveEntropyEntropyGaussian(map, *gd, *gp, alpha, truth);
          }
          const auto* grd = std::get_if<GridMeasure>(&data);
          const auto* grp = std::get_if<GridMeasure>(&prior);
          require(grd && grp, ErrorCode::UnsupportedCarrier, "--pair kl needs grid (or Gaussian) data and prior");
          std::optional<GridMeasure> truth;
          if (!truthPath.empty()) truth = std::get<GridMeasure>(io::readMeasure(truthPath));
          return solveEntropyEntropy(map, *grd, *grp, alpha, truth);
        }();
        solution = sol.solution;
        report["normalizationC"] = sol.normalizationC;
        if (sol.errorTerms) {
          report["errorTerms"] = {{"klDataTerm", sol.errorTerms->klDataTerm},
                                  {"klPriorTerm", sol.errorTerms->klPriorTerm},
                                  {"logC", sol.errorTerms->logC}};
        }
      }
      const std::string file = std::holds_alternative<ParticleMeasure>(solution) ? "solution.csv" : "solution.json";
      io::writeMeasure(dir / file, solution);
      report["solution"] = file;
      io::writeTextAtomic(dir / "report.json", report.dump(2) + "\n");
      say(g, report.dump());
      return 0;
    };
  });

  // regularize-sweep
  auto* sweep = app.add_subcommand("regularize-sweep", "W2-W2 error and bound over a ladder of alphas");
  std::string alphas;
  sweep->add_option("--map", mapPath)->required();
  sweep->add_option("--data", dataPath)->required();
  sweep->add_option("--truth", truthPath)->required();
  sweep->add_option("--alphas", alphas)->required();
  sweep->callback([&] {
    action = [&] {
      const LinearForwardMap map(io::readMatrix(mapPath));
      const SweepResult r =
          regularizeSweep(map, io::readMeasure(truthPath), io::readMeasure(dataPath), parseList(alphas, "--alphas"));
      writeOrPrint(g, sweepCsv(r));
      return 0;
    };
  });

  // flow
  auto* flow = app.add_subcommand("flow", "Gradient flow toward the data distribution");
  std::string flowConfig;
  flow->add_option("--config", flowConfig)->required();
  flow->callback([&] {
    action = [&] {
      require(!g.out.empty(), ErrorCode::ConfigError, "--out: required");
      const fs::path cfgPath = flowConfig;
      Json j;
      try {
        j = Json::parse(io::readText(cfgPath));
      } catch (const Json::parse_error& e) {
        fail(ErrorCode::ConfigError, flowConfig + ": invalid JSON: " + e.what());
      }
      std::uint64_t seed = g.seed.value_or(0);
      if (j.is_object() && j.contains("kind")) {
        const ExperimentConfig cfg = parseExperimentConfig(j, cfgPath.parent_path());
        require(cfg.kind == ExperimentKind::flowConvergence, ErrorCode::ConfigError, "kind: must be flowConvergence");
        if (!g.seed) seed = cfg.seed;
        j = cfg.parameters;
      }
      if (j.is_object()) j.erase("flatnessTolerance");
      const FlowProblem problem = parseFlowProblem(j, cfgPath.parent_path(), seed);
      const FlowTrace trace = runFlow(problem.init, problem.config);
      fs::create_directories(g.out);
      return verdictExit(g, writeFlowOutputs(g.out, problem, trace));
    };
  });

  // experiment
  auto* experiment = app.add_subcommand("experiment", "Config-driven experiments");
  experiment->require_subcommand(1);
  auto* run = experiment->add_subcommand("run", "Run one experiment config");
  std::string configPath;
  run->add_option("config", configPath)->required();
  run->callback([&] {
    action = [&] {
      ExperimentConfig cfg = loadExperimentConfig(configPath);
      if (g.seed) cfg.seed = *g.seed;
      if (!g.out.empty()) cfg.outputDir = g.out;
      const RunManifest m = runExperiment(cfg);
      const int code = exitCode(m);
      verdictExit(g, m.verdicts);
      say(g, "manifest " + (cfg.outputDir / "manifest.json").string());
      return code;
    };
  });
  auto* batch = experiment->add_subcommand("batch", "Run every config in a directory");
  std::string batchDir;
  int jobs = 1;
  batch->add_option("dir", batchDir)->required();
  batch->add_option("--jobs", jobs)->check(CLI::PositiveNumber);
  batch->callback([&] {
    action = [&] {
      const auto entries = runBatch(batchDir, jobs, g.out);
      int code = 0;
      for (const auto& e : entries) {
        say(g, std::to_string(e.exitCode) + " " + e.config.filename().string() + (e.error.empty() ? "" : " " + e.error));
        code = std::max(code, e.exitCode);
      }
      return code;
    };
  });

  // plot
  auto* plot = app.add_subcommand("plot", "Render a CSV (or grid JSON) as SVG");
  std::string plotKind, plotInput;
  plot->add_option("--kind", plotKind)->required()->check(
      CLI::IsMember({"decayCurve", "lCurve", "stabilityRatio", "densityHeatmap"}));
  plot->add_option("--input", plotInput)->required();
  plot->callback([&] {
    action = [&] {
      require(!g.out.empty(), ErrorCode::ConfigError, "--out: required");
      say(g, emitPlot(plotInput, parsePlotKind(plotKind), g.out).string());
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (seedOpt->count() > 0) g.seed = seedValue;
  try {
    return action ? action() : 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return errorExit(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
