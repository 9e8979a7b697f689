#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <set>
#include <sstream>

#include "config_fuzz.hpp"
#include "oracles.hpp"
#include "stochinv/error.hpp"
#include "stochinv/experiment.hpp"
#include "stochinv/plot.hpp"

using namespace stochinv;
using io::Json;
using fuzz::baseConfigs;
using fuzz::mutate;

namespace {

fs::path scratch(const std::string& tag) {
  static std::atomic<int> counter{0};
  const fs::path dir = fs::temp_directory_path() / ("stochinv_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                                                    std::to_string(counter++));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::set<std::string> filesUnder(const fs::path& root) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.insert(fs::relative(e.path(), root).generic_string());
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig configIn(const Json& j, const fs::path& out) {
  ExperimentConfig cfg = parseExperimentConfig(j);
  cfg.outputDir = out;
  return cfg;
}

// Balanced-tag check of an SVG document.
bool wellFormed(const std::string& xml) {
  std::vector<std::string> stack;
  std::size_t pos = 0;
  bool sawRoot = false;
  while ((pos = xml.find('<', pos)) != std::string::npos) {
    const std::size_t end = xml.find('>', pos);
    if (end == std::string::npos) return false;
    std::string tag = xml.substr(pos + 1, end - pos - 1);
    pos = end + 1;
    if (tag.empty()) return false;
    if (tag[0] == '?' || tag[0] == '!') continue;
    if (tag.back() == '/') continue;
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
      continue;
    }
    const std::string name = tag.substr(0, tag.find_first_of(" \t\n"));
    if (stack.empty()) {
      if (sawRoot) return false;
      sawRoot = true;
    }
    stack.push_back(name);
  }
  return sawRoot && stack.empty();
}

std::string attribute(const std::string& xml, std::size_t from, const std::string& name) {
  const std::size_t at = xml.find(name + "=\"", from);
  if (at == std::string::npos) return {};
  const std::size_t start = at + name.size() + 2;
  return xml.substr(start, xml.find('"', start) - start);
}

}  // namespace

TEST_CASE("number formatting round-trips") {
  CounterRng rng(601);
  for (int i = 0; i < 200; ++i) {
    const double x = (rng.uniform() - 0.5) * std::pow(10.0, static_cast<int>(rng.next() % 40) - 20);
    CHECK(std::stod(io::formatNumber(x)) == x);
  }
  CHECK(io::formatNumber(0.5) == "0.5");
}

TEST_CASE("measure persistence round-trips") {
  const fs::path dir = scratch("io");
  CounterRng rng(602);
  const ParticleMeasure p(oracle::gaussianMatrix(rng, 5, 2), Vector::Constant(5, 0.2));
  io::writeMeasure(dir / "p.csv", p);
  const ParticleMeasure back = std::get<ParticleMeasure>(io::readMeasure(dir / "p.csv"));
  CHECK(back.points() == p.points());
  CHECK(back.weights() == p.weights());

  const GaussianMeasure g(Vector::Constant(2, 0.3), oracle::randomSpd(rng, 2));
  io::writeMeasure(dir / "g.json", g);
  const GaussianMeasure gb = std::get<GaussianMeasure>(io::readMeasure(dir / "g.json"));
  CHECK(gb.mean() == g.mean());
  CHECK(gb.cov() == g.cov());

  const GridMeasure grid = discretize(GaussianMeasure(Vector::Zero(1), Matrix::Identity(1, 1)), uniformGrid(-4, 4, 32));
  io::writeMeasure(dir / "grid.json", grid);
  const GridMeasure gr = std::get<GridMeasure>(io::readMeasure(dir / "grid.json"));
  CHECK(gr.spec() == grid.spec());
  CHECK(gr.density() == grid.density());

  std::ofstream(dir / "bad.csv") << "x1,weight\n1.0\n";
  CHECK_THROWS_AS(io::readMeasure(dir / "bad.csv"), Error);
  std::ofstream(dir / "bad.json") << "{\"mean\": [0], ";
  CHECK_THROWS_AS(io::readMeasure(dir / "bad.json"), Error);
  fs::remove_all(dir);
}

TEST_CASE("every base config validates and runs") {
  for (const Json& j : baseConfigs()) {
    CAPTURE(j.dump());
    const fs::path out = scratch("run");
    const ExperimentConfig cfg = configIn(j, out);
    CHECK_NOTHROW(validateExperimentConfig(cfg));
    const RunManifest m = runExperiment(cfg);
    CHECK_FALSE(m.numericalError);
    CHECK_FALSE(m.verdicts.empty());
    for (const auto& v : m.verdicts) {
      CAPTURE(v.criterion);
      CAPTURE(v.note);
      CHECK(v.pass);
    }
    CHECK(exitCode(m) == 0);
    CHECK(m.configHash.size() == 16);
    Json seeded = j;
    seeded["seed"] = cfg.seed;
    CHECK(m.configHash == configHash(seeded));

    // Every produced file appears in the manifest.
    std::set<std::string> listed(m.artifacts.begin(), m.artifacts.end());
    listed.insert("manifest.json");
    CHECK(filesUnder(out) == listed);
    CHECK(std::is_sorted(m.artifacts.begin(), m.artifacts.end()));
    const Json persisted = Json::parse(slurp(out / "manifest.json"));
    CHECK(persisted.at("configHash") == m.configHash);
    fs::remove_all(out);
  }
}

TEST_CASE("experiment verdicts and exit codes") {
  Json j = baseConfigs()[0];
  j["parameters"]["expect"] = 2.0;
  const fs::path out = scratch("verdict");
  const RunManifest fail = runExperiment(configIn(j, out));
  CHECK(exitCode(fail) == 1);

  Json singular = baseConfigs()[1];
  singular["parameters"]["map"]["matrix"] = Json::array({Json::array({1.0, 2.0}), Json::array({2.0, 4.0})});
  const RunManifest bad = runExperiment(configIn(singular, out / "singular"));
  CHECK(bad.numericalError);
  CHECK(exitCode(bad) == 3);
  REQUIRE_FALSE(bad.verdicts.empty());
  CHECK(bad.verdicts.back().criterion == "execution");
  CHECK_FALSE(bad.verdicts.back().pass);

  Json same = baseConfigs()[0];
  same["parameters"]["nu"] = same["parameters"]["mu"];
  same["parameters"]["expect"] = 0.0;
  CHECK(exitCode(runExperiment(configIn(same, out / "same"))) == 0);
  fs::remove_all(out);
}

TEST_CASE("seeded runs are bitwise reproducible") {
  for (const Json& j : {baseConfigs()[1], baseConfigs()[3], baseConfigs()[4]}) {
    const fs::path a = scratch("det"), b = scratch("det");
    const RunManifest ma = runExperiment(configIn(j, a));
    const RunManifest mb = runExperiment(configIn(j, b));
    CHECK(ma.artifacts == mb.artifacts);
    int csvCount = 0;
    for (const auto& f : ma.artifacts) {
      if (fs::path(f).extension() != ".csv") continue;
      ++csvCount;
      CAPTURE(f);
      CHECK(slurp(a / f) == slurp(b / f));
    }
    CHECK(csvCount > 0);
    fs::remove_all(a);
    fs::remove_all(b);
  }

  Json reseeded = baseConfigs()[1];
  const fs::path a = scratch("seed"), b = scratch("seed");
  runExperiment(configIn(reseeded, a));
  reseeded["seed"] = 10;
  runExperiment(configIn(reseeded, b));
  CHECK(slurp(a / "solution.csv") != slurp(b / "solution.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("sweep output matches the variational oracle") {
  const fs::path out = scratch("sweep");
  runExperiment(configIn(baseConfigs()[3], out));
  const io::CsvTable t = io::readCsv(out / "sweep.csv");
  CHECK(t.header == std::vector<std::string>{"alpha", "error_w2", "noise_term", "reg_term", "bound"});
  REQUIRE(t.rows.size() == 12);
  const std::vector<double> alphas = logSpace(1e-3, 10.0, 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(t.rows[i][0] == doctest::Approx(alphas[i]).epsilon(1e-12));
    CHECK(t.rows[i][4] == doctest::Approx(t.rows[i][2] + t.rows[i][3]).epsilon(1e-12));
  }
  CHECK(std::log10(alphas[1] / alphas[0]) == doctest::Approx(4.0 / 11.0));
  fs::remove_all(out);
}

TEST_CASE("batch runs every config") {
  const fs::path dir = scratch("batch");
  const auto bases = baseConfigs();
  for (std::size_t i : {0u, 2u, 3u}) std::ofstream(dir / (bases[i]["name"].get<std::string>() + ".json")) << bases[i].dump(2);
  const fs::path out = scratch("batchout");
  const auto entries = runBatch(dir, 3, out);
  REQUIRE(entries.size() == 3);
  for (const auto& e : entries) {
    CAPTURE(e.error);
    CHECK(e.exitCode == 0);
    REQUIRE(e.manifest.has_value());
  }
  CHECK(fs::exists(out / "dist" / "manifest.json"));
  CHECK(fs::exists(out / "stab" / "stability.csv"));

  Json dup = bases[0];
  std::ofstream(dir / "dist_again.json") << dup.dump();
  const auto clash = runBatch(dir, 2, out);
  REQUIRE(clash.size() == 4);
  CHECK(clash[0].exitCode == 0);
  CHECK(clash[1].exitCode == 2);
  CHECK(clash[1].error.find("outputDir") != std::string::npos);
  CHECK_FALSE(clash[1].manifest.has_value());
  fs::remove_all(dir);
  fs::remove_all(out);
}

TEST_CASE("config errors name the field") {
  auto messageOf = [](const Json& j) -> std::string {
    try {
      validateExperimentConfig(parseExperimentConfig(j));
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ConfigError);
      return e.what();
    }
    return "";
  };
  Json j = baseConfigs()[4];
  j["parameters"]["dt"] = -1.0;
  CHECK(messageOf(j).find("parameters.dt") != std::string::npos);
  j = baseConfigs()[4];
  j["parameters"]["dt"] = 0.1;
  CHECK(messageOf(j).find("CFL") != std::string::npos);
  j = baseConfigs()[1];
  j["parameters"]["data"]["n"] = 100000000;
  CHECK(messageOf(j).find("parameters.data.n") != std::string::npos);
  j = baseConfigs()[2];
  j["parameters"]["map"]["matrix"] = "eye";
  CHECK(messageOf(j).find("parameters.map.matrix") != std::string::npos);
  j = baseConfigs()[0];
  j["parameters"]["mu"]["extra"] = 1;
  CHECK(messageOf(j).find("parameters.mu.extra") != std::string::npos);
  j = baseConfigs()[5];
  j["parameters"]["stateDensity"] = "kde";
  CHECK(messageOf(j).find("bandwidth") != std::string::npos);
}

TEST_CASE("fuzzed configs fail with structured errors") {
  const auto bases = baseConfigs();
  CounterRng rng(603);
  int configErrors = 0;
  for (int i = 0; i < 200; ++i) {
    const Json mutated = mutate(bases[static_cast<std::size_t>(i) % bases.size()], rng);
    CAPTURE(mutated.dump());
    try {
      validateExperimentConfig(parseExperimentConfig(mutated));
      FAIL("mutation accepted");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ConfigError);
      configErrors += e.code() == ErrorCode::ConfigError;
    } catch (const std::exception& e) {
      FAIL("unstructured exception: " << e.what());
    }
  }
  CHECK(configErrors == 200);
}

TEST_CASE("plot schema errors") {
  io::CsvTable empty;
  empty.header = {"t", "kl"};
  try {
    renderPlot(empty, PlotKind::decayCurve);
    FAIL("expected SchemaError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SchemaError);
  }
  io::CsvTable partial;
  partial.header = {"alpha"};
  partial.rows = {{0.1}};
  try {
    renderPlot(partial, PlotKind::lCurve);
    FAIL("expected SchemaError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SchemaError);
    CHECK(std::string(e.what()).find("error_w2") != std::string::npos);
  }
  CHECK(parsePlotKind("decayCurve") == PlotKind::decayCurve);
  CHECK_THROWS_AS(parsePlotKind("pie"), Error);
}

TEST_CASE("decay curve is a straight line on log axes") {
  io::CsvTable t;
  t.header = {"t", "kl", "w2"};
  for (int i = 0; i <= 40; ++i) {
    const double time = 0.05 * i;
    t.rows.push_back({time, 2.0 * std::exp(-2.0 * time), 0.0});
  }
  const std::string svg = renderPlot(t, PlotKind::decayCurve);
  CHECK(wellFormed(svg));
  CHECK(svg.find("data-scale=\"log\"") != std::string::npos);
  const std::size_t line = svg.find("class=\"series\"");
  REQUIRE(line != std::string::npos);
  const std::size_t open = svg.rfind('<', line);
  std::istringstream points(attribute(svg, open, "points"));
  std::vector<std::pair<double, double>> xy;
  std::string pair;
  while (points >> pair) {
    const auto comma = pair.find(',');
    xy.emplace_back(std::stod(pair.substr(0, comma)), std::stod(pair.substr(comma + 1)));
  }
  REQUIRE(xy.size() == t.rows.size());
  const double slope = (xy.back().second - xy.front().second) / (xy.back().first - xy.front().first);
  for (const auto& [x, y] : xy) CHECK(std::abs(xy.front().second + slope * (x - xy.front().first) - y) < 0.05);

  const fs::path dir = scratch("plot");
  std::ofstream(dir / "trace.csv") << io::csvText(t.header, t.rows);
  const fs::path svgPath = emitPlot(dir / "trace.csv", PlotKind::decayCurve, dir / "decay.svg");
  CHECK(fs::file_size(svgPath) > 0);
  CHECK(wellFormed(slurp(svgPath)));
  fs::remove_all(dir);
}

TEST_CASE("heatmap color bounds equal the data extremes") {
  const GridMeasure grid = discretize(GaussianMeasure(Vector::Zero(2), Matrix::Identity(2, 2)),
                                      uniformGrid(Vector::Constant(2, -3.0), Vector::Constant(2, 3.0), 20));
  const std::string svg = renderHeatmap(grid);
  CHECK(wellFormed(svg));
  const std::size_t bar = svg.find("id=\"colorbar\"");
  REQUIRE(bar != std::string::npos);
  const std::size_t open = svg.rfind('<', bar);
  CHECK(std::stod(attribute(svg, open, "data-min")) == grid.density().minCoeff());
  CHECK(std::stod(attribute(svg, open, "data-max")) == grid.density().maxCoeff());

  const fs::path dir = scratch("heat");
  io::writeMeasure(dir / "grid.json", grid);
  CHECK(wellFormed(slurp(emitPlot(dir / "grid.json", PlotKind::densityHeatmap, dir / "heat.svg"))));
  fs::remove_all(dir);
}

TEST_CASE("stability and L-curve plots render") {
  const std::vector<StabilityReport> reports =
      stabilitySweep(LinearForwardMap((Matrix(2, 2) << 1.0, 0.0, 0.0, 0.1).finished()),
                     GaussianMeasure(Vector::Zero(2), Matrix::Identity(2, 2)), {0.1, 0.2, 0.4}, StabilityMetric::W2);
  const fs::path dir = scratch("stabplot");
  std::ofstream(dir / "stability.csv") << stabilityCsv(reports);
  const io::CsvTable t = io::readCsv(dir / "stability.csv");
  CHECK(t.header ==
        std::vector<std::string>{"perturbation", "input_distance", "output_distance", "bound", "satisfied"});
  CHECK(wellFormed(renderPlot(t, PlotKind::stabilityRatio)));

  io::CsvTable l;
  l.header = {"alpha", "error_w2", "bound"};
  for (double a : logSpace(1e-3, 10.0, 12)) l.rows.push_back({a, 0.1 + a, 0.2 + a});
  const std::string svg = renderPlot(l, PlotKind::lCurve);
  CHECK(wellFormed(svg));
  CHECK(svg.find("stroke-dasharray") != std::string::npos);
  fs::remove_all(dir);
}
