#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "stochinv/maps.hpp"
#include "stochinv/measures.hpp"

namespace stochinv::io {

using Json = nlohmann::json;
namespace fs = std::filesystem;

/// Shortest decimal text that reads back to the same double.
std::string formatNumber(double value);

std::string readText(const fs::path& path);

/// Writes to a sibling temporary file, then renames over `path`.
void writeTextAtomic(const fs::path& path, const std::string& content);

/// Header `x1,...,xd,weight`.
ParticleMeasure readParticleCsv(const fs::path& path);
std::string particleCsv(const ParticleMeasure& m);

Json toJson(const Vector& v);
Json toJson(const Matrix& m);
Json toJson(const GaussianMeasure& g);
Json toJson(const GridMeasure& g);
/// Particles as {"points": [[...]], "weights": [...]}.
Json toJson(const ParticleMeasure& p);

Vector vectorFromJson(const Json& j, const std::string& field);
Matrix matrixFromJson(const Json& j, const std::string& field);
GaussianMeasure gaussianFromJson(const Json& j);
GridMeasure gridFromJson(const Json& j);
ParticleMeasure particlesFromJson(const Json& j);

/// Accepts {"mean", "cov"}, {"lower", "upper", "shape", "density"} or
/// {"points", "weights"}; an optional "type" key must agree.
Measure measureFromJson(const Json& j);

/// By extension: `.csv` particles, `.json` any JSON measure.
Measure readMeasure(const fs::path& path);
void writeMeasure(const fs::path& path, const Measure& m);

/// JSON nested arrays (or {"matrix": ...}) or headerless CSV rows.
Matrix readMatrix(const fs::path& path);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  /// Column index or -1.
  int column(const std::string& name) const;
};

CsvTable readCsv(const fs::path& path);
std::string csvText(const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows);

}  // namespace stochinv::io
