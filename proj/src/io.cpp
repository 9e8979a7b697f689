#include "stochinv/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <system_error>

#include "stochinv/error.hpp"

namespace stochinv::io {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> splitCsvLine(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parseDouble(const std::string& text, double& value) {
  if (text.empty()) return false;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (*first == '+') ++first;
  const auto result = std::from_chars(first, last, value);
  if (result.ec == std::errc() && result.ptr == last) return true;
  // from_chars rejects "inf"/"nan" spellings produced by other tools.
  if (text == "inf" || text == "+inf" || text == "Infinity") {
    value = INFINITY;
    return true;
  }
  if (text == "-inf" || text == "-Infinity") {
    value = -INFINITY;
    return true;
  }
  if (text == "nan" || text == "NaN") {
    value = NAN;
    return true;
  }
  return false;
}

std::vector<std::string> dataLines(const std::string& text) {
  std::vector<std::string> lines;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    line = trim(line);
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

[[noreturn]] void schema(const std::string& message) { fail(ErrorCode::SchemaError, message); }

const Json& field(const Json& j, const std::string& name) {
  if (!j.is_object() || !j.contains(name)) schema("missing field \"" + name + "\"");
  return j.at(name);
}

double number(const Json& j, const std::string& what) {
  if (!j.is_number()) schema(what + " must be a number");
  return j.get<double>();
}

}  // namespace

std::string formatNumber(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buffer[64];
  const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, result.ptr);
}

std::string readText(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void writeTextAtomic(const fs::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + tmp.string());
    out << content;
    out.flush();
    require(static_cast<bool>(out), ErrorCode::IoError, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorCode::IoError, "cannot move output into place at " + path.string());
  }
}

ParticleMeasure readParticleCsv(const fs::path& path) {
  const CsvTable table = readCsv(path);
  const int w = table.column("weight");
  if (w != static_cast<int>(table.header.size()) - 1) schema(path.string() + ": last column must be \"weight\"");
  const Index d = static_cast<Index>(table.header.size()) - 1;
  if (d < 1) schema(path.string() + ": needs at least one coordinate column");
  for (Index k = 0; k < d; ++k) {
    if (table.header[k] != "x" + std::to_string(k + 1)) {
      schema(path.string() + ": expected column x" + std::to_string(k + 1) + ", found " + table.header[k]);
    }
  }
  Matrix points(static_cast<Index>(table.rows.size()), d);
  Vector weights(static_cast<Index>(table.rows.size()));
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    for (Index k = 0; k < d; ++k) points(static_cast<Index>(i), k) = table.rows[i][k];
    weights[static_cast<Index>(i)] = table.rows[i][d];
  }
  return normalize(std::move(points), std::move(weights));
}

std::string particleCsv(const ParticleMeasure& m) {
  std::vector<std::string> header;
  for (Index k = 0; k < m.dim(); ++k) header.push_back("x" + std::to_string(k + 1));
  header.emplace_back("weight");
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.size(); ++i) {
    std::vector<double> row;
    for (Index k = 0; k < m.dim(); ++k) row.push_back(m.points()(i, k));
    row.push_back(m.weights()[i]);
    rows.push_back(std::move(row));
  }
  return csvText(header, rows);
}

Json toJson(const Vector& v) {
  Json out = Json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Json toJson(const Matrix& m) {
  Json out = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    out.push_back(std::move(row));
  }
  return out;
}

Json toJson(const GaussianMeasure& g) { return Json{{"mean", toJson(g.mean())}, {"cov", toJson(g.cov())}}; }

Json toJson(const GridMeasure& g) {
  return Json{{"lower", toJson(g.spec().lower)},
              {"upper", toJson(g.spec().upper)},
              {"shape", g.spec().shape},
              {"density", toJson(g.density())}};
}

Json toJson(const ParticleMeasure& p) { return Json{{"points", toJson(p.points())}, {"weights", toJson(p.weights())}}; }

Vector vectorFromJson(const Json& j, const std::string& fieldName) {
  if (!j.is_array()) schema(fieldName + " must be an array of numbers");
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Index>(i)] = number(j[i], fieldName + "[" + std::to_string(i) + "]");
  return v;
}

Matrix matrixFromJson(const Json& j, const std::string& fieldName) {
  if (!j.is_array() || j.empty()) schema(fieldName + " must be a nonempty array of rows");
  if (j[0].is_number()) {
    // A flat array is a single column.
    return vectorFromJson(j, fieldName);
  }
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  if (cols == 0) schema(fieldName + " rows must be nonempty arrays");
  Matrix m(static_cast<Index>(j.size()), static_cast<Index>(cols));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].size() != cols) schema(fieldName + " rows must all have " + std::to_string(cols) + " entries");
    for (std::size_t k = 0; k < cols; ++k) {
      m(static_cast<Index>(i), static_cast<Index>(k)) =
          number(j[i][k], fieldName + "[" + std::to_string(i) + "][" + std::to_string(k) + "]");
    }
  }
  return m;
}

GaussianMeasure gaussianFromJson(const Json& j) {
  Vector mean = vectorFromJson(field(j, "mean"), "mean");
  const Json& cov = field(j, "cov");
  Matrix c = cov.is_number() ? Matrix(Matrix::Identity(mean.size(), mean.size()) * cov.get<double>())
                             : matrixFromJson(cov, "cov");
  return GaussianMeasure(std::move(mean), std::move(c));
}

GridMeasure gridFromJson(const Json& j) {
  GridSpec spec;
  spec.lower = vectorFromJson(field(j, "lower"), "lower");
  spec.upper = vectorFromJson(field(j, "upper"), "upper");
  const Json& shape = field(j, "shape");
  if (!shape.is_array()) schema("shape must be an array of positive integers");
  for (const Json& s : shape) {
    if (!s.is_number_integer() || s.get<long long>() < 1 || s.get<long long>() > (1LL << 24)) {
      schema("shape must be an array of positive integers");
    }
    spec.shape.push_back(s.get<int>());
  }
  spec.validate();
  Vector density = vectorFromJson(field(j, "density"), "density");
  if (density.size() != spec.cells()) {
    schema("density has " + std::to_string(density.size()) + " values, grid has " + std::to_string(spec.cells()));
  }
  return normalize(std::move(spec), std::move(density));
}

ParticleMeasure particlesFromJson(const Json& j) {
  Matrix points = matrixFromJson(field(j, "points"), "points");
  Vector weights = j.contains("weights") ? vectorFromJson(j.at("weights"), "weights")
                                         : Vector(Vector::Constant(points.rows(), 1.0));
  return normalize(std::move(points), std::move(weights));
}

Measure measureFromJson(const Json& j) {
  if (!j.is_object()) schema("measure must be a JSON object");
  std::string type;
  if (j.contains("type")) {
    if (!j.at("type").is_string()) schema("type must be a string");
    type = j.at("type").get<std::string>();
  } else if (j.contains("mean")) {
    type = "gaussian";
  } else if (j.contains("density")) {
    type = "grid";
  } else if (j.contains("points")) {
    type = "particles";
  }
  if (type == "gaussian") return gaussianFromJson(j);
  if (type == "grid") return gridFromJson(j);
  if (type == "particles") return particlesFromJson(j);
  schema("cannot tell the measure type; expected gaussian, grid or particles");
}

Measure readMeasure(const fs::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".csv") return readParticleCsv(path);
  Json j;
  try {
    j = Json::parse(readText(path));
  } catch (const Json::parse_error& e) {
    schema(path.string() + ": " + e.what());
  }
  return measureFromJson(j);
}

void writeMeasure(const fs::path& path, const Measure& m) {
  if (const auto* p = std::get_if<ParticleMeasure>(&m)) {
    if (path.extension() == ".csv") {
      writeTextAtomic(path, particleCsv(*p));
      return;
    }
    writeTextAtomic(path, toJson(*p).dump(2) + "\n");
    return;
  }
  require(path.extension() != ".csv", ErrorCode::IoError, "only particle measures are written as CSV");
  const Json j = std::visit([](const auto& v) { return toJson(v); }, m);
  writeTextAtomic(path, j.dump(2) + "\n");
}

Matrix readMatrix(const fs::path& path) {
  const std::string text = readText(path);
  if (path.extension() == ".json") {
    Json j;
    try {
      j = Json::parse(text);
    } catch (const Json::parse_error& e) {
      schema(path.string() + ": " + e.what());
    }
    if (j.is_object()) return matrixFromJson(field(j, "matrix"), "matrix");
    return matrixFromJson(j, "matrix");
  }
  const auto lines = dataLines(text);
  if (lines.empty()) schema(path.string() + ": empty matrix file");
  std::vector<std::vector<double>> rows;
  for (const auto& line : lines) {
    std::vector<double> row;
    for (const auto& cell : splitCsvLine(line)) {
      double v = 0.0;
      if (!parseDouble(cell, v)) schema(path.string() + ": non-numeric entry \"" + cell + "\"");
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows[0].size()) schema(path.string() + ": ragged matrix rows");
    rows.push_back(std::move(row));
  }
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < rows[i].size(); ++k) m(static_cast<Index>(i), static_cast<Index>(k)) = rows[i][k];
  }
  return m;
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  return -1;
}

CsvTable readCsv(const fs::path& path) {
  const auto lines = dataLines(readText(path));
  if (lines.empty()) schema(path.string() + ": missing header");
  CsvTable table;
  table.header = splitCsvLine(lines[0]);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = splitCsvLine(lines[i]);
    if (cells.size() != table.header.size()) {
      schema(path.string() + ": row " + std::to_string(i) + " has " + std::to_string(cells.size()) +
             " fields, header has " + std::to_string(table.header.size()));
    }
    std::vector<double> row(cells.size());
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (!parseDouble(cells[k], row[k])) {
        schema(path.string() + ": row " + std::to_string(i) + " column " + table.header[k] + " is not a number");
      }
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string csvText(const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows) {
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out += ',';
    out += header[i];
  }
  out += '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += formatNumber(row[i]);
    }
    out += '\n';
  }
  return out;
}

}  // namespace stochinv::io
