#include "stochinv/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include "stochinv/error.hpp"

namespace stochinv {

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 420.0;
constexpr double kLeft = 72.0;
constexpr double kRight = 24.0;
constexpr double kTop = 36.0;
constexpr double kBottom = 56.0;
constexpr double kColorbarWidth = 18.0;

std::string num(double x) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.2f", x);
  return buffer;
}

std::string label(double x) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.3g", x);
  return buffer;
}

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Axis {
  double lo = 0.0;
  double hi = 1.0;
  bool log = false;
  double pixelLo = 0.0;
  double pixelHi = 1.0;

  double map(double v) const {
    const double a = log ? std::log10(lo) : lo;
    const double b = log ? std::log10(hi) : hi;
    const double x = log ? std::log10(v) : v;
    return pixelLo + (x - a) / (b - a) * (pixelHi - pixelLo);
  }

  std::vector<double> ticks() const {
    std::vector<double> out;
    if (log) {
      const int a = static_cast<int>(std::floor(std::log10(lo)));
      const int b = static_cast<int>(std::ceil(std::log10(hi)));
      const int stride = std::max(1, (b - a) / 8);
      for (int e = a; e <= b; e += stride) {
        const double v = std::pow(10.0, e);
        if (v >= lo * (1 - 1e-12) && v <= hi * (1 + 1e-12)) out.push_back(v);
      }
      return out;
    }
    const double raw = (hi - lo) / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    const double step = raw / mag < 1.5 ? mag : raw / mag < 3.5 ? 2 * mag : raw / mag < 7.5 ? 5 * mag : 10 * mag;
    for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) out.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
    return out;
  }
};

Axis fitAxis(const std::vector<double>& values, bool log, double pixelLo, double pixelHi) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double v : values) {
    if (!std::isfinite(v) || (log && v <= 0.0)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  require(std::isfinite(lo), ErrorCode::SchemaError, "no plottable values");
  if (log) {
    if (hi <= lo) {
      lo /= 10.0;
      hi *= 10.0;
    }
  } else if (hi <= lo) {
    const double pad = lo == 0.0 ? 1.0 : 0.1 * std::abs(lo);
    lo -= pad;
    hi += pad;
  } else {
    const double pad = 0.04 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
  return Axis{lo, hi, log, pixelLo, pixelHi};
}

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  std::string color;
  bool dashed = false;
};

std::string header(const std::string& title) {
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
    << "</text>\n";
  return s.str();
}

std::string axes(const Axis& x, const Axis& y, const std::string& xName, const std::string& yName) {
  std::ostringstream s;
  s << "<g id=\"axes\" stroke=\"black\" fill=\"none\">\n"
    << "<line x1=\"" << num(x.pixelLo) << "\" y1=\"" << num(y.pixelLo) << "\" x2=\"" << num(x.pixelHi) << "\" y2=\""
    << num(y.pixelLo) << "\"/>\n"
    << "<line x1=\"" << num(x.pixelLo) << "\" y1=\"" << num(y.pixelLo) << "\" x2=\"" << num(x.pixelLo) << "\" y2=\""
    << num(y.pixelHi) << "\"/>\n</g>\n";
  s << "<g id=\"xticks\" data-scale=\"" << (x.log ? "log" : "linear") << "\">\n";
  for (double t : x.ticks()) {
    const double px = x.map(t);
    s << "<line x1=\"" << num(px) << "\" y1=\"" << num(y.pixelLo) << "\" x2=\"" << num(px) << "\" y2=\""
      << num(y.pixelLo + 5) << "\" stroke=\"black\"/>"
      << "<text x=\"" << num(px) << "\" y=\"" << num(y.pixelLo + 18) << "\" text-anchor=\"middle\">" << label(t)
      << "</text>\n";
  }
  s << "</g>\n<g id=\"yticks\" data-scale=\"" << (y.log ? "log" : "linear") << "\">\n";
  for (double t : y.ticks()) {
    const double py = y.map(t);
    s << "<line x1=\"" << num(x.pixelLo - 5) << "\" y1=\"" << num(py) << "\" x2=\"" << num(x.pixelLo) << "\" y2=\""
      << num(py) << "\" stroke=\"black\"/>"
      << "<text x=\"" << num(x.pixelLo - 8) << "\" y=\"" << num(py + 4) << "\" text-anchor=\"end\">" << label(t)
      << "</text>\n";
  }
  s << "</g>\n"
    << "<text x=\"" << num((x.pixelLo + x.pixelHi) / 2) << "\" y=\"" << num(kHeight - 14)
    << "\" text-anchor=\"middle\">" << escape(xName) << "</text>\n"
    << "<text x=\"16\" y=\"" << num((y.pixelLo + y.pixelHi) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << num((y.pixelLo + y.pixelHi) / 2) << ")\">" << escape(yName) << "</text>\n";
  return s.str();
}

std::string linePlot(const std::string& title, const std::vector<Series>& series, bool logX, bool logY,
                     const std::string& xName, const std::string& yName) {
  std::vector<double> xs;
  std::vector<double> ys;
  for (const auto& s : series) {
    xs.insert(xs.end(), s.x.begin(), s.x.end());
    ys.insert(ys.end(), s.y.begin(), s.y.end());
  }
  const Axis x = fitAxis(xs, logX, kLeft, kWidth - kRight);
  const Axis y = fitAxis(ys, logY, kHeight - kBottom, kTop);
  std::ostringstream out;
  out << header(title) << axes(x, y, xName, yName);
  double legendY = kTop + 6;
  for (const auto& s : series) {
    out << "<polyline class=\"series\" data-name=\"" << escape(s.name) << "\" fill=\"none\" stroke=\"" << s.color
        << "\" stroke-width=\"1.6\"" << (s.dashed ? " stroke-dasharray=\"6 4\"" : "") << " points=\"";
    bool first = true;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const bool ok = std::isfinite(s.x[i]) && std::isfinite(s.y[i]) && (!logX || s.x[i] > 0) && (!logY || s.y[i] > 0);
      if (!ok) continue;
      out << (first ? "" : " ") << num(x.map(s.x[i])) << "," << num(y.map(s.y[i]));
      first = false;
    }
    out << "\"/>\n";
    out << "<line x1=\"" << num(kWidth - kRight - 140) << "\" y1=\"" << num(legendY) << "\" x2=\""
        << num(kWidth - kRight - 116) << "\" y2=\"" << num(legendY) << "\" stroke=\"" << s.color << "\""
        << (s.dashed ? " stroke-dasharray=\"6 4\"" : "") << "/>"
        << "<text x=\"" << num(kWidth - kRight - 110) << "\" y=\"" << num(legendY + 4) << "\">" << escape(s.name)
        << "</text>\n";
    legendY += 16;
  }
  out << "</svg>\n";
  return out.str();
}

std::vector<double> column(const io::CsvTable& table, const std::string& name) {
  const int c = table.column(name);
  std::vector<double> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) out.push_back(row[static_cast<std::size_t>(c)]);
  return out;
}

void requireColumns(const io::CsvTable& table, const std::vector<std::string>& names) {
  std::string missing;
  for (const auto& n : names) {
    if (table.column(n) < 0) missing += missing.empty() ? n : ", " + n;
  }
  if (!missing.empty()) fail(ErrorCode::SchemaError, "missing columns: " + missing);
  if (table.rows.empty()) fail(ErrorCode::SchemaError, "no data rows");
}

std::string viridis(double t) {
  static constexpr std::array<std::array<double, 3>, 5> stops{{{68, 1, 84}, {59, 82, 139}, {33, 145, 140},
                                                                {94, 201, 98}, {253, 231, 37}}};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  char buffer[8];
  std::snprintf(buffer, sizeof(buffer), "#%02x%02x%02x",
                static_cast<int>(std::lround(stops[i][0] + f * (stops[i + 1][0] - stops[i][0]))),
                static_cast<int>(std::lround(stops[i][1] + f * (stops[i + 1][1] - stops[i][1]))),
                static_cast<int>(std::lround(stops[i][2] + f * (stops[i + 1][2] - stops[i][2]))));
  return buffer;
}

struct Cell {
  double x0, x1, y0, y1, value;
};

std::string heatmap(const std::vector<Cell>& cells, double xlo, double xhi, double ylo, double yhi, bool twoD) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& c : cells) {
    if (!std::isfinite(c.value)) continue;
    lo = std::min(lo, c.value);
    hi = std::max(hi, c.value);
  }
  require(std::isfinite(lo), ErrorCode::SchemaError, "density has no finite values");
  const double plotRight = kWidth - kRight - kColorbarWidth - 56;
  const Axis x{xlo, xhi, false, kLeft, plotRight};
  const Axis y{ylo, yhi, false, kHeight - kBottom, kTop};
  const double span = hi > lo ? hi - lo : 1.0;
  std::ostringstream out;
  out << header("density") << "<g id=\"cells\" shape-rendering=\"crispEdges\">\n";
  for (const auto& c : cells) {
    const double px0 = x.map(c.x0);
    const double px1 = x.map(c.x1);
    const double py0 = y.map(c.y1);
    const double py1 = y.map(c.y0);
    out << "<rect x=\"" << num(px0) << "\" y=\"" << num(py0) << "\" width=\"" << num(std::max(0.0, px1 - px0))
        << "\" height=\"" << num(std::max(0.0, py1 - py0)) << "\" fill=\"" << viridis((c.value - lo) / span)
        << "\"/>\n";
  }
  out << "</g>\n" << axes(x, y, "x", twoD ? "y" : "");
  const double bx = kWidth - kRight - kColorbarWidth - 36;
  out << "<g id=\"colorbar\" data-min=\"" << io::formatNumber(lo) << "\" data-max=\"" << io::formatNumber(hi)
      << "\">\n";
  const int steps = 64;
  const double h = (kHeight - kBottom - kTop) / steps;
  for (int i = 0; i < steps; ++i) {
    out << "<rect x=\"" << num(bx) << "\" y=\"" << num(kHeight - kBottom - (i + 1) * h) << "\" width=\""
        << num(kColorbarWidth) << "\" height=\"" << num(h + 0.5) << "\" fill=\"" << viridis((i + 0.5) / steps)
        << "\"/>\n";
  }
  out << "<text x=\"" << num(bx + kColorbarWidth + 4) << "\" y=\"" << num(kTop + 4) << "\">" << label(hi) << "</text>\n"
      << "<text x=\"" << num(bx + kColorbarWidth + 4) << "\" y=\"" << num(kHeight - kBottom) << "\">" << label(lo)
      << "</text>\n</g>\n</svg>\n";
  return out.str();
}

std::vector<double> edges(std::vector<double> centers) {
  std::sort(centers.begin(), centers.end());
  centers.erase(std::unique(centers.begin(), centers.end()), centers.end());
  std::vector<double> out(centers.size() + 1);
  if (centers.size() == 1) {
    out[0] = centers[0] - 0.5;
    out[1] = centers[0] + 0.5;
    return out;
  }
  for (std::size_t i = 1; i < centers.size(); ++i) out[i] = 0.5 * (centers[i - 1] + centers[i]);
  out.front() = centers.front() - (out[1] - centers.front());
  out.back() = centers.back() + (centers.back() - out[centers.size() - 1]);
  return out;
}

std::pair<double, double> cellOf(const std::vector<double>& e, double v) {
  const auto it = std::upper_bound(e.begin() + 1, e.end() - 1, v);
  const auto i = static_cast<std::size_t>(it - e.begin()) - 1;
  return {e[i], e[i + 1]};
}

std::string heatmapFromTable(const io::CsvTable& table) {
  requireColumns(table, {"x", "density"});
  const auto xs = column(table, "x");
  const auto ds = column(table, "density");
  const bool twoD = table.column("y") >= 0;
  const auto ys = twoD ? column(table, "y") : std::vector<double>(xs.size(), 0.0);
  const auto ex = edges(xs);
  const auto ey = twoD ? edges(ys) : std::vector<double>{0.0, 1.0};
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto [x0, x1] = cellOf(ex, xs[i]);
    const auto [y0, y1] = twoD ? cellOf(ey, ys[i]) : std::pair<double, double>{0.0, 1.0};
    cells.push_back({x0, x1, y0, y1, ds[i]});
  }
  return heatmap(cells, ex.front(), ex.back(), ey.front(), ey.back(), twoD);
}

}  // namespace

const char* plotKindName(PlotKind kind) {
  switch (kind) {
    case PlotKind::decayCurve: return "decayCurve";
    case PlotKind::lCurve: return "lCurve";
    case PlotKind::stabilityRatio: return "stabilityRatio";
    case PlotKind::densityHeatmap: return "densityHeatmap";
  }
  return "decayCurve";
}

PlotKind parsePlotKind(const std::string& name) {
  for (PlotKind k : {PlotKind::decayCurve, PlotKind::lCurve, PlotKind::stabilityRatio, PlotKind::densityHeatmap}) {
    if (name == plotKindName(k)) return k;
  }
  fail(ErrorCode::InvalidArgument, "unknown plot kind \"" + name + "\"");
}

std::vector<std::string> plotColumns(PlotKind kind) {
  switch (kind) {
    case PlotKind::decayCurve: return {"t", "kl"};
    case PlotKind::lCurve: return {"alpha", "error_w2"};
    case PlotKind::stabilityRatio: return {"perturbation", "input_distance", "output_distance", "bound"};
    case PlotKind::densityHeatmap: return {"x", "density"};
  }
  return {};
}

std::string renderPlot(const io::CsvTable& table, PlotKind kind) {
  requireColumns(table, plotColumns(kind));
  switch (kind) {
    case PlotKind::decayCurve: {
      std::vector<Series> series{{"KL", column(table, "t"), column(table, "kl"), "#1f5fbf", false}};
      return linePlot("KL decay", series, false, true, "t", "KL(t)");
    }
    case PlotKind::lCurve: {
      std::vector<Series> series{{"error", column(table, "alpha"), column(table, "error_w2"), "#1f5fbf", false}};
      if (table.column("bound") >= 0) {
        series.push_back({"bound", column(table, "alpha"), column(table, "bound"), "#c0392b", true});
      }
      return linePlot("regularization sweep", series, true, true, "alpha", "W2 error");
    }
    case PlotKind::stabilityRatio: {
      const auto level = column(table, "perturbation");
      const auto in = column(table, "input_distance");
      const auto outD = column(table, "output_distance");
      const auto bound = column(table, "bound");
      std::vector<double> ratio(level.size());
      std::vector<double> boundRatio(level.size());
      for (std::size_t i = 0; i < level.size(); ++i) {
        ratio[i] = in[i] != 0.0 ? outD[i] / in[i] : std::numeric_limits<double>::quiet_NaN();
        boundRatio[i] = in[i] != 0.0 ? bound[i] / in[i] : std::numeric_limits<double>::quiet_NaN();
      }
      std::vector<Series> series{{"output / input", level, ratio, "#1f5fbf", false},
                                 {"bound / input", level, boundRatio, "#c0392b", true}};
      return linePlot("stability ratio", series, false, false, "perturbation", "ratio");
    }
    case PlotKind::densityHeatmap:
      return heatmapFromTable(table);
  }
  return {};
}

std::string renderHeatmap(const GridMeasure& grid) {
  const GridSpec& spec = grid.spec();
  require(spec.dim() == 1 || spec.dim() == 2, ErrorCode::UnsupportedCarrier, "heatmaps need a 1D or 2D grid");
  std::vector<Cell> cells;
  const bool twoD = spec.dim() == 2;
  for (Index k = 0; k < grid.cells(); ++k) {
    const Vector c = spec.center(k);
    const double y0 = twoD ? c(1) - 0.5 * spec.width(1) : 0.0;
    const double y1 = twoD ? c(1) + 0.5 * spec.width(1) : 1.0;
    cells.push_back({c(0) - 0.5 * spec.width(0), c(0) + 0.5 * spec.width(0), y0, y1, grid.density()(k)});
  }
  return heatmap(cells, spec.lower(0), spec.upper(0), twoD ? spec.lower(1) : 0.0, twoD ? spec.upper(1) : 1.0, twoD);
}

std::filesystem::path emitPlot(const std::filesystem::path& input, PlotKind kind, const std::filesystem::path& out) {
  std::string svg;
  if (kind == PlotKind::densityHeatmap && input.extension() == ".json") {
    io::Json j;
    try {
      j = io::Json::parse(io::readText(input));
    } catch (const io::Json::parse_error& e) {
      fail(ErrorCode::SchemaError, input.string() + ": " + e.what());
    }
    svg = renderHeatmap(io::gridFromJson(j));
  } else {
    svg = renderPlot(io::readCsv(input), kind);
  }
  io::writeTextAtomic(out, svg);
  return out;
}

}  // namespace stochinv
