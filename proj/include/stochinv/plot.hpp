#pragma once

#include <filesystem>
#include <string>

#include "stochinv/io.hpp"
#include "stochinv/measures.hpp"

namespace stochinv {

enum class PlotKind { decayCurve, lCurve, stabilityRatio, densityHeatmap };

const char* plotKindName(PlotKind kind);
/// Throws InvalidArgument for an unknown name.
PlotKind parsePlotKind(const std::string& name);

/// Columns each kind reads from its CSV input.
std::vector<std::string> plotColumns(PlotKind kind);

/// SVG text for a table. decayCurve: t,kl (log y). lCurve: alpha,error_w2
/// (log-log, bound drawn when present). stabilityRatio:
/// perturbation,input_distance,output_distance,bound. densityHeatmap:
/// x,density or x,y,density.
std::string renderPlot(const io::CsvTable& table, PlotKind kind);

/// Heatmap of a 1D or 2D grid measure. The colorbar element carries
/// data-min and data-max equal to the density extremes.
std::string renderHeatmap(const GridMeasure& grid);

/// Reads `input` (CSV, or a grid measure JSON for densityHeatmap), writes the
/// SVG atomically to `out` and returns `out`.
std::filesystem::path emitPlot(const std::filesystem::path& input, PlotKind kind, const std::filesystem::path& out);

}  // namespace stochinv
