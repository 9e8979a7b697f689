#include "stochinv/error.hpp"

namespace stochinv {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidMeasure: return "InvalidMeasure";
    case ErrorCode::ZeroMass: return "ZeroMass";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DegenerateRestriction: return "DegenerateRestriction";
    case ErrorCode::DegenerateImage: return "DegenerateImage";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::MissingInverse: return "MissingInverse";
    case ErrorCode::SizeCap: return "SizeCap";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::SupportMismatch: return "SupportMismatch";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::UnsupportedCarrier: return "UnsupportedCarrier";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::BandwidthRequired: return "BandwidthRequired";
    case ErrorCode::NonFiniteVelocity: return "NonFiniteVelocity";
    case ErrorCode::CFLViolation: return "CFLViolation";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace stochinv
