#include "prethermal/error.hpp"

namespace prethermal {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::TooManySpins: return "TooManySpins";
    case ErrorCode::CoincidentSites: return "CoincidentSites";
    case ErrorCode::EmptyLattice: return "EmptyLattice";
    case ErrorCode::DimensionTooLarge: return "DimensionTooLarge";
    case ErrorCode::NonPeriodicFlipAngle: return "NonPeriodicFlipAngle";
    case ErrorCode::DegeneratePulse: return "DegeneratePulse";
    case ErrorCode::SubstepTooCoarse: return "SubstepTooCoarse";
    case ErrorCode::WindowTooShort: return "WindowTooShort";
    case ErrorCode::WindowSmallerThanStep: return "WindowSmallerThanStep";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::DegenerateTrace: return "DegenerateTrace";
    case ErrorCode::NoCrossing: return "NoCrossing";
    case ErrorCode::NoCusp: return "NoCusp";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

bool is_config_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::TooManySpins:
    case ErrorCode::DimensionTooLarge:
    case ErrorCode::NonPeriodicFlipAngle:
    case ErrorCode::DegeneratePulse:
    case ErrorCode::SubstepTooCoarse:
    case ErrorCode::WindowSmallerThanStep:
    case ErrorCode::Io:
      return true;
    default:
      return false;
  }
}

}  // namespace prethermal
