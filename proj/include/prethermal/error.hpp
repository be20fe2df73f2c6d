#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace prethermal {

enum class ErrorCode {
  InvalidConfig,
  TooManySpins,
  CoincidentSites,
  EmptyLattice,
  DimensionTooLarge,
  NonPeriodicFlipAngle,
  DegeneratePulse,
  SubstepTooCoarse,
  WindowTooShort,
  WindowSmallerThanStep,
  NonConvergence,
  DegenerateTrace,
  NoCrossing,
  NoCusp,
  InsufficientData,
  TooFewPoints,
  Io,
};

std::string_view to_string(ErrorCode code);

// True for errors caused by bad user input rather than by the numerics.
bool is_config_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace prethermal
