#pragma once

#include <numbers>

namespace prethermal::constants {

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

// SI units.
inline constexpr double mu0_over_4pi = 1e-7;         // T m / A
inline constexpr double hbar = 1.054571817e-34;      // J s (CODATA 2018, exact)
inline constexpr double gamma_c13_hz_per_tesla = 10.7e6;  // gamma / 2pi for 13C
inline constexpr double gamma_c13 = two_pi * gamma_c13_hz_per_tesla;  // rad / (s T)

inline constexpr double diamond_lattice_constant_nm = 0.3567;
inline constexpr double min_separation_nm = 1e-4;

// Dense exact diagonalization limit (2^12 = 4096).
inline constexpr int max_dense_spins = 12;

}  // namespace prethermal::constants
