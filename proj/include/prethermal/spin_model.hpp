#pragma once

#include <complex>

#include <Eigen/Dense>

#include "prethermal/constants.hpp"
#include "prethermal/lattice.hpp"

namespace prethermal {

using Complex = std::complex<double>;
using Matrix = Eigen::MatrixXcd;

enum class Axis { x, y, z };
enum class OperatorUnits { angular_frequency, dimensionless };

/// Dense operator on N spin-1/2 sites (dimension 2^N).
///
/// Basis convention: basis index b, spin j is "up" (I_jz = +1/2) when bit j of b is clear.
/// Spin operators are Pauli matrices over two.
struct SpinOperator {
  Matrix matrix;
  OperatorUnits units = OperatorUnits::dimensionless;

  Eigen::Index dimension() const { return matrix.rows(); }
  int spins() const;
};

struct HamiltonianSet {
  SpinOperator h_dd;
  SpinOperator h_z;
  SpinOperator h_total;
};

struct AverageHamiltonian {
  SpinOperator h_f0;
  int cycle_pulses = 1;
  double flip_angle = 0.0;
};

int spins_for_dimension(Eigen::Index dimension);
void check_spin_count(int spins, int max_spins = constants::max_dense_spins);

SpinOperator spin_component(int spin, Axis axis, int spins);
SpinOperator collective_spin(Axis axis, int spins);

/// Adds coeff * (cxx I_jx I_kx + cyy I_jy I_ky + czz I_jz I_kz) in place.
void add_pair_term(Matrix& target, int spins, int j, int k, double coeff, double cxx, double cyy,
                   double czz);

SpinOperator build_dipolar_hamiltonian(const SpinLattice& lattice,
                                       int max_spins = constants::max_dense_spins);
SpinOperator build_onsite_hamiltonian(const SpinLattice& lattice,
                                      int max_spins = constants::max_dense_spins);
HamiltonianSet build_hamiltonians(const SpinLattice& lattice,
                                  int max_spins = constants::max_dense_spins);

/// exp(-i theta I_axis) on `spins` sites. Physical evolution throughout is exp(-iHt).
SpinOperator collective_rotation(double theta, Axis axis, int spins);

/// H^(j) = exp(i j theta I_x) H exp(-i j theta I_x).
SpinOperator toggled_hamiltonian(const SpinOperator& h, double theta, int j);

/// Smallest k >= 1 with k * theta = 0 (mod 2 pi), searched up to max_pulses.
int cycle_length(double theta, int max_pulses = 10000);

/// Cycle-normalized toggling-frame average (1/N_k) sum_j H^(j).
AverageHamiltonian average_hamiltonian(const SpinOperator& h, double theta);

/// Closed-form pulse-averaged dipolar term: sum d_jk (3/2 (I_jz I_kz + I_jy I_ky) - I_j . I_k).
SpinOperator flip_flop_average(const SpinLattice& lattice,
                               int max_spins = constants::max_dense_spins);

/// zeta = 2 pi J / omega with omega = 2 pi / tau, i.e. J * tau.
double magnus_parameter(double j_hz, double tau_s);

double hermiticity_residual(const Matrix& m);
double unitarity_residual(const Matrix& u);
Matrix commutator(const Matrix& a, const Matrix& b);

}  // namespace prethermal
