#include "prethermal/spin_model.hpp"

#include <cmath>
#include <string>

#include "prethermal/error.hpp"

namespace prethermal {

namespace {

inline double z_sign(Eigen::Index basis, int spin) {
  return ((basis >> spin) & 1) ? -1.0 : 1.0;
}

Matrix zero_operator(int spins) {
  const Eigen::Index dim = Eigen::Index{1} << spins;
  return Matrix::Zero(dim, dim);
}

}  // namespace

int SpinOperator::spins() const { return spins_for_dimension(dimension()); }

int spins_for_dimension(Eigen::Index dimension) {
  int n = 0;
  while ((Eigen::Index{1} << n) < dimension) ++n;
  if ((Eigen::Index{1} << n) != dimension) {
    throw Error(ErrorCode::InvalidConfig, "operator dimension is not a power of two");
  }
  return n;
}

void check_spin_count(int spins, int max_spins) {
  if (spins > max_spins) {
    throw Error(ErrorCode::DimensionTooLarge,
                std::to_string(spins) + " spins exceeds dense limit of " + std::to_string(max_spins));
  }
  if (spins < 1) throw Error(ErrorCode::EmptyLattice, "operator needs at least one spin");
}

SpinOperator spin_component(int spin, Axis axis, int spins) {
  check_spin_count(spins);
  Matrix m = zero_operator(spins);
  const Eigen::Index dim = m.rows();
  const Eigen::Index flip = Eigen::Index{1} << spin;
  for (Eigen::Index b = 0; b < dim; ++b) {
    switch (axis) {
      case Axis::z:
        m(b, b) = 0.5 * z_sign(b, spin);
        break;
      case Axis::x:
        m(b ^ flip, b) = 0.5;
        break;
      case Axis::y:
        // sigma_y |up> = i |down>, sigma_y |down> = -i |up>
        m(b ^ flip, b) = Complex(0.0, 0.5 * z_sign(b, spin));
        break;
    }
  }
  return {std::move(m), OperatorUnits::dimensionless};
}

SpinOperator collective_spin(Axis axis, int spins) {
  check_spin_count(spins);
  Matrix m = zero_operator(spins);
  for (int j = 0; j < spins; ++j) m += spin_component(j, axis, spins).matrix;
  return {std::move(m), OperatorUnits::dimensionless};
}

void add_pair_term(Matrix& target, int spins, int j, int k, double coeff, double cxx, double cyy,
                   double czz) {
  const Eigen::Index dim = Eigen::Index{1} << spins;
  const Eigen::Index flip = (Eigen::Index{1} << j) | (Eigen::Index{1} << k);
  for (Eigen::Index b = 0; b < dim; ++b) {
    const double parity = z_sign(b, j) * z_sign(b, k);
    target(b, b) += coeff * 0.25 * czz * parity;
    // I_jy I_ky picks up -sign_j sign_k / 4 on the doubly flipped state.
    target(b ^ flip, b) += coeff * 0.25 * (cxx - cyy * parity);
  }
}

SpinOperator build_dipolar_hamiltonian(const SpinLattice& lattice, int max_spins) {
  const int n = lattice.spin_count();
  check_spin_count(n, max_spins);
  Matrix h = zero_operator(n);
  for (const auto& c : lattice.couplings) {
    if (c.hz == 0.0) continue;
    // 3 I_jz I_kz - I_j . I_k
    add_pair_term(h, n, c.j, c.k, constants::two_pi * c.hz, -1.0, -1.0, 2.0);
  }
  return {std::move(h), OperatorUnits::angular_frequency};
}

SpinOperator build_onsite_hamiltonian(const SpinLattice& lattice, int max_spins) {
  const int n = lattice.spin_count();
  check_spin_count(n, max_spins);
  Matrix h = zero_operator(n);
  const Eigen::Index dim = h.rows();
  for (Eigen::Index b = 0; b < dim; ++b) {
    double e = 0.0;
    for (int j = 0; j < n; ++j) {
      const double c = lattice.disorder_hz.empty() ? 0.0 : lattice.disorder_hz[j];
      e += 0.5 * z_sign(b, j) * constants::two_pi * c;
    }
    h(b, b) = e;
  }
  return {std::move(h), OperatorUnits::angular_frequency};
}

HamiltonianSet build_hamiltonians(const SpinLattice& lattice, int max_spins) {
  HamiltonianSet set;
  set.h_dd = build_dipolar_hamiltonian(lattice, max_spins);
  set.h_z = build_onsite_hamiltonian(lattice, max_spins);
  set.h_total = {set.h_dd.matrix + set.h_z.matrix, OperatorUnits::angular_frequency};
  return set;
}

SpinOperator collective_rotation(double theta, Axis axis, int spins) {
  check_spin_count(spins);
  const double c = std::cos(0.5 * theta);
  const double s = std::sin(0.5 * theta);
  // Single-spin exp(-i theta sigma/2), indexed [row bit][column bit].
  Complex r[2][2];
  switch (axis) {
    case Axis::x:
      r[0][0] = c; r[0][1] = Complex(0, -s); r[1][0] = Complex(0, -s); r[1][1] = c;
      break;
    case Axis::y:
      r[0][0] = c; r[0][1] = -s; r[1][0] = s; r[1][1] = c;
      break;
    case Axis::z:
      r[0][0] = Complex(c, -s); r[0][1] = 0; r[1][0] = 0; r[1][1] = Complex(c, s);
      break;
  }
  const Eigen::Index dim = Eigen::Index{1} << spins;
  Matrix u(dim, dim);
  for (Eigen::Index col = 0; col < dim; ++col) {
    for (Eigen::Index row = 0; row < dim; ++row) {
      Complex v = 1.0;
      for (int j = 0; j < spins && v != 0.0; ++j) {
        v *= r[(row >> j) & 1][(col >> j) & 1];
      }
      u(row, col) = v;
    }
  }
  return {std::move(u), OperatorUnits::dimensionless};
}

SpinOperator toggled_hamiltonian(const SpinOperator& h, double theta, int j) {
  const Matrix r = collective_rotation(j * theta, Axis::x, h.spins()).matrix;
  Matrix out = r.adjoint() * h.matrix * r;
  return {std::move(out), h.units};
}

int cycle_length(double theta, int max_pulses) {
  for (int k = 1; k <= max_pulses; ++k) {
    const double turns = k * theta / constants::two_pi;
    if (std::abs(turns - std::round(turns)) < 1e-9) return k;
  }
  throw Error(ErrorCode::NonPeriodicFlipAngle,
              "no cycle of at most " + std::to_string(max_pulses) + " pulses");
}

AverageHamiltonian average_hamiltonian(const SpinOperator& h, double theta) {
  const int cycle = cycle_length(theta);
  const int n = h.spins();
  const Matrix step = collective_rotation(theta, Axis::x, n).matrix;
  Matrix sum = Matrix::Zero(h.dimension(), h.dimension());
  // Accumulate R^j incrementally and re-anchor every 64 pulses to bound roundoff.
  Matrix r = Matrix::Identity(h.dimension(), h.dimension());
  for (int j = 0; j < cycle; ++j) {
    if (j % 64 == 0) r = collective_rotation(j * theta, Axis::x, n).matrix;
    sum.noalias() += r.adjoint() * h.matrix * r;
    r = r * step;
  }
  sum /= static_cast<double>(cycle);
  return {{std::move(sum), h.units}, cycle, theta};
}

SpinOperator flip_flop_average(const SpinLattice& lattice, int max_spins) {
  const int n = lattice.spin_count();
  check_spin_count(n, max_spins);
  Matrix h = zero_operator(n);
  for (const auto& c : lattice.couplings) {
    if (c.hz == 0.0) continue;
    // 3/2 (zz + yy) - (xx + yy + zz)
    add_pair_term(h, n, c.j, c.k, constants::two_pi * c.hz, -1.0, 0.5, 0.5);
  }
  return {std::move(h), OperatorUnits::angular_frequency};
}

double magnus_parameter(double j_hz, double tau_s) {
  if (!(tau_s >= 0.0)) throw Error(ErrorCode::InvalidConfig, "tau must be non-negative");
  return j_hz * tau_s;
}

double hermiticity_residual(const Matrix& m) { return (m - m.adjoint()).norm(); }

double unitarity_residual(const Matrix& u) {
  return (u.adjoint() * u - Matrix::Identity(u.rows(), u.cols())).norm();
}

Matrix commutator(const Matrix& a, const Matrix& b) { return a * b - b * a; }

}  // namespace prethermal
