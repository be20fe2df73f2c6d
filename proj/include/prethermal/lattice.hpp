#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "prethermal/constants.hpp"

namespace prethermal {

using Vec3 = Eigen::Vector3d;

struct LatticeConfig {
  double abundance = 0.01;
  int supercell_extent = 10;
  double lattice_constant_nm = constants::diamond_lattice_constant_nm;
  Vec3 b0_direction = Vec3::UnitX();
  int max_spins = 4096;
  std::optional<double> coupling_cutoff_nm;  // default: half the supercell edge
  std::uint64_t rng_seed = 0;

  void validate() const;
  double effective_cutoff_nm() const;
  double expected_spin_count() const;
};

enum class DisorderDistribution { gaussian, none };

struct DisorderModel {
  double variance_khz2 = 0.0;
  DisorderDistribution distribution = DisorderDistribution::gaussian;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct Coupling {
  int j = 0;
  int k = 0;
  double hz = 0.0;
};

/// Occupied 13C sites with their secular dipolar network.
///
/// Couplings are stored once per pair with j < k, sorted lexicographically.
/// Pairs beyond the cutoff radius are absent and read back as zero.
struct SpinLattice {
  std::vector<Vec3> positions;  // nm
  std::vector<Coupling> couplings;
  std::vector<double> disorder_hz;
  LatticeConfig config;

  int spin_count() const { return static_cast<int>(positions.size()); }
  double coupling(int j, int k) const;
  Eigen::MatrixXd coupling_matrix() const;  // symmetric, zero diagonal, Hz
};

/// Signed secular dipolar coupling in Hz between two sites (positions in nm).
double dipolar_coupling(const Vec3& r_j, const Vec3& r_k, const Vec3& b0_direction);

/// Eight-atom conventional diamond cell in fractional coordinates.
const std::vector<Vec3>& diamond_basis();

SpinLattice generate_lattice(const LatticeConfig& config);

/// Each spin's strongest |d_jk| in Hz (zero for an isolated spin).
std::vector<double> strongest_partner_couplings(const SpinLattice& lattice);

/// Median over spins of each spin's strongest |d_jk|, in Hz.
double median_coupling(const SpinLattice& lattice);

double median(std::vector<double> values);

SpinLattice sample_disorder(const SpinLattice& lattice, const DisorderModel& model);

/// Keeps the `count` spins nearest the supercell centre (ties by index).
SpinLattice select_cluster(const SpinLattice& lattice, int count);

nlohmann::json config_to_json(const LatticeConfig& config);
LatticeConfig config_from_json(const nlohmann::json& doc);

nlohmann::json to_json(const SpinLattice& lattice);
SpinLattice lattice_from_json(const nlohmann::json& doc);

}  // namespace prethermal
