#include "prethermal/lattice.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "prethermal/error.hpp"

namespace prethermal {

void LatticeConfig::validate() const {
  if (!(abundance >= 0.0 && abundance <= 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "abundance must lie in [0, 1]");
  }
  if (supercell_extent < 1) {
    throw Error(ErrorCode::InvalidConfig, "supercell_extent must be >= 1");
  }
  if (!(lattice_constant_nm > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "lattice_constant_nm must be positive");
  }
  if (std::abs(b0_direction.norm() - 1.0) > 1e-12) {
    throw Error(ErrorCode::InvalidConfig, "b0_direction must have unit norm");
  }
  if (max_spins < 1) {
    throw Error(ErrorCode::InvalidConfig, "max_spins must be >= 1");
  }
  if (coupling_cutoff_nm && !(*coupling_cutoff_nm > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "coupling_cutoff_nm must be positive");
  }
}

double LatticeConfig::effective_cutoff_nm() const {
  return coupling_cutoff_nm.value_or(0.5 * supercell_extent * lattice_constant_nm);
}

double LatticeConfig::expected_spin_count() const {
  const double cells = std::pow(static_cast<double>(supercell_extent), 3);
  return abundance * 8.0 * cells;
}

void DisorderModel::validate() const {
  if (!(variance_khz2 >= 0.0) || !std::isfinite(variance_khz2)) {
    throw Error(ErrorCode::InvalidConfig, "disorder variance must be finite and >= 0");
  }
}

double SpinLattice::coupling(int j, int k) const {
  if (j == k) return 0.0;
  if (j > k) std::swap(j, k);
  const auto it = std::lower_bound(
      couplings.begin(), couplings.end(), std::pair{j, k},
      [](const Coupling& c, const std::pair<int, int>& key) {
        return std::pair{c.j, c.k} < key;
      });
  if (it != couplings.end() && it->j == j && it->k == k) return it->hz;
  return 0.0;
}

Eigen::MatrixXd SpinLattice::coupling_matrix() const {
  const int n = spin_count();
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
  for (const auto& c : couplings) {
    d(c.j, c.k) = c.hz;
    d(c.k, c.j) = c.hz;
  }
  return d;
}

double dipolar_coupling(const Vec3& r_j, const Vec3& r_k, const Vec3& b0_direction) {
  const Vec3 r = r_k - r_j;
  const double distance_nm = r.norm();
  if (!(distance_nm >= constants::min_separation_nm)) {
    throw Error(ErrorCode::CoincidentSites, "sites closer than minimum separation");
  }
  const double cos_beta = r.dot(b0_direction) / (distance_nm * b0_direction.norm());
  const double angular = 3.0 * cos_beta * cos_beta - 1.0;
  const double r_m = distance_nm * 1e-9;
  const double prefactor = constants::mu0_over_4pi * constants::hbar * constants::gamma_c13 *
                           constants::gamma_c13 / (r_m * r_m * r_m);
  return prefactor * angular / constants::two_pi;
}

const std::vector<Vec3>& diamond_basis() {
  static const std::vector<Vec3> basis = {
      {0.00, 0.00, 0.00}, {0.00, 0.50, 0.50}, {0.50, 0.00, 0.50}, {0.50, 0.50, 0.00},
      {0.25, 0.25, 0.25}, {0.25, 0.75, 0.75}, {0.75, 0.25, 0.75}, {0.75, 0.75, 0.25},
  };
  return basis;
}

namespace {

std::vector<Coupling> compute_couplings(const std::vector<Vec3>& positions, const Vec3& b0,
                                        double cutoff_nm) {
  std::vector<Coupling> out;
  const int n = static_cast<int>(positions.size());
  for (int j = 0; j < n; ++j) {
    for (int k = j + 1; k < n; ++k) {
      if ((positions[k] - positions[j]).norm() > cutoff_nm) continue;
      out.push_back({j, k, dipolar_coupling(positions[j], positions[k], b0)});
    }
  }
  return out;
}

}  // namespace

SpinLattice generate_lattice(const LatticeConfig& config) {
  config.validate();
  if (config.expected_spin_count() > config.max_spins) {
    throw Error(ErrorCode::TooManySpins, "expected occupied count exceeds max_spins");
  }

  std::mt19937_64 rng(config.rng_seed);
  std::bernoulli_distribution occupied(config.abundance);

  SpinLattice lattice;
  lattice.config = config;
  const int extent = config.supercell_extent;
  for (int ix = 0; ix < extent; ++ix) {
    for (int iy = 0; iy < extent; ++iy) {
      for (int iz = 0; iz < extent; ++iz) {
        const Vec3 cell(ix, iy, iz);
        for (const Vec3& b : diamond_basis()) {
          if (occupied(rng)) {
            lattice.positions.push_back((cell + b) * config.lattice_constant_nm);
          }
        }
      }
    }
  }
  lattice.couplings =
      compute_couplings(lattice.positions, config.b0_direction, config.effective_cutoff_nm());
  lattice.disorder_hz.assign(lattice.positions.size(), 0.0);
  return lattice;
}

std::vector<double> strongest_partner_couplings(const SpinLattice& lattice) {
  std::vector<double> strongest(lattice.spin_count(), 0.0);
  for (const auto& c : lattice.couplings) {
    strongest[c.j] = std::max(strongest[c.j], std::abs(c.hz));
    strongest[c.k] = std::max(strongest[c.k], std::abs(c.hz));
  }
  return strongest;
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorCode::InsufficientData, "median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double median_coupling(const SpinLattice& lattice) {
  if (lattice.spin_count() < 2) throw Error(ErrorCode::EmptyLattice, "median coupling needs at least two spins");
  return median(strongest_partner_couplings(lattice));
}

SpinLattice sample_disorder(const SpinLattice& lattice, const DisorderModel& model) {
  model.validate();
  SpinLattice out = lattice;
  out.disorder_hz.assign(lattice.positions.size(), 0.0);
  if (model.distribution == DisorderDistribution::none || model.variance_khz2 == 0.0) {
    return out;
  }
  std::mt19937_64 rng(model.rng_seed);
  std::normal_distribution<double> field(0.0, std::sqrt(model.variance_khz2) * 1e3);
  for (double& c : out.disorder_hz) c = field(rng);
  return out;
}

SpinLattice select_cluster(const SpinLattice& lattice, int count) {
  if (count < 1 || count > lattice.spin_count()) {
    throw Error(ErrorCode::InvalidConfig,
                "cluster size " + std::to_string(count) + " not available in lattice of " +
                    std::to_string(lattice.spin_count()) + " spins");
  }
  const double half_edge = 0.5 * lattice.config.supercell_extent * lattice.config.lattice_constant_nm;
  const Vec3 centre = Vec3::Constant(half_edge);

  std::vector<int> order(lattice.spin_count());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return (lattice.positions[a] - centre).norm() < (lattice.positions[b] - centre).norm();
  });
  order.resize(count);
  std::sort(order.begin(), order.end());

  std::vector<int> new_index(lattice.spin_count(), -1);
  SpinLattice out;
  out.config = lattice.config;
  for (int i = 0; i < count; ++i) {
    new_index[order[i]] = i;
    out.positions.push_back(lattice.positions[order[i]]);
    out.disorder_hz.push_back(lattice.disorder_hz.empty() ? 0.0 : lattice.disorder_hz[order[i]]);
  }
  for (const auto& c : lattice.couplings) {
    const int j = new_index[c.j];
    const int k = new_index[c.k];
    if (j >= 0 && k >= 0) out.couplings.push_back({std::min(j, k), std::max(j, k), c.hz});
  }
  std::sort(out.couplings.begin(), out.couplings.end(), [](const Coupling& a, const Coupling& b) {
    return std::pair{a.j, a.k} < std::pair{b.j, b.k};
  });
  return out;
}

nlohmann::json config_to_json(const LatticeConfig& config) {
  nlohmann::json doc;
  doc["abundance"] = config.abundance;
  doc["supercell_extent"] = config.supercell_extent;
  doc["lattice_constant_nm"] = config.lattice_constant_nm;
  doc["b0_direction"] = {config.b0_direction.x(), config.b0_direction.y(), config.b0_direction.z()};
  doc["max_spins"] = config.max_spins;
  doc["coupling_cutoff_nm"] = config.coupling_cutoff_nm
                                  ? nlohmann::json(*config.coupling_cutoff_nm)
                                  : nlohmann::json(nullptr);
  doc["rng_seed"] = config.rng_seed;
  return doc;
}

LatticeConfig config_from_json(const nlohmann::json& doc) {
  LatticeConfig config;
  config.abundance = doc.value("abundance", config.abundance);
  config.supercell_extent = doc.value("supercell_extent", config.supercell_extent);
  config.lattice_constant_nm = doc.value("lattice_constant_nm", config.lattice_constant_nm);
  if (doc.contains("b0_direction")) {
    const auto& b = doc.at("b0_direction");
    config.b0_direction = Vec3(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>());
  }
  config.max_spins = doc.value("max_spins", config.max_spins);
  if (doc.contains("coupling_cutoff_nm") && !doc.at("coupling_cutoff_nm").is_null()) {
    config.coupling_cutoff_nm = doc.at("coupling_cutoff_nm").get<double>();
  }
  config.rng_seed = doc.value("rng_seed", config.rng_seed);
  return config;
}

nlohmann::json to_json(const SpinLattice& lattice) {
  nlohmann::json doc;
  doc["positions"] = nlohmann::json::array();
  for (const auto& p : lattice.positions) doc["positions"].push_back({p.x(), p.y(), p.z()});
  doc["couplings"] = nlohmann::json::array();
  for (const auto& c : lattice.couplings) doc["couplings"].push_back({c.j, c.k, c.hz});
  doc["disorder_Hz"] = lattice.disorder_hz;
  doc["config"] = config_to_json(lattice.config);
  return doc;
}

SpinLattice lattice_from_json(const nlohmann::json& doc) {
  SpinLattice lattice;
  try {
    for (const auto& p : doc.at("positions")) {
      lattice.positions.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(),
                                     p.at(2).get<double>());
    }
    for (const auto& c : doc.at("couplings")) {
      lattice.couplings.push_back({c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<double>()});
    }
    lattice.disorder_hz = doc.at("disorder_Hz").get<std::vector<double>>();
    lattice.config = config_from_json(doc.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("malformed lattice document: ") + e.what());
  }
  const int n = lattice.spin_count();
  if (static_cast<int>(lattice.disorder_hz.size()) != n) {
    throw Error(ErrorCode::InvalidConfig, "disorder_Hz length does not match positions");
  }
  for (const auto& c : lattice.couplings) {
    if (c.j < 0 || c.k >= n || c.j >= c.k) {
      throw Error(ErrorCode::InvalidConfig, "coupling indices must satisfy 0 <= j < k < n");
    }
  }
  std::sort(lattice.couplings.begin(), lattice.couplings.end(),
            [](const Coupling& a, const Coupling& b) { return std::pair{a.j, a.k} < std::pair{b.j, b.k}; });
  return lattice;
}

}  // namespace prethermal
