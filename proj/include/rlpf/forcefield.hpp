#pragma once

#include "rlpf/core.hpp"

#include <string>
#include <utility>
#include <vector>

namespace rlpf {

RLPF_DEFINE_ERROR(SingularGeometry)
RLPF_DEFINE_ERROR(MinimizationFailed)

// External engine failures always carry the penalty flag.
class EngineFailure : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "EngineFailure"; }
  bool penalty() const noexcept { return true; }
};

class EngineTimeout : public EngineFailure {
 public:
  using EngineFailure::EngineFailure;
  const char* kind() const noexcept override { return "EngineTimeout"; }
};

enum class ForceSource { surrogate, external };

struct ForceResult {
  Coords forces;        // N×3, eV/Å, zero on padding
  double energy = 0.0;  // eV
  bool converged = true;
  ForceSource source = ForceSource::surrogate;
};

struct Bond {
  int i, j;   // molecule rows
  double r0;  // Å
  double k;   // eV/Å²
};

struct BondTopology {
  std::vector<Bond> edges;

  // Bond parameters from `table` for every listed row pair.
  static BondTopology from_pairs(const Molecule& mol, const AtomTable& table,
                                 const std::vector<std::pair<int, int>>& pairs);
  // Topology implied by distance-based bond inference.
  static BondTopology inferred(const Molecule& mol, const AtomTable& table);
};

// E = Σ_bonds ½k(d − r0)² + Σ_nonbonded A·exp(−d/ρ), with analytic forces.
// Throws SingularGeometry when two atoms are closer than 1e-8 Å.
ForceResult energy_forces(const Molecule& mol, const BondTopology& topo, const AtomTable& table);

// sqrt(Σ_i |f_i|² / 3n) over masked-in atoms.
double force_rmsd_of(const Coords& forces, const Mask& mask);

struct MinimizeResult {
  Molecule molecule;
  bool converged = false;
  int iterations = 0;
  double force_rmsd = 0.0;
};

// Steepest descent with backtracking until force RMSD <= tol.
// Throws MinimizationFailed if the energy becomes non-finite.
MinimizeResult minimize(const Molecule& mol, const BondTopology& topo, const AtomTable& table,
                        int max_iter = 20000, double tol = 1e-3);

struct DatasetEntry {
  Molecule molecule;
  BondTopology topology;
};

// Random valence-saturated trees relaxed to surrogate equilibrium; atom counts in [min, max] ⊂ [2, 9].
std::vector<DatasetEntry> generate_dataset(int count, std::pair<int, int> atom_range,
                                           const AtomTable& table, const SeedSpec& seed);

// Runs `command` through /bin/sh, sends the molecule as XYZ on stdin and reads
// one "fx fy fz" line per atom (eV/Å) from stdout. RLPF_FF_TIMEOUT_SECS
// overrides the default 60 s timeout when `timeout_secs` <= 0.
ForceResult external_forces(const Molecule& mol, const std::string& command, const AtomTable& table,
                            double timeout_secs = 0.0);

}  // namespace rlpf
