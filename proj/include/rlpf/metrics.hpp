#pragma once

#include "rlpf/core.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace rlpf {

RLPF_DEFINE_ERROR(SamplingBudgetExceeded)

class PolicyParams;
class NoiseSchedule;
class SizeDistribution;

// Single-bond graph over molecule rows; padding rows have no neighbors.
struct BondGraph {
  std::vector<std::vector<int>> neighbors;
  std::vector<int> valence;

  // (i, j) with i < j, sorted.
  std::vector<std::pair<int, int>> edges() const;
  bool connected(const Mask& mask) const;
};

// Bond (i, j) iff |d_ij − r0(type_i, type_j)| <= bond tolerance.
BondGraph infer_bonds(const Molecule& mol, const AtomTable& table);

// Every atom's inferred valence equals its element's target.
bool is_valency_stable(const Molecule& mol, const AtomTable& table);

struct EvalReport {
  double atom_stability = 0.0;
  double molecule_stability = 0.0;
  double validity = 0.0;
  double uniqueness = 0.0;  // distinct among valid
  double novelty = 0.0;     // valid ∩ unique, absent from training
  int n_samples = 0;

  static std::string csv_header();
  std::string csv_row() const;
  std::string pretty() const;
};

EvalReport evaluate(const std::vector<Molecule>& mols, const AtomTable& table,
                    const std::unordered_set<std::uint64_t>& training_hashes);

struct RejectionResult {
  long total_sampled = 0;
  double wall_time_s = 0.0;
  std::vector<Molecule> stable;
};

// Samples batches until `target_stable` molecules have surrogate force RMSD
// below `threshold` (eV/Å). Throws SamplingBudgetExceeded past 100× target samples.
RejectionResult rejection_sample(const PolicyParams& params, const NoiseSchedule& schedule,
                                 const SizeDistribution& sizes, int target_stable, double threshold,
                                 int batch, const SeedSpec& seed, const AtomTable& table);

// Same loop over an arbitrary sampler; draw(seed) is called once per candidate.
RejectionResult rejection_sample(const std::function<Molecule(const SeedSpec&)>& draw, int target_stable,
                                 double threshold, int batch, const SeedSpec& seed, const AtomTable& table);

}  // namespace rlpf
