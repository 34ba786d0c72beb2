#pragma once

#include "rlpf/core.hpp"
#include "rlpf/forcefield.hpp"

#include <functional>
#include <limits>
#include <string>

namespace rlpf {

RLPF_DEFINE_ERROR(DegenerateProperty)

// Reward assigned whenever forces cannot be evaluated.
inline constexpr double kPenaltyReward = -5.0;

enum class RewardKind { force, valency, composite, external };

std::string to_string(RewardKind kind);
RewardKind reward_kind_from_string(const std::string& name);

struct RewardRecord {
  double value = 0.0;
  RewardKind kind = RewardKind::force;
  bool penalty = false;
  double raw_rmsd = std::numeric_limits<double>::quiet_NaN();  // eV/Å

  static RewardRecord penalized(RewardKind kind);
};

// sqrt(Σ_i (fx² + fy² + fz²) / 3n). Throws EmptyMolecule for n = 0.
double force_rmsd(const ForceResult& result, int n);

// −force RMSD under the surrogate field with distance-inferred bonds, or under
// an external engine when `external_command` is set. Failures become penalties.
RewardRecord force_reward(const Molecule& mol, const AtomTable& table = AtomTable::standard(),
                          const std::string& external_command = "");

// 1 when every atom's inferred valence equals its target, else 0.
RewardRecord valency_reward(const Molecule& mol, const AtomTable& table = AtomTable::standard());

// Radius of gyration (Å) of the real atoms. Throws DegenerateProperty for n < 2.
double toy_property(const Molecule& mol);

struct CompositeConfig {
  double lambda = 1.0;
  double eta = 0.5;
  double target = 0.0;
  std::function<double(const Molecule&)> predictor = toy_property;

  void validate() const;
};

// −λ·RMSD − η·|ω(mol) − c|
RewardRecord composite_reward(const Molecule& mol, const CompositeConfig& cfg,
                              const AtomTable& table = AtomTable::standard());

using RewardFn = std::function<RewardRecord(const Molecule&)>;

struct RewardOptions {
  RewardKind kind = RewardKind::force;
  CompositeConfig composite;
  std::string external_command;
};

RewardFn make_reward(const RewardOptions& options, const AtomTable& table = AtomTable::standard());

}  // namespace rlpf
