#include "rlpf/reward.hpp"

#include "rlpf/metrics.hpp"

#include <cmath>

namespace rlpf {

std::string to_string(RewardKind kind) {
  switch (kind) {
    case RewardKind::force: return "force";
    case RewardKind::valency: return "valency";
    case RewardKind::composite: return "composite";
    case RewardKind::external: return "external";
  }
  return "force";
}

RewardKind reward_kind_from_string(const std::string& name) {
  if (name == "force") return RewardKind::force;
  if (name == "valency") return RewardKind::valency;
  if (name == "composite") return RewardKind::composite;
  if (name == "external") return RewardKind::external;
  throw Error("unknown reward kind '" + name + "'");
}

RewardRecord RewardRecord::penalized(RewardKind kind) {
  RewardRecord r;
  r.value = kPenaltyReward;
  r.kind = kind;
  r.penalty = true;
  return r;
}

double force_rmsd(const ForceResult& result, int n) {
  if (n <= 0) throw EmptyMolecule("force_rmsd: n must be positive");
  double sum = 0.0;
  // plain component order, so the value is reproducible by a naive loop
  for (Eigen::Index i = 0; i < result.forces.rows(); ++i)
    for (int j = 0; j < 3; ++j) sum += result.forces(i, j) * result.forces(i, j);
  return std::sqrt(sum / (3.0 * n));
}

namespace {

// Raw surrogate/external RMSD, or NaN when the molecule earns the penalty.
double evaluate_rmsd(const Molecule& mol, const AtomTable& table, const std::string& command) {
  if (mol.atom_count() < 2) return NAN;
  try {
    const ForceResult fr = command.empty()
                               ? energy_forces(mol, BondTopology::inferred(mol, table), table)
                               : external_forces(mol, command, table);
    const double r = force_rmsd(fr, mol.atom_count());
    return std::isfinite(r) ? r : NAN;
  } catch (const SingularGeometry&) {
    return NAN;
  } catch (const EngineFailure&) {
    return NAN;
  }
}

}  // namespace

RewardRecord force_reward(const Molecule& mol, const AtomTable& table,
                          const std::string& external_command) {
  const RewardKind kind = external_command.empty() ? RewardKind::force : RewardKind::external;
  const double rmsd = evaluate_rmsd(mol, table, external_command);
  if (std::isnan(rmsd)) return RewardRecord::penalized(kind);
  RewardRecord r;
  r.kind = kind;
  r.value = -rmsd;
  r.raw_rmsd = rmsd;
  return r;
}

RewardRecord valency_reward(const Molecule& mol, const AtomTable& table) {
  RewardRecord r;
  r.kind = RewardKind::valency;
  r.value = is_valency_stable(mol, table) ? 1.0 : 0.0;
  return r;
}

double toy_property(const Molecule& mol) {
  const auto rows = mol.atoms();
  if (rows.size() < 2) throw DegenerateProperty("toy_property: need at least two atoms");
  Eigen::RowVector3d com = Eigen::RowVector3d::Zero();
  for (int i : rows) com += mol.coords.row(i);
  com /= static_cast<double>(rows.size());
  double sum = 0.0;
  for (int i : rows) sum += (mol.coords.row(i) - com).squaredNorm();
  return std::sqrt(sum / static_cast<double>(rows.size()));
}

void CompositeConfig::validate() const {
  if (lambda < 0 || eta < 0 || lambda + eta <= 0)
    throw Error("CompositeConfig: need lambda, eta >= 0 and lambda + eta > 0");
  if (!predictor) throw Error("CompositeConfig: missing property predictor");
}

RewardRecord composite_reward(const Molecule& mol, const CompositeConfig& cfg, const AtomTable& table) {
  cfg.validate();
  const double rmsd = evaluate_rmsd(mol, table, "");
  if (std::isnan(rmsd)) return RewardRecord::penalized(RewardKind::composite);
  double property;
  try {
    property = cfg.predictor(mol);
  } catch (const DegenerateProperty&) {
    return RewardRecord::penalized(RewardKind::composite);
  }
  RewardRecord r;
  r.kind = RewardKind::composite;
  r.raw_rmsd = rmsd;
  r.value = -cfg.lambda * rmsd - cfg.eta * std::abs(property - cfg.target);
  return r;
}

RewardFn make_reward(const RewardOptions& options, const AtomTable& table) {
  switch (options.kind) {
    case RewardKind::force:
      return [&table](const Molecule& m) { return force_reward(m, table); };
    case RewardKind::valency:
      return [&table](const Molecule& m) { return valency_reward(m, table); };
    case RewardKind::composite:
      options.composite.validate();
      return [&table, cfg = options.composite](const Molecule& m) {
        return composite_reward(m, cfg, table);
      };
    case RewardKind::external:
      if (options.external_command.empty()) throw Error("external reward requires a command");
      return [&table, cmd = options.external_command](const Molecule& m) {
        return force_reward(m, table, cmd);
      };
  }
  throw Error("make_reward: unknown kind");
}

}  // namespace rlpf
