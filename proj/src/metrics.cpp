#include "rlpf/metrics.hpp"

#include "rlpf/diffusion.hpp"
#include "rlpf/reward.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace rlpf {

std::vector<std::pair<int, int>> BondGraph::edges() const {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < static_cast<int>(neighbors.size()); ++i)
    for (int j : neighbors[i])
      if (i < j) out.emplace_back(i, j);
  std::sort(out.begin(), out.end());
  return out;
}

bool BondGraph::connected(const Mask& mask) const {
  const int N = static_cast<int>(mask.size());
  int start = -1, total = 0;
  for (int i = 0; i < N; ++i)
    if (mask[i]) {
      if (start < 0) start = i;
      ++total;
    }
  if (start < 0) return false;
  std::vector<bool> seen(N, false);
  std::vector<int> stack{start};
  seen[start] = true;
  int reached = 0;
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    ++reached;
    for (int j : neighbors[i])
      if (!seen[j]) {
        seen[j] = true;
        stack.push_back(j);
      }
  }
  return reached == total;
}

BondGraph infer_bonds(const Molecule& mol, const AtomTable& table) {
  const int N = mol.capacity();
  BondGraph g;
  g.neighbors.assign(N, {});
  g.valence.assign(N, 0);
  const double tol = table.bond_tolerance();
  for (int i = 0; i < N; ++i) {
    if (!mol.mask[i]) continue;
    const int ei = mol.element(i);
    for (int j = i + 1; j < N; ++j) {
      if (!mol.mask[j]) continue;
      const double d = (mol.coords.row(i) - mol.coords.row(j)).norm();
      if (std::abs(d - table.pair(ei, mol.element(j)).r0) <= tol) {
        g.neighbors[i].push_back(j);
        g.neighbors[j].push_back(i);
        ++g.valence[i];
        ++g.valence[j];
      }
    }
  }
  return g;
}

bool is_valency_stable(const Molecule& mol, const AtomTable& table) {
  const BondGraph g = infer_bonds(mol, table);
  for (int i = 0; i < mol.capacity(); ++i)
    if (mol.mask[i] && g.valence[i] != table.target_valence(mol.element(i))) return false;
  return mol.atom_count() > 0;
}

std::string EvalReport::csv_header() {
  return "atom_stability,molecule_stability,validity,uniqueness,novelty,n_samples";
}

std::string EvalReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,%.6f,%d", atom_stability, molecule_stability,
                validity, uniqueness, novelty, n_samples);
  return buf;
}

std::string EvalReport::pretty() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "samples            %d\n"
                "atom stability     %.2f%%\n"
                "molecule stability %.2f%%\n"
                "validity           %.2f%%\n"
                "uniqueness         %.2f%%\n"
                "novelty            %.2f%%\n",
                n_samples, 100 * atom_stability, 100 * molecule_stability, 100 * validity,
                100 * uniqueness, 100 * novelty);
  return buf;
}

EvalReport evaluate(const std::vector<Molecule>& mols, const AtomTable& table,
                    const std::unordered_set<std::uint64_t>& training_hashes) {
  if (mols.empty()) throw Error("evaluate: empty sample list");
  long atoms = 0, stable_atoms = 0;
  int stable_mols = 0, valid = 0;
  std::set<std::uint64_t> unique;
  for (const Molecule& m : mols) {
    const BondGraph g = infer_bonds(m, table);
    bool all_stable = true, over = false;
    for (int i = 0; i < m.capacity(); ++i) {
      if (!m.mask[i]) continue;
      const int target = table.target_valence(m.element(i));
      ++atoms;
      if (g.valence[i] == target) ++stable_atoms;
      else all_stable = false;
      if (g.valence[i] > target) over = true;
    }
    if (all_stable && m.atom_count() > 0) ++stable_mols;
    if (m.atom_count() >= 2 && !over && g.connected(m.mask)) {
      ++valid;
      unique.insert(molecule_graph_hash(m, table));
    }
  }
  EvalReport r;
  r.n_samples = static_cast<int>(mols.size());
  r.atom_stability = atoms ? static_cast<double>(stable_atoms) / atoms : 0.0;
  r.molecule_stability = static_cast<double>(stable_mols) / mols.size();
  r.validity = static_cast<double>(valid) / mols.size();
  r.uniqueness = valid ? static_cast<double>(unique.size()) / valid : 0.0;
  long novel = 0;
  for (auto h : unique)
    if (!training_hashes.count(h)) ++novel;
  r.novelty = unique.empty() ? 0.0 : static_cast<double>(novel) / unique.size();
  return r;
}

RejectionResult rejection_sample(const std::function<Molecule(const SeedSpec&)>& draw, int target_stable,
                                 double threshold, int batch, const SeedSpec& seed, const AtomTable& table) {
  // threshold 0 is accepted and can never be met
  if (threshold < 0) throw Error("rejection_sample: threshold must be >= 0");
  if (target_stable < 1 || batch < 1) throw Error("rejection_sample: target and batch must be positive");
  const long cap = 100L * target_stable;
  const auto t0 = std::chrono::steady_clock::now();
  RejectionResult res;
  for (std::uint64_t round = 0;; ++round) {
    for (int k = 0; k < batch; ++k) {
      if (res.total_sampled >= cap)
        throw SamplingBudgetExceeded("rejection_sample: no " + std::to_string(target_stable) +
                                     " stable molecules within " + std::to_string(cap) + " samples");
      const Molecule mol = draw(seed.derive(round, static_cast<std::uint64_t>(k)));
      ++res.total_sampled;
      const RewardRecord r = force_reward(mol, table);
      if (!r.penalty && r.raw_rmsd < threshold) {
        res.stable.push_back(mol);
        if (static_cast<int>(res.stable.size()) == target_stable) {
          res.wall_time_s =
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          return res;
        }
      }
    }
  }
}

RejectionResult rejection_sample(const PolicyParams& params, const NoiseSchedule& schedule,
                                 const SizeDistribution& sizes, int target_stable, double threshold,
                                 int batch, const SeedSpec& seed, const AtomTable& table) {
  auto draw = [&](const SeedSpec& s) {
    Rng size_rng(s.derive(0xA70Au));
    return sample_trajectory(params, sizes.sample(size_rng), schedule, s).molecule;
  };
  return rejection_sample(draw, target_stable, threshold, batch, seed, table);
}

}  // namespace rlpf
