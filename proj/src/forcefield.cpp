#include "rlpf/forcefield.hpp"

#include "rlpf/metrics.hpp"
#include "rlpf/xyz.hpp"

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>

namespace rlpf {

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

BondTopology BondTopology::from_pairs(const Molecule& mol, const AtomTable& table,
                                      const std::vector<std::pair<int, int>>& pairs) {
  BondTopology topo;
  for (auto [i, j] : pairs) {
    if (i == j) throw Error("BondTopology: self edge");
    const PairParams& p = table.pair(mol.element(i), mol.element(j));
    topo.edges.push_back(Bond{std::min(i, j), std::max(i, j), p.r0, p.k});
  }
  return topo;
}

BondTopology BondTopology::inferred(const Molecule& mol, const AtomTable& table) {
  return from_pairs(mol, table, infer_bonds(mol, table).edges());
}

// ---------------------------------------------------------------------------
// Energy and forces
// ---------------------------------------------------------------------------

ForceResult energy_forces(const Molecule& mol, const BondTopology& topo, const AtomTable& table) {
  const int N = mol.capacity();
  ForceResult res;
  res.forces = Coords::Zero(N, 3);
  res.energy = 0.0;

  std::vector<std::uint8_t> bonded(static_cast<std::size_t>(N) * N, 0);
  for (const Bond& b : topo.edges) {
    if (b.i == b.j || !mol.mask.at(b.i) || !mol.mask.at(b.j))
      throw Error("energy_forces: bond references a padding row or itself");
    bonded[b.i * N + b.j] = bonded[b.j * N + b.i] = 1;
    const Eigen::RowVector3d r = mol.coords.row(b.i) - mol.coords.row(b.j);
    const double d = r.norm();
    if (d < 1e-8) throw SingularGeometry("energy_forces: coincident bonded atoms");
    const double dev = d - b.r0;
    res.energy += 0.5 * b.k * dev * dev;
    const Eigen::RowVector3d f = -b.k * dev / d * r;  // force on i
    res.forces.row(b.i) += f;
    res.forces.row(b.j) -= f;
  }

  const double A = table.repulsion().A, rho = table.repulsion().rho;
  for (int i = 0; i < N; ++i) {
    if (!mol.mask[i]) continue;
    for (int j = i + 1; j < N; ++j) {
      if (!mol.mask[j] || bonded[i * N + j]) continue;
      const Eigen::RowVector3d r = mol.coords.row(i) - mol.coords.row(j);
      const double d = r.norm();
      if (d < 1e-8) throw SingularGeometry("energy_forces: coincident atoms");
      const double e = A * std::exp(-d / rho);
      res.energy += e;
      const Eigen::RowVector3d f = (e / rho / d) * r;  // repulsive, pushes i away from j
      res.forces.row(i) += f;
      res.forces.row(j) -= f;
    }
  }
  if (!std::isfinite(res.energy)) throw SingularGeometry("energy_forces: non-finite energy");
  return res;
}

double force_rmsd_of(const Coords& forces, const Mask& mask) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    for (int j = 0; j < 3; ++j) sum += forces(i, j) * forces(i, j);
    ++n;
  }
  if (n == 0) throw EmptyMolecule("force_rmsd: no atoms");
  return std::sqrt(sum / (3.0 * n));
}

// ---------------------------------------------------------------------------
// Minimization
// ---------------------------------------------------------------------------

MinimizeResult minimize(const Molecule& mol, const BondTopology& topo, const AtomTable& table,
                        int max_iter, double tol) {
  MinimizeResult out;
  out.molecule = mol;
  ForceResult cur = energy_forces(mol, topo, table);
  double step = 0.01;  // Å² / eV
  for (int it = 0; it < max_iter; ++it) {
    out.force_rmsd = force_rmsd_of(cur.forces, mol.mask);
    if (out.force_rmsd <= tol) {
      out.converged = true;
      out.iterations = it;
      return out;
    }
    const double gnorm2 = cur.forces.squaredNorm();
    for (int tries = 0;; ++tries) {
      Molecule trial = out.molecule;
      trial.coords += step * cur.forces;
      ForceResult next;
      try {
        next = energy_forces(trial, topo, table);
      } catch (const SingularGeometry&) {
        next.energy = INFINITY;
      }
      if (std::isnan(next.energy)) throw MinimizationFailed("minimize: energy became NaN");
      if (next.energy <= cur.energy - 1e-4 * step * gnorm2) {
        out.molecule = std::move(trial);
        cur = std::move(next);
        step *= 1.25;
        break;
      }
      step *= 0.5;
      if (tries > 60) {
        // no descent possible at machine precision
        out.iterations = it;
        out.force_rmsd = force_rmsd_of(cur.forces, mol.mask);
        out.converged = out.force_rmsd <= tol;
        return out;
      }
    }
  }
  out.iterations = max_iter;
  out.force_rmsd = force_rmsd_of(cur.forces, mol.mask);
  out.converged = out.force_rmsd <= tol;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

namespace {

struct Composition {
  std::vector<int> heavy;  // element indices of non-hydrogen atoms
  int hydrogens = 0;
};

// Valence-saturated single-bond trees: #H = 2 + Σ_heavy (v − 2).
std::vector<Composition> enumerate_compositions(const AtomTable& table, int min_atoms, int max_atoms,
                                                int hydrogen) {
  std::vector<int> heavy_elements;
  for (int e = 0; e < table.num_elements(); ++e)
    if (e != hydrogen) heavy_elements.push_back(e);
  std::vector<Composition> out;
  std::vector<int> counts(heavy_elements.size(), 0);
  // odometer over heavy-atom counts, each bounded by max_atoms
  while (true) {
    Composition c;
    int excess = 2;
    for (std::size_t k = 0; k < heavy_elements.size(); ++k)
      for (int r = 0; r < counts[k]; ++r) {
        c.heavy.push_back(heavy_elements[k]);
        excess += table.target_valence(heavy_elements[k]) - 2;
      }
    c.hydrogens = excess;
    const int n = static_cast<int>(c.heavy.size()) + c.hydrogens;
    if (c.hydrogens >= 0 && n >= min_atoms && n <= max_atoms) out.push_back(c);
    std::size_t k = 0;
    while (k < counts.size()) {
      if (++counts[k] <= max_atoms) break;
      counts[k] = 0;
      ++k;
    }
    if (k == counts.size()) break;
  }
  return out;
}

Eigen::RowVector3d random_unit(Rng& rng) {
  Eigen::RowVector3d v(rng.normal(), rng.normal(), rng.normal());
  return v / v.norm();
}

std::optional<DatasetEntry> build_molecule(const Composition& comp, const AtomTable& table,
                                           int hydrogen, Rng& rng) {
  // element per row: heavy atoms first, hydrogens after
  std::vector<int> elements = comp.heavy;
  const int m = static_cast<int>(comp.heavy.size());
  for (int h = 0; h < comp.hydrogens; ++h) elements.push_back(hydrogen);
  rng.shuffle(elements);  // random heavy order; keep it a permutation of rows
  std::stable_partition(elements.begin(), elements.end(), [&](int e) { return e != hydrogen; });
  const int n = static_cast<int>(elements.size());

  std::vector<int> free(n);
  for (int i = 0; i < n; ++i) free[i] = table.target_valence(elements[i]);
  std::vector<std::pair<int, int>> edges;
  std::vector<int> parent(n, -1);
  if (m == 0) {
    // H2
    edges.emplace_back(0, 1);
    parent[1] = 0;
  } else {
    for (int i = 1; i < m; ++i) {
      std::vector<int> open;
      for (int j = 0; j < i; ++j)
        if (free[j] > 0) open.push_back(j);
      const int p = open[rng.below(open.size())];
      edges.emplace_back(p, i);
      parent[i] = p;
      --free[p];
      --free[i];
    }
    int next_h = m;
    for (int j = 0; j < m; ++j)
      while (free[j] > 0) {
        edges.emplace_back(j, next_h);
        parent[next_h] = j;
        --free[j];
        --free[next_h];
        ++next_h;
      }
    if (next_h != n) return std::nullopt;
  }

  Coords coords = Coords::Zero(n, 3);
  for (int i = 1; i < n; ++i) {
    const int p = parent[i];
    const double r0 = table.pair(elements[i], elements[p]).r0;
    Eigen::RowVector3d best = coords.row(p) + r0 * random_unit(rng);
    double best_clear = -1.0;
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double d = r0 * (1.0 + 0.1 * (rng.uniform() - 0.5));
      const Eigen::RowVector3d cand = coords.row(p) + d * random_unit(rng);
      double clear = INFINITY;
      for (int j = 0; j < i; ++j)
        if (j != p) clear = std::min(clear, (cand - coords.row(j)).norm());
      if (clear > best_clear) {
        best_clear = clear;
        best = cand;
      }
      if (clear > 1.2) break;
    }
    coords.row(i) = best;
  }

  Molecule mol = Molecule::from_elements(elements, coords, table.num_elements());
  mol.coords = project_zero_com(mol.coords, mol.mask);
  const BondTopology topo = BondTopology::from_pairs(mol, table, edges);
  MinimizeResult relaxed = minimize(mol, topo, table);
  if (!relaxed.converged) return std::nullopt;
  relaxed.molecule.coords = project_zero_com(relaxed.molecule.coords, relaxed.molecule.mask);

  // keep only structures whose distance-inferred graph is the generating tree
  std::set<std::pair<int, int>> want;
  for (const Bond& b : topo.edges) want.emplace(b.i, b.j);
  const auto got_edges = infer_bonds(relaxed.molecule, table).edges();
  const std::set<std::pair<int, int>> got(got_edges.begin(), got_edges.end());
  if (got != want) return std::nullopt;
  return DatasetEntry{std::move(relaxed.molecule), topo};
}

}  // namespace

std::vector<DatasetEntry> generate_dataset(int count, std::pair<int, int> atom_range,
                                           const AtomTable& table, const SeedSpec& seed) {
  const auto [lo, hi] = atom_range;
  if (lo < 2 || hi > 9 || lo > hi) throw Error("generate_dataset: atom range must lie within [2, 9]");
  const int hydrogen = table.index_of("H");
  if (hydrogen < 0) throw Error("generate_dataset: atom table lacks hydrogen");
  const auto comps = enumerate_compositions(table, lo, hi, hydrogen);
  if (comps.empty()) throw Error("generate_dataset: no valence-saturated composition fits the range");

  std::vector<DatasetEntry> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const SeedSpec item = seed.derive(static_cast<std::uint64_t>(i));
    for (int attempt = 0; attempt < 32; ++attempt) {
      Rng rng(item.derive(static_cast<std::uint64_t>(attempt)));
      const Composition& comp = comps[rng.below(comps.size())];
      if (auto entry = build_molecule(comp, table, hydrogen, rng)) {
        out.push_back(std::move(*entry));
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// External engine bridge
// ---------------------------------------------------------------------------

namespace {

double resolve_timeout(double requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("RLPF_FF_TIMEOUT_SECS")) {
    char* end = nullptr;
    const double v = std::strtod(env, &end);
    if (end != env && v > 0) return v;
  }
  return 60.0;
}

void ignore_sigpipe_once() {
  static std::once_flag flag;
  std::call_once(flag, [] { ::signal(SIGPIPE, SIG_IGN); });
}

}  // namespace

ForceResult external_forces(const Molecule& mol, const std::string& command, const AtomTable& table,
                            double timeout_secs) {
  ignore_sigpipe_once();
  const double timeout = resolve_timeout(timeout_secs);
  const Molecule compact = mol.compacted();
  const std::string input = write_xyz(compact, table, "rlpf");

  int in_pipe[2], out_pipe[2];
  if (::pipe(in_pipe) != 0) throw EngineFailure("external_forces: pipe() failed");
  if (::pipe(out_pipe) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw EngineFailure("external_forces: pipe() failed");
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw EngineFailure("external_forces: fork() failed");
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);

  // XYZ for ≤ 9 atoms fits in the pipe buffer; a child that exits early yields EPIPE.
  std::size_t written = 0;
  while (written < input.size()) {
    const ssize_t w = ::write(in_pipe[1], input.data() + written, input.size() - written);
    if (w <= 0) break;
    written += static_cast<std::size_t>(w);
  }
  ::close(in_pipe[1]);

  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout);
  std::string output;
  char buf[4096];
  bool timed_out = false;
  while (true) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      timed_out = true;
      break;
    }
    pollfd pfd{out_pipe[0], POLLIN, 0};
    const int ready = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(left.count(), 1000)));
    if (ready < 0 && errno != EINTR) break;
    if (ready <= 0) continue;
    const ssize_t r = ::read(out_pipe[0], buf, sizeof buf);
    if (r <= 0) break;
    output.append(buf, static_cast<std::size_t>(r));
  }
  ::close(out_pipe[0]);
  if (timed_out) {
    ::kill(pid, SIGKILL);
    ::waitpid(pid, nullptr, 0);
    throw EngineTimeout("external_forces: engine exceeded " + std::to_string(timeout) + " s");
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
    throw EngineFailure("external_forces: engine exited with status " +
                        std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1));

  const int n = compact.capacity();
  Coords compact_forces(n, 3);
  std::istringstream lines(output);
  std::string line;
  int row = 0;
  while (std::getline(lines, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (row >= n) throw EngineFailure("external_forces: engine emitted more than n force lines");
    std::istringstream fields(line);
    double fx, fy, fz;
    std::string extra;
    if (!(fields >> fx >> fy >> fz) || (fields >> extra))
      throw EngineFailure("external_forces: malformed force line '" + line + "'");
    compact_forces.row(row++) << fx, fy, fz;
  }
  if (row != n)
    throw EngineFailure("external_forces: expected " + std::to_string(n) + " force lines, got " +
                        std::to_string(row));
  if (!compact_forces.allFinite()) throw EngineFailure("external_forces: non-finite forces");

  ForceResult res;
  res.forces = Coords::Zero(mol.capacity(), 3);
  const auto rows = mol.atoms();
  for (int a = 0; a < n; ++a) res.forces.row(rows[a]) = compact_forces.row(a);
  res.energy = 0.0;
  res.converged = true;
  res.source = ForceSource::external;
  return res;
}

}  // namespace rlpf
