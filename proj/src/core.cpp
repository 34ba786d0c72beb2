#include "rlpf/core.hpp"

#include "rlpf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rlpf {

// ---------------------------------------------------------------------------
// AtomTable
// ---------------------------------------------------------------------------

AtomTable::AtomTable(std::vector<std::string> elements, std::vector<int> target_valence,
                     std::map<std::pair<int, int>, PairParams> pair_params, Repulsion repulsion,
                     double bond_tolerance)
    : elements_(std::move(elements)),
      valence_(std::move(target_valence)),
      repulsion_(repulsion),
      bond_tolerance_(bond_tolerance) {
  const int f = num_elements();
  if (f == 0 || static_cast<int>(valence_.size()) != f)
    throw Error("AtomTable: element and valence lists differ in length");
  for (int v : valence_)
    if (v < 1) throw Error("AtomTable: target valence must be >= 1");
  if (repulsion_.A <= 0 || repulsion_.rho <= 0) throw Error("AtomTable: repulsion must be positive");
  if (bond_tolerance_ <= 0) throw Error("AtomTable: bond tolerance must be positive");
  pairs_.assign(f * f, PairParams{});
  std::vector<bool> seen(f * f, false);
  for (const auto& [key, p] : pair_params) {
    const auto [a, b] = key;
    if (a < 0 || b < 0 || a >= f || b >= f) throw Error("AtomTable: pair index out of range");
    if (p.r0 <= 0 || p.k <= 0) throw Error("AtomTable: pair parameters must be positive");
    if (seen[a * f + b] && (pairs_[a * f + b].r0 != p.r0 || pairs_[a * f + b].k != p.k))
      throw Error("AtomTable: asymmetric pair parameters");
    pairs_[a * f + b] = pairs_[b * f + a] = p;
    seen[a * f + b] = seen[b * f + a] = true;
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw Error("AtomTable: missing pair parameters");
}

const AtomTable& AtomTable::standard() {
  static const AtomTable table = [] {
    enum { H, C, N, O };
    constexpr double k = 20.0;
    std::map<std::pair<int, int>, PairParams> pairs{
        {{H, H}, {0.74, k}}, {{C, H}, {1.09, k}}, {{N, H}, {1.01, k}}, {{O, H}, {0.96, k}},
        {{C, C}, {1.54, k}}, {{C, N}, {1.47, k}}, {{C, O}, {1.43, k}}, {{N, N}, {1.45, k}},
        {{N, O}, {1.40, k}}, {{O, O}, {1.48, k}},
    };
    return AtomTable({"H", "C", "N", "O"}, {1, 4, 3, 2}, pairs, Repulsion{5.0, 0.4}, 0.2);
  }();
  return table;
}

int AtomTable::index_of(const std::string& symbol) const {
  const auto it = std::find(elements_.begin(), elements_.end(), symbol);
  return it == elements_.end() ? -1 : static_cast<int>(it - elements_.begin());
}

const PairParams& AtomTable::pair(int a, int b) const {
  return pairs_.at(a * num_elements() + b);
}

// ---------------------------------------------------------------------------
// Molecule
// ---------------------------------------------------------------------------

Molecule::Molecule(Coords c, RowMatrix t, Mask m)
    : coords(std::move(c)), types(std::move(t)), mask(std::move(m)) {
  if (coords.rows() != static_cast<Eigen::Index>(mask.size()) || types.rows() != coords.rows())
    throw InvalidMolecule("Molecule: coords, types and mask disagree on capacity");
}

Molecule Molecule::from_elements(const std::vector<int>& elements, const Coords& coords,
                                 int num_elements) {
  const int n = static_cast<int>(elements.size());
  if (coords.rows() != n) throw InvalidMolecule("from_elements: coordinate count mismatch");
  RowMatrix types = RowMatrix::Zero(n, num_elements);
  for (int i = 0; i < n; ++i) {
    if (elements[i] < 0 || elements[i] >= num_elements)
      throw InvalidMolecule("from_elements: element index out of range");
    types(i, elements[i]) = 1.0;
  }
  return Molecule(coords, std::move(types), Mask(n, 1));
}

int Molecule::atom_count() const {
  return static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

int Molecule::element(int i) const {
  int best = 0;
  for (int j = 1; j < types.cols(); ++j)
    if (types(i, j) > types(i, best)) best = j;
  return best;
}

std::vector<int> Molecule::atoms() const {
  std::vector<int> out;
  for (int i = 0; i < capacity(); ++i)
    if (mask[i]) out.push_back(i);
  return out;
}

std::vector<int> Molecule::elements() const {
  std::vector<int> out;
  for (int i = 0; i < capacity(); ++i)
    if (mask[i]) out.push_back(element(i));
  return out;
}

Molecule Molecule::padded(int cap) const {
  if (cap < capacity()) throw InvalidMolecule("padded: capacity smaller than current");
  Molecule out;
  out.coords = Coords::Zero(cap, 3);
  out.types = RowMatrix::Zero(cap, types.cols());
  out.mask.assign(cap, 0);
  out.coords.topRows(capacity()) = coords;
  out.types.topRows(capacity()) = types;
  std::copy(mask.begin(), mask.end(), out.mask.begin());
  return out;
}

Molecule Molecule::compacted() const {
  const auto idx = atoms();
  const int n = static_cast<int>(idx.size());
  Molecule out;
  out.coords.resize(n, 3);
  out.types.resize(n, types.cols());
  out.mask.assign(n, 1);
  for (int r = 0; r < n; ++r) {
    out.coords.row(r) = coords.row(idx[r]);
    out.types.row(r) = types.row(idx[r]);
  }
  return out;
}

void Molecule::validate() const {
  if (coords.rows() != capacity() || types.rows() != capacity())
    throw InvalidMolecule("Molecule: shape mismatch");
  for (int i = 0; i < capacity(); ++i) {
    if (mask[i] > 1) throw InvalidMolecule("Molecule: mask must be binary");
    if (mask[i]) {
      int ones = 0;
      for (int j = 0; j < types.cols(); ++j) {
        if (types(i, j) == 1.0) ++ones;
        else if (types(i, j) != 0.0) throw InvalidMolecule("Molecule: types row is not one-hot");
      }
      if (ones != 1) throw InvalidMolecule("Molecule: types row is not one-hot");
      if (!coords.row(i).allFinite()) throw InvalidMolecule("Molecule: non-finite coordinates");
    } else if (!coords.row(i).isZero(0) || !types.row(i).isZero(0)) {
      throw InvalidMolecule("Molecule: padding rows must be zero");
    }
  }
}

// ---------------------------------------------------------------------------
// Rigid motions
// ---------------------------------------------------------------------------

RigidMotion RigidMotion::compose(const RigidMotion& first) const {
  return RigidMotion{rotation * first.rotation, rotation * first.translation + translation};
}

Molecule apply_rigid_motion(const Molecule& mol, const RigidMotion& g) {
  const Eigen::Matrix3d rtr = g.rotation.transpose() * g.rotation;
  if ((rtr - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9)
    throw InvalidMotion("apply_rigid_motion: rotation is not orthogonal");
  Molecule out = mol;
  for (int i = 0; i < mol.capacity(); ++i) {
    if (!mol.mask[i]) continue;
    out.coords.row(i) = (g.rotation * mol.coords.row(i).transpose() + g.translation).transpose();
  }
  return out;
}

Eigen::Matrix3d random_orthogonal(Rng& rng, bool reflect) {
  // Unit quaternion from four normals is Haar on SO(3).
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  Eigen::Matrix3d r = q.toRotationMatrix();
  if (reflect) r.col(0) = -r.col(0);
  return r;
}

Coords project_zero_com(const Coords& coords, const Mask& mask) {
  if (coords.rows() != static_cast<Eigen::Index>(mask.size()))
    throw InvalidMolecule("project_zero_com: mask length mismatch");
  Coords out = coords;
  project_zero_com_inplace(out, mask);
  return out;
}

// ---------------------------------------------------------------------------
// Randomness
// ---------------------------------------------------------------------------

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

SeedSpec SeedSpec::derive(std::uint64_t tag) const {
  return SeedSpec{master_seed, mix64(stream_id ^ mix64(tag ^ 0xA5A5A5A5DEADBEEFULL))};
}

Rng::Rng(const SeedSpec& seed) : key_(mix64(mix64(seed.master_seed) ^ seed.stream_id)) {}

std::uint64_t Rng::next_u64() {
  return mix64(key_ + 0x9E3779B97F4A7C15ULL * (++counter_));
}

double Rng::uniform() {
  // 53 random bits, shifted off zero
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double th = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(th);
  has_spare_ = true;
  return r * std::cos(th);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error("Rng::below: empty range");
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
}

// ---------------------------------------------------------------------------
// Graph hash
// ---------------------------------------------------------------------------

std::uint64_t molecule_graph_hash(const Molecule& mol, const AtomTable& table) {
  const BondGraph graph = infer_bonds(mol, table);
  const auto idx = mol.atoms();
  const int n = static_cast<int>(idx.size());
  // Colour refinement; 1-WL separates all trees and nearly all small graphs.
  std::vector<std::uint64_t> label(n);
  for (int a = 0; a < n; ++a) label[a] = mix64(1000 + mol.element(idx[a]));
  std::vector<int> row_to_atom(mol.capacity(), -1);
  for (int a = 0; a < n; ++a) row_to_atom[idx[a]] = a;
  for (int round = 0; round < std::max(n, 1); ++round) {
    std::vector<std::uint64_t> next(n);
    for (int a = 0; a < n; ++a) {
      std::vector<std::uint64_t> nb;
      for (int j : graph.neighbors[idx[a]]) nb.push_back(label[row_to_atom[j]]);
      std::sort(nb.begin(), nb.end());
      std::uint64_t h = mix64(label[a] ^ 0x51ED270B27A4C3F1ULL);
      for (auto v : nb) h = mix64(h ^ v);
      next[a] = h;
    }
    label = std::move(next);
  }
  std::sort(label.begin(), label.end());
  std::uint64_t h = mix64(static_cast<std::uint64_t>(n));
  for (auto v : label) h = mix64(h ^ v);
  return h;
}

}  // namespace rlpf
