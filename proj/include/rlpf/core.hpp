#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rlpf {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "Error"; }
};

#define RLPF_DEFINE_ERROR(Name)                                      \
  class Name : public Error {                                        \
   public:                                                           \
    using Error::Error;                                              \
    const char* kind() const noexcept override { return #Name; }     \
  };

RLPF_DEFINE_ERROR(EmptyMolecule)
RLPF_DEFINE_ERROR(InvalidMolecule)
RLPF_DEFINE_ERROR(InvalidMotion)
RLPF_DEFINE_ERROR(ParseError)

// ---------------------------------------------------------------------------
// Matrix aliases
// ---------------------------------------------------------------------------

using Coords = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// Atom table
// ---------------------------------------------------------------------------

struct PairParams {
  double r0 = 1.0;  // Å
  double k = 20.0;  // eV/Å²
};

struct Repulsion {
  double A = 5.0;    // eV
  double rho = 0.4;  // Å
};

class AtomTable {
 public:
  AtomTable(std::vector<std::string> elements, std::vector<int> target_valence,
            std::map<std::pair<int, int>, PairParams> pair_params, Repulsion repulsion,
            double bond_tolerance);

  // H, C, N, O with single-bond lengths from covalent radii sums.
  static const AtomTable& standard();

  int num_elements() const { return static_cast<int>(elements_.size()); }
  const std::string& symbol(int e) const { return elements_.at(e); }
  // -1 when the symbol is not part of the table.
  int index_of(const std::string& symbol) const;
  int target_valence(int e) const { return valence_.at(e); }
  const PairParams& pair(int a, int b) const;
  const Repulsion& repulsion() const { return repulsion_; }
  double bond_tolerance() const { return bond_tolerance_; }

 private:
  std::vector<std::string> elements_;
  std::vector<int> valence_;
  std::vector<PairParams> pairs_;  // dense F×F, symmetric
  Repulsion repulsion_;
  double bond_tolerance_;
};

// ---------------------------------------------------------------------------
// Molecule
// ---------------------------------------------------------------------------

// Padded molecule: rows with mask 0 are padding and hold zeros.
struct Molecule {
  Coords coords;            // N×3, Å
  RowMatrix types;          // N×F one-hot
  Mask mask;                // N

  Molecule() = default;
  Molecule(Coords c, RowMatrix t, Mask m);

  // Builds an unpadded molecule from element indices.
  static Molecule from_elements(const std::vector<int>& elements, const Coords& coords,
                                int num_elements);

  int capacity() const { return static_cast<int>(mask.size()); }
  int atom_count() const;
  int num_features() const { return static_cast<int>(types.cols()); }
  // Argmax of the one-hot row, lowest index on ties.
  int element(int i) const;
  // Indices of masked-in atoms in row order.
  std::vector<int> atoms() const;
  // Element index of each masked-in atom, in row order.
  std::vector<int> elements() const;

  // Same molecule with `capacity` rows; extra rows are zero padding.
  Molecule padded(int capacity) const;
  // Masked-in rows only.
  Molecule compacted() const;

  // Throws InvalidMolecule when the invariants do not hold.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Rigid motions
// ---------------------------------------------------------------------------

struct RigidMotion {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  // g2.compose(g1) applies g1 first, then g2.
  RigidMotion compose(const RigidMotion& first) const;
};

// ---------------------------------------------------------------------------
// Deterministic randomness
// ---------------------------------------------------------------------------

struct SeedSpec {
  std::uint64_t master_seed = 0;
  std::uint64_t stream_id = 0;

  // Child stream keyed by `tag`; independent of derivation order across siblings.
  SeedSpec derive(std::uint64_t tag) const;
  SeedSpec derive(std::uint64_t a, std::uint64_t b) const { return derive(a).derive(b); }

  bool operator==(const SeedSpec&) const = default;
};

std::uint64_t mix64(std::uint64_t x);

// Counter-based generator: draw i is a pure function of (seed, i).
class Rng {
 public:
  explicit Rng(const SeedSpec& seed);

  std::uint64_t next_u64();
  // Uniform in (0, 1).
  double uniform();
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// Subtracts the masked-in centroid from masked-in rows. Throws EmptyMolecule.
Coords project_zero_com(const Coords& coords, const Mask& mask);

// In-place variant over any N×3 block whose rows are atoms.
template <class Derived>
void project_zero_com_inplace(const Eigen::MatrixBase<Derived>& block, const Mask& mask) {
  auto& x = const_cast<Eigen::MatrixBase<Derived>&>(block);
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  int n = 0;
  for (int i = 0; i < static_cast<int>(mask.size()); ++i) {
    if (!mask[i]) continue;
    sum += x.row(i).transpose();
    ++n;
  }
  if (n == 0) throw EmptyMolecule("project_zero_com: mask has no atoms");
  const Eigen::Vector3d mean = sum / n;
  for (int i = 0; i < static_cast<int>(mask.size()); ++i)
    if (mask[i]) x.row(i) -= mean.transpose();
}

// Throws InvalidMotion if the rotation is not orthogonal (tolerance 1e-9).
Molecule apply_rigid_motion(const Molecule& mol, const RigidMotion& g);

// Haar-random orthogonal matrix; det = -1 when `reflect`.
Eigen::Matrix3d random_orthogonal(Rng& rng, bool reflect = false);

// Digest of the inferred bond graph and element multiset; invariant under
// atom permutation and rigid motion.
std::uint64_t molecule_graph_hash(const Molecule& mol, const AtomTable& table);

}  // namespace rlpf
