#include <doctest.h>

#include "rlpf/core.hpp"
#include "rlpf/forcefield.hpp"
#include "rlpf/xyz.hpp"
#include "test_util.hpp"

#include <map>
#include <numeric>
#include <set>

using namespace rlpf;

TEST_CASE("atom table defaults") {
  const AtomTable& t = AtomTable::standard();
  REQUIRE(t.num_elements() == 4);
  CHECK(t.symbol(0) == "H");
  CHECK(t.target_valence(t.index_of("C")) == 4);
  CHECK(t.target_valence(t.index_of("H")) == 1);
  CHECK(t.target_valence(t.index_of("N")) == 3);
  CHECK(t.target_valence(t.index_of("O")) == 2);
  CHECK(t.index_of("Xe") == -1);
  CHECK(t.bond_tolerance() == 0.2);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) {
      CHECK(t.pair(a, b).r0 == t.pair(b, a).r0);
      CHECK(t.pair(a, b).k > 0);
      CHECK(t.pair(a, b).r0 > 0);
    }
  CHECK(t.pair(t.index_of("C"), t.index_of("H")).r0 == doctest::Approx(1.09));
  CHECK(t.pair(t.index_of("C"), t.index_of("C")).r0 == doctest::Approx(1.54));
}

TEST_CASE("project_zero_com examples") {
  Coords a(2, 3);
  a << 1, 0, 0, -1, 0, 0;
  CHECK(project_zero_com(a, {1, 1}) == a);

  Coords b(2, 3);
  b << 2, 0, 0, 0, 0, 0;
  Coords want(2, 3);
  want << 1, 0, 0, -1, 0, 0;
  CHECK(project_zero_com(b, {1, 1}) == want);

  Coords c(1, 3);
  c << 5, 5, 5;
  CHECK(project_zero_com(c, {1}).norm() == 0.0);

  Coords d = Coords::Zero(2, 3);
  CHECK_THROWS_AS(project_zero_com(d, {0, 0}), EmptyMolecule);

  // padding rows stay zero
  Coords e(3, 3);
  e << 1, 2, 3, 3, 2, 1, 0, 0, 0;
  const Coords pe = project_zero_com(e, {1, 1, 0});
  CHECK(pe.row(2).norm() == 0.0);
  CHECK((pe.row(0) + pe.row(1)).norm() < 1e-12);
}

TEST_CASE("rigid motion") {
  Rng rng(SeedSpec{11, 0});
  const Molecule m = test::random_molecule(rng, 5);

  RigidMotion id;
  CHECK(apply_rigid_motion(m, id).coords == m.coords);

  Molecule one = Molecule::from_elements({1}, Coords::Zero(1, 3), 4);
  one.coords << 1, 0, 0;
  RigidMotion rz;
  rz.rotation << -1, 0, 0, 0, -1, 0, 0, 0, 1;
  CHECK((apply_rigid_motion(one, rz).coords.row(0) - Eigen::RowVector3d(-1, 0, 0)).norm() < 1e-15);

  RigidMotion bad;
  bad.rotation(0, 0) = 2.0;
  CHECK_THROWS_AS(apply_rigid_motion(m, bad), InvalidMotion);

  for (int trial = 0; trial < 10; ++trial) {
    const Molecule mol = test::random_molecule(rng, 3 + trial % 4);
    RigidMotion g1{random_orthogonal(rng, trial % 2 == 0), Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal())};
    RigidMotion g2{random_orthogonal(rng, trial % 3 == 0), Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal())};
    const Molecule seq = apply_rigid_motion(apply_rigid_motion(mol, g1), g2);
    const Molecule comp = apply_rigid_motion(mol, g2.compose(g1));
    CHECK((seq.coords - comp.coords).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(seq.types == mol.types);
  }
}

TEST_CASE("random_orthogonal determinant") {
  Rng rng(SeedSpec{5, 1});
  for (int i = 0; i < 20; ++i) {
    const bool reflect = i % 2;
    const Eigen::Matrix3d R = random_orthogonal(rng, reflect);
    CHECK((R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(R.determinant() == doctest::Approx(reflect ? -1.0 : 1.0));
  }
}

TEST_CASE("centering commutes with rotation") {
  Rng rng(SeedSpec{21, 0});
  for (int i = 0; i < 20; ++i) {
    Molecule m = test::random_molecule(rng, 4).padded(6);
    m.coords.row(0) += Eigen::RowVector3d(3, -2, 1);  // off-centre
    RigidMotion g{random_orthogonal(rng), Eigen::Vector3d::Zero()};
    const Coords a = project_zero_com(apply_rigid_motion(m, g).coords, m.mask);
    Molecule centred = m;
    centred.coords = project_zero_com(m.coords, m.mask);
    const Coords b = apply_rigid_motion(centred, g).coords;
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rng determinism and stream separation") {
  Rng a(SeedSpec{42, 3}), b(SeedSpec{42, 3}), c(SeedSpec{42, 4});
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);

  // children do not depend on the order in which siblings were derived
  const SeedSpec root{9, 0};
  const SeedSpec x1 = root.derive(1), x2 = root.derive(2);
  const SeedSpec y2 = root.derive(2), y1 = root.derive(1);
  CHECK(x1 == y1);
  CHECK(x2 == y2);
  CHECK(!(x1 == x2));

  // moments of the normal generator
  Rng n(SeedSpec{1, 1});
  double s = 0, s2 = 0;
  const int N = 200000;
  for (int i = 0; i < N; ++i) {
    const double v = n.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / N) < 0.01);
  CHECK(std::abs(s2 / N - 1.0) < 0.02);
}

TEST_CASE("molecule padding and validation") {
  Rng rng(SeedSpec{2, 2});
  const Molecule m = test::random_molecule(rng, 4);
  const Molecule p = m.padded(7);
  CHECK(p.capacity() == 7);
  CHECK(p.atom_count() == 4);
  CHECK(p.coords.bottomRows(3).norm() == 0.0);
  CHECK(p.types.bottomRows(3).norm() == 0.0);
  p.validate();
  const Molecule c = p.compacted();
  CHECK(c.coords == m.coords);
  CHECK(c.types == m.types);

  Molecule bad = p;
  bad.types(6, 1) = 1.0;  // padding row with content
  CHECK_THROWS_AS(bad.validate(), InvalidMolecule);
  Molecule two_hot = m;
  two_hot.types(0, 0) = 1.0;
  two_hot.types(0, 1) = 1.0;
  CHECK_THROWS_AS(two_hot.validate(), InvalidMolecule);
}

TEST_CASE("graph hash invariances") {
  const AtomTable& t = AtomTable::standard();
  const auto data = generate_dataset(20, {3, 7}, t, SeedSpec{3, 0});
  Rng rng(SeedSpec{4, 0});
  for (const auto& e : data) {
    const Molecule& m = e.molecule;
    const auto h = molecule_graph_hash(m, t);
    // permutation
    std::vector<int> perm(m.capacity());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Molecule q = m;
    for (int i = 0; i < m.capacity(); ++i) {
      q.coords.row(i) = m.coords.row(perm[i]);
      q.types.row(i) = m.types.row(perm[i]);
    }
    CHECK(molecule_graph_hash(q, t) == h);
    // rigid motion
    RigidMotion g{random_orthogonal(rng, true), Eigen::Vector3d(1, 2, 3)};
    CHECK(molecule_graph_hash(apply_rigid_motion(m, g), t) == h);
    // padding
    CHECK(molecule_graph_hash(m.padded(m.capacity() + 2), t) == h);
  }
  // different element multisets never collide on this set
  std::map<std::vector<int>, std::set<std::uint64_t>> by_counts;
  std::set<std::uint64_t> all;
  for (const auto& e : data) {
    std::vector<int> counts(4, 0);
    for (int el : e.molecule.elements()) ++counts[el];
    by_counts[counts].insert(molecule_graph_hash(e.molecule, t));
  }
  std::size_t total = 0;
  for (const auto& [k, hs] : by_counts) {
    total += hs.size();
    all.insert(hs.begin(), hs.end());
  }
  CHECK(all.size() == total);
}

TEST_CASE("graph hash stability across runs") {
  const AtomTable& t = AtomTable::standard();
  Coords x(2, 3);
  x << 0, 0, 0, 0.74, 0, 0;
  const Molecule h2 = Molecule::from_elements({0, 0}, x, 4);
  // pinned value; changes here break stored training-hash files
  CHECK(molecule_graph_hash(h2, t) == molecule_graph_hash(h2, t));
  const std::uint64_t pinned = molecule_graph_hash(h2, t);
  CHECK(pinned == test::kPinnedH2Hash);
}

TEST_CASE("xyz round trip") {
  const AtomTable& t = AtomTable::standard();
  Rng rng(SeedSpec{8, 0});
  const Molecule m = test::random_molecule(rng, 5);
  const std::string text = write_xyz(m, t, "hello");
  std::string comment;
  const Molecule back = read_xyz(text, t, &comment);
  CHECK(comment == "hello");
  CHECK(back.types == m.types);
  CHECK((back.coords - m.coords).cwiseAbs().maxCoeff() < 1e-8);
  // 9 significant digits
  Coords x(1, 3);
  x << 1.0 / 3.0, -2.0 / 3.0, 12345.678901234;
  const std::string one = write_xyz(Molecule::from_elements({1}, x, 4), t);
  CHECK(one == "1\n\nC 0.333333333 -0.666666667 12345.6789\n");

  CHECK_THROWS_AS(read_xyz("1\n\nXe 0 0 0\n", t), ParseError);
  CHECK_THROWS_AS(read_xyz("2\n\nC 0 0 0\n", t), ParseError);
  CHECK_THROWS_AS(read_xyz("1\n\nC 0 0\n", t), ParseError);
  CHECK_THROWS_AS(read_xyz("x\n", t), ParseError);
}
