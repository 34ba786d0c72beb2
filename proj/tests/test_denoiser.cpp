#include <doctest.h>

#include "rlpf/denoiser.hpp"
#include "test_util.hpp"

#include <bit>
#include <utility>

using namespace rlpf;

TEST_CASE("parameter count by architecture arithmetic") {
  // embedding: Linear(F+1 → H); edge: Linear(2H+1 → H), Linear(H → H);
  // coordinate gate: Linear(H → H), Linear(H → 1, no bias); node: Linear(2H → H), Linear(H → H);
  // readout: Linear(H → F)
  auto linear = [](int in, int out, bool bias = true) { return in * out + (bias ? out : 0); };
  for (int L : {1, 2, 3})
    for (int H : {4, 16, 32}) {
      const int F = 4;
      int want = linear(F + 1, H) + linear(H, F);
      want += L * (linear(2 * H + 1, H) + linear(H, H) + linear(H, H) + linear(H, 1, false) + linear(2 * H, H) + linear(H, H));
      CHECK(param_count(DenoiserShape{L, H, F}) == static_cast<std::size_t>(want));
      CHECK(init_params(L, H, SeedSpec{1, 0}).size() == static_cast<std::size_t>(want));
    }
  CHECK(param_count(DenoiserShape{2, 16, 4}) == 3972);
}

TEST_CASE("init is deterministic and starts with zero coordinate output") {
  const PolicyParams a = init_params(2, 16, SeedSpec{3, 0});
  const PolicyParams b = init_params(2, 16, SeedSpec{3, 0});
  CHECK(std::equal(a.flat_view().begin(), a.flat_view().end(), b.flat_view().begin()));
  CHECK(a.digest() == b.digest());
  CHECK(init_params(2, 16, SeedSpec{4, 0}).digest() != a.digest());
  CHECK_THROWS(init_params(0, 16, SeedSpec{}));
  CHECK_THROWS(init_params(2, 3, SeedSpec{}));

  Rng rng(SeedSpec{1, 5});
  const Mask mask = test::make_mask(5, 7);
  const RowMatrix z = test::random_latent(rng, mask);
  const DenoiserOutput out = forward(a, z, 0.3, mask);
  CHECK(out.eps_x.norm() == 0.0);
  CHECK(out.eps_h.bottomRows(2).norm() == 0.0);
}

TEST_CASE("flat view round trip is bit exact") {
  PolicyParams p = init_params(2, 8, SeedSpec{1, 1});
  Rng rng(SeedSpec{2, 2});
  std::vector<double> vals(p.size());
  for (double& v : vals) v = rng.normal() * 1e-3 + 1e300 * (rng.uniform() < 0.01);
  std::copy(vals.begin(), vals.end(), p.flat_view().begin());
  const auto view = std::as_const(p).flat_view();
  for (std::size_t i = 0; i < vals.size(); ++i) CHECK(std::bit_cast<std::uint64_t>(view[i]) == std::bit_cast<std::uint64_t>(vals[i]));
}

TEST_CASE("equivariance under rotations and reflections") {
  const PolicyParams p = test::perturbed_params(2, 16, 7);
  Rng rng(SeedSpec{7, 7});
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + trial % 6;
    const Mask mask = test::make_mask(n, n + trial % 3);
    const RowMatrix z = test::random_latent(rng, mask);
    const Eigen::Matrix3d R = random_orthogonal(rng, trial % 2 == 1);
    RowMatrix zr = z;
    zr.leftCols(3) = z.leftCols(3) * R.transpose();
    const double tf = rng.uniform();
    const DenoiserOutput a = forward(p, z, tf, mask);
    const DenoiserOutput b = forward(p, zr, tf, mask);
    worst = std::max(worst, (a.eps_x * R.transpose() - b.eps_x).cwiseAbs().maxCoeff());
    worst = std::max(worst, (a.eps_h - b.eps_h).cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-8);
}

TEST_CASE("output centroid, padding and permutation") {
  const PolicyParams p = test::perturbed_params(2, 16, 9);
  Rng rng(SeedSpec{9, 9});
  const Mask m5 = test::make_mask(5, 5);
  const RowMatrix z = test::random_latent(rng, m5);
  const DenoiserOutput a = forward(p, z, 0.5, m5);
  CHECK(a.eps_x.colwise().sum().cwiseAbs().maxCoeff() < 1e-9);

  // padded twin, padding scattered between atoms
  const Mask scattered{1, 0, 1, 1, 0, 1, 1, 0};
  RowMatrix zp = RowMatrix::Zero(8, 7);
  const int rows[] = {0, 2, 3, 5, 6};
  for (int i = 0; i < 5; ++i) zp.row(rows[i]) = z.row(i);
  const DenoiserOutput b = forward(p, zp, 0.5, scattered);
  for (int i = 0; i < 5; ++i) {
    CHECK(b.eps_x.row(rows[i]) == a.eps_x.row(i));
    CHECK(b.eps_h.row(rows[i]) == a.eps_h.row(i));
  }
  CHECK(b.eps_x.row(1).norm() == 0.0);
  CHECK(b.eps_h.row(7).norm() == 0.0);

  // permutation
  const int perm[] = {3, 0, 4, 1, 2};
  RowMatrix zq(5, 7);
  for (int i = 0; i < 5; ++i) zq.row(i) = z.row(perm[i]);
  const DenoiserOutput c = forward(p, zq, 0.5, m5);
  for (int i = 0; i < 5; ++i) {
    CHECK((c.eps_x.row(i) - a.eps_x.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((c.eps_h.row(i) - a.eps_h.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("forward rejects off-centre input") {
  const PolicyParams p = init_params(2, 8, SeedSpec{1, 0});
  Rng rng(SeedSpec{1, 1});
  const Mask mask = test::make_mask(3, 3);
  RowMatrix z = test::random_latent(rng, mask);
  z(0, 0) += 1e-3;
  CHECK_THROWS_AS(forward(p, z, 0.1, mask), NotCentered);
}

TEST_CASE("backward matches central differences") {
  PolicyParams p = test::perturbed_params(2, 16, 13);
  Rng rng(SeedSpec{13, 1});
  const Mask mask = test::make_mask(5, 6);
  const RowMatrix z = test::random_latent(rng, mask);
  // loss = ½‖eps_x‖² + Σ w ⊙ eps_h with fixed random weights
  RowMatrix w(6, 4);
  for (int i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  auto loss = [&](const PolicyParams& q) {
    const DenoiserOutput o = forward(q, z, 0.37, mask);
    return 0.5 * o.eps_x.squaredNorm() + (w.array() * o.eps_h.array()).sum();
  };
  ForwardCache cache;
  const DenoiserOutput o = forward(p, z, 0.37, mask, &cache);
  DenoiserOutput up{o.eps_x, w};
  for (int i = 0; i < 6; ++i)
    if (!mask[i]) up.eps_h.row(i).setZero();
  const std::vector<double> g = backward(p, cache, up);
  const test::GradCheck r = test::check_gradient(p, g, loss);
  CHECK(r.fraction() >= 0.95);
  MESSAGE("gradient agreement " << r.passed << "/" << r.checked);
}

TEST_CASE("backward linearity and stale cache") {
  PolicyParams p = test::perturbed_params(2, 8, 17);
  Rng rng(SeedSpec{17, 1});
  const Mask mask = test::make_mask(4, 4);
  const RowMatrix z = test::random_latent(rng, mask);
  ForwardCache cache;
  forward(p, z, 0.2, mask, &cache);

  DenoiserOutput zero{Coords::Zero(4, 3), RowMatrix::Zero(4, 4)};
  for (double g : backward(p, cache, zero)) CHECK(g == 0.0);

  DenoiserOutput u1{Coords::Random(4, 3), RowMatrix::Random(4, 4)};
  DenoiserOutput u2{Coords::Random(4, 3), RowMatrix::Random(4, 4)};
  DenoiserOutput u12{u1.eps_x + u2.eps_x, u1.eps_h + u2.eps_h};
  const auto g1 = backward(p, cache, u1), g2 = backward(p, cache, u2), g12 = backward(p, cache, u12);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(g1[i] + g2[i] - g12[i]) <= 1e-12 * (1 + std::abs(g12[i])));

  p.flat_view()[0] += 1e-3;
  CHECK_THROWS_AS(backward(p, cache, u1), StaleCache);
}
