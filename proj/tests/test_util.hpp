#pragma once

#include "rlpf/core.hpp"
#include "rlpf/denoiser.hpp"

#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

namespace rlpf::test {

inline constexpr std::uint64_t kPinnedH2Hash = 8252213313150796829ULL;

// Random elements, Gaussian coordinates (scale 1.2 Å), centred.
inline Molecule random_molecule(Rng& rng, int n, int features = 4) {
  std::vector<int> el(n);
  Coords x(n, 3);
  for (int i = 0; i < n; ++i) {
    el[i] = static_cast<int>(rng.below(features));
    for (int j = 0; j < 3; ++j) x(i, j) = 1.2 * rng.normal();
  }
  Molecule m = Molecule::from_elements(el, x, features);
  m.coords = project_zero_com(m.coords, m.mask);
  return m;
}

// Latent with a centred coordinate block over the masked rows, zero padding.
inline RowMatrix random_latent(Rng& rng, const Mask& mask, int features = 4) {
  RowMatrix z = RowMatrix::Zero(static_cast<int>(mask.size()), 3 + features);
  for (int i = 0; i < z.rows(); ++i)
    if (mask[i])
      for (int j = 0; j < z.cols(); ++j) z(i, j) = rng.normal();
  project_zero_com_inplace(z.leftCols(3), mask);
  return z;
}

inline Mask make_mask(int n, int capacity) {
  Mask m(capacity, 0);
  for (int i = 0; i < n; ++i) m[i] = 1;
  return m;
}

// Parameters with every entry perturbed, so all gradient paths are active.
inline PolicyParams perturbed_params(int layers, int hidden, std::uint64_t seed, double scale = 0.3) {
  PolicyParams p = init_params(layers, hidden, SeedSpec{seed, 0});
  Rng rng(SeedSpec{seed, 99});
  for (double& v : p.flat_view()) v += scale * (rng.uniform() - 0.5);
  return p;
}

struct GradCheck {
  int checked = 0;
  int passed = 0;
  double fraction() const { return checked ? static_cast<double>(passed) / checked : 0.0; }
};

// Central differences of f at every parameter; a coordinate passes when the
// relative error is < rel or the absolute error is < abs_floor.
inline GradCheck check_gradient(PolicyParams& params, const std::vector<double>& analytic,
                                const std::function<double(const PolicyParams&)>& f, double h = 1e-5,
                                double rel = 1e-4, double abs_floor = 1e-7) {
  GradCheck r;
  auto theta = params.flat_view();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    params.flat_view()[i] = orig + h;
    const double fp = f(params);
    params.flat_view()[i] = orig - h;
    const double fm = f(params);
    params.flat_view()[i] = orig;
    const double fd = (fp - fm) / (2 * h);
    const double err = std::abs(fd - analytic[i]);
    const double scale = std::max(std::abs(fd), std::abs(analytic[i]));
    ++r.checked;
    if (err <= rel * scale || err < abs_floor) ++r.passed;
  }
  return r;
}

}  // namespace rlpf::test
