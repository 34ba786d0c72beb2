#include "rlpf/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace rlpf {

namespace {

void check_centered(const RowMatrix& z, const Mask& mask, const char* where) {
  Eigen::RowVector3d com = Eigen::RowVector3d::Zero();
  double scale = 1.0;
  int n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      com += z.block<1, 3>(i, 0);
      scale = std::max(scale, z.block<1, 3>(i, 0).cwiseAbs().maxCoeff());
      ++n;
    }
  if (n == 0) throw EmptyMolecule(std::string(where) + ": no atoms");
  if ((com / n).cwiseAbs().maxCoeff() > 1e-6 * scale)
    throw NotCentered(std::string(where) + ": coordinates not centered");
}

}  // namespace

RowMatrix sample_latent_noise(Rng& rng, const Mask& mask, int features) {
  const int N = static_cast<int>(mask.size());
  RowMatrix eps = RowMatrix::Zero(N, 3 + features);
  for (int i = 0; i < N; ++i) {
    if (!mask[i]) continue;
    for (int j = 0; j < 3 + features; ++j) eps(i, j) = rng.normal();
  }
  project_zero_com_inplace(eps.leftCols(3), mask);
  return eps;
}

RowMatrix molecule_latent(const Molecule& mol) {
  RowMatrix z(mol.capacity(), 3 + mol.num_features());
  z << mol.coords, mol.types;
  return z;
}

LatentState forward_noise(const Molecule& mol, int t, const NoiseSchedule& s, const SeedSpec& seed) {
  if (t < 1 || t > s.steps()) throw InvalidStepPair("forward_noise: t must lie in 1..T");
  Rng rng(seed);
  const RowMatrix eps = sample_latent_noise(rng, mol.mask, mol.num_features());
  return LatentState{s.alpha(t) * molecule_latent(mol) + s.sigma(t) * eps, t, mol.mask};
}

PretrainLoss pretrain_loss(const PolicyParams& params, const Molecule& mol, const NoiseSchedule& s,
                           const SeedSpec& seed, LossWeighting weighting) {
  check_centered(molecule_latent(mol), mol.mask, "pretrain_loss");
  Rng rng(seed);
  const int t = 1 + static_cast<int>(rng.below(s.steps()));
  const int F = mol.num_features();
  const RowMatrix eps = sample_latent_noise(rng, mol.mask, F);
  const RowMatrix z = s.alpha(t) * molecule_latent(mol) + s.sigma(t) * eps;

  ForwardCache cache;
  const DenoiserOutput out = forward(params, z, static_cast<double>(t) / s.steps(), mol.mask, &cache);

  double weight = 1.0;
  if (weighting == LossWeighting::snr) weight = 0.5 * (s.snr(t - 1) / s.snr(t) - 1.0);

  const double count = static_cast<double>(mol.atom_count()) * (3 + F);
  DenoiserOutput upstream{Coords::Zero(mol.capacity(), 3), RowMatrix::Zero(mol.capacity(), F)};
  double sum = 0.0;
  for (int i = 0; i < mol.capacity(); ++i) {
    if (!mol.mask[i]) continue;
    for (int j = 0; j < 3; ++j) {
      const double r = out.eps_x(i, j) - eps(i, j);
      sum += r * r;
      upstream.eps_x(i, j) = 2.0 * weight * r / count;
    }
    for (int j = 0; j < F; ++j) {
      const double r = out.eps_h(i, j) - eps(i, 3 + j);
      sum += r * r;
      upstream.eps_h(i, j) = 2.0 * weight * r / count;
    }
  }
  PretrainLoss result;
  result.loss = weight * sum / count;
  result.t = t;
  result.grad = backward(params, cache, upstream);
  return result;
}

double reverse_eps_coefficient(const NoiseSchedule& s, int t) {
  const Transition tr = transition_params(s, t, t - 1);
  return tr.sigma * tr.sigma / (tr.alpha * s.sigma(t));
}

RowMatrix reverse_mean(const PolicyParams& params, const RowMatrix& z, int t, const NoiseSchedule& s,
                       const Mask& mask, ForwardCache* cache) {
  const Transition tr = transition_params(s, t, t - 1);
  const double coef = reverse_eps_coefficient(s, t);
  const DenoiserOutput out = forward(params, z, static_cast<double>(t) / s.steps(), mask, cache);
  const int F = params.shape().features;
  RowMatrix mu(z.rows(), z.cols());
  mu.leftCols(3) = z.leftCols(3) / tr.alpha - coef * out.eps_x;
  mu.rightCols(F) = z.rightCols(F) / tr.alpha - coef * out.eps_h;
  // exact in theory; removes round-off drift that would otherwise build up over T steps
  project_zero_com_inplace(mu.leftCols(3), mask);
  return mu;
}

StepResult reverse_step(const PolicyParams& params, const LatentState& state, const NoiseSchedule& s,
                        const SeedSpec& seed, bool add_noise) {
  if (state.t < 1) throw InvalidStepPair("reverse_step: t must be >= 1");
  check_centered(state.z, state.mask, "reverse_step");
  StepResult res;
  res.mean = reverse_mean(params, state.z, state.t, s, state.mask);
  res.sigma = transition_params(s, state.t, state.t - 1).sigma_rev;
  res.next = LatentState{res.mean, state.t - 1, state.mask};
  if (add_noise) {
    Rng rng(seed);
    res.next.z += res.sigma * sample_latent_noise(rng, state.mask, params.shape().features);
  }
  return res;
}

Trajectory sample_trajectory(const PolicyParams& params, int n_atoms, const NoiseSchedule& s,
                             const SeedSpec& seed, int capacity) {
  if (n_atoms < 1) throw EmptyMolecule("sample_trajectory: n_atoms must be positive");
  if (capacity == 0) capacity = n_atoms;
  if (capacity < n_atoms) throw Error("sample_trajectory: capacity below atom count");
  const int T = s.steps();
  const int F = params.shape().features;

  Trajectory traj;
  traj.seed = seed;
  traj.mask.assign(capacity, 0);
  std::fill(traj.mask.begin(), traj.mask.begin() + n_atoms, 1);
  traj.states.reserve(T + 1);
  traj.means.reserve(T);
  traj.sigmas.reserve(T);

  Rng prior(seed.derive(0));
  LatentState state{sample_latent_noise(prior, traj.mask, F), T, traj.mask};
  traj.states.push_back(state.z);
  for (int t = T; t >= 1; --t) {
    StepResult step = reverse_step(params, state, s, seed.derive(t));
    traj.means.push_back(std::move(step.mean));
    traj.sigmas.push_back(step.sigma);
    state = std::move(step.next);
    traj.states.push_back(state.z);
  }
  traj.molecule = decode_molecule(state);
  return traj;
}

Molecule decode_molecule(const LatentState& z0) {
  const int N = static_cast<int>(z0.mask.size());
  const int F = static_cast<int>(z0.z.cols()) - 3;
  Molecule mol(Coords::Zero(N, 3), RowMatrix::Zero(N, F), z0.mask);
  for (int i = 0; i < N; ++i) {
    if (!z0.mask[i]) continue;
    mol.coords.row(i) = z0.z.block<1, 3>(i, 0);
    int best = 0;
    for (int j = 1; j < F; ++j)
      if (z0.z(i, 3 + j) > z0.z(i, 3 + best)) best = j;
    mol.types(i, best) = 1.0;
  }
  return mol;
}

SizeDistribution::SizeDistribution(const std::vector<Molecule>& data) {
  std::vector<double> counts;
  for (const auto& m : data) {
    const int n = m.atom_count();
    if (n >= static_cast<int>(counts.size())) counts.resize(n + 1, 0.0);
    counts[n] += 1.0;
  }
  for (int n = 0; n < static_cast<int>(counts.size()); ++n)
    if (counts[n] > 0) {
      sizes_.push_back(n);
      weights_.push_back(counts[n] / data.size());
    }
  if (sizes_.empty()) throw Error("SizeDistribution: empty dataset");
}

SizeDistribution::SizeDistribution(std::vector<int> sizes, std::vector<double> weights)
    : sizes_(std::move(sizes)), weights_(std::move(weights)) {
  if (sizes_.empty() || sizes_.size() != weights_.size())
    throw Error("SizeDistribution: sizes and weights must be nonempty and aligned");
  double total = 0;
  for (double w : weights_) total += w;
  for (double& w : weights_) w /= total;
}

int SizeDistribution::sample(Rng& rng) const {
  double u = rng.uniform();
  for (std::size_t i = 0; i < sizes_.size(); ++i) {
    if (u < weights_[i]) return sizes_[i];
    u -= weights_[i];
  }
  return sizes_.back();
}

int SizeDistribution::max_atoms() const {
  return sizes_.empty() ? 0 : *std::max_element(sizes_.begin(), sizes_.end());
}

}  // namespace rlpf
