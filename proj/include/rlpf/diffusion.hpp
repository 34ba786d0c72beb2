#pragma once

#include "rlpf/core.hpp"
#include "rlpf/denoiser.hpp"
#include "rlpf/schedule.hpp"

#include <vector>

namespace rlpf {

// z_t over a padded molecule: columns 0..2 coordinates, 3..3+F features.
struct LatentState {
  RowMatrix z;
  int t = 0;
  Mask mask;
};

// One reverse chain z_T → z_0. Index k of `states` holds z_{T-k}; index k of
// `means`/`sigmas` holds the kernel that produced states[k + 1].
struct Trajectory {
  std::vector<RowMatrix> states;
  std::vector<RowMatrix> means;
  std::vector<double> sigmas;
  Mask mask;
  Molecule molecule;
  SeedSpec seed;

  int steps() const { return static_cast<int>(means.size()); }
  const RowMatrix& state_at(int t) const { return states.at(steps() - t); }
  // Kernel p(z_{t-1} | z_t), for t in 1..T.
  const RowMatrix& mean_at(int t) const { return means.at(steps() - t); }
  double sigma_at(int t) const { return sigmas.at(steps() - t); }
};

struct StepResult {
  LatentState next;
  RowMatrix mean;
  double sigma = 0.0;
};

enum class LossWeighting { uniform, snr };

struct PretrainLoss {
  double loss = 0.0;
  std::vector<double> grad;
  int t = 0;
};

// Isotropic normal over masked rows with a zero-centroid coordinate block.
RowMatrix sample_latent_noise(Rng& rng, const Mask& mask, int features);

// [x, h] as a latent matrix.
RowMatrix molecule_latent(const Molecule& mol);

// q(z_t | x, h) = N(α_t [x, h], σ_t² I) restricted to the zero-CoM subspace.
LatentState forward_noise(const Molecule& mol, int t, const NoiseSchedule& s, const SeedSpec& seed);

// Mean of ε − ε̂ squared over masked atom-feature entries at a uniformly drawn t,
// with its parameter gradient.
PretrainLoss pretrain_loss(const PolicyParams& params, const Molecule& mol, const NoiseSchedule& s,
                           const SeedSpec& seed, LossWeighting weighting = LossWeighting::uniform);

// μ(z_t) = z_t / α_{t|s} − σ²_{t|s} / (α_{t|s} σ_t) · ε̂(z_t), s = t − 1.
RowMatrix reverse_mean(const PolicyParams& params, const RowMatrix& z, int t, const NoiseSchedule& s,
                       const Mask& mask, ForwardCache* cache = nullptr);

// Scale applied to ε̂ inside reverse_mean, i.e. ∂μ/∂ε̂ = −coefficient.
double reverse_eps_coefficient(const NoiseSchedule& s, int t);

// One ancestral step; `add_noise = false` returns the mean as the next state.
StepResult reverse_step(const PolicyParams& params, const LatentState& state, const NoiseSchedule& s,
                        const SeedSpec& seed, bool add_noise = true);

// Full reverse chain for a molecule of `n_atoms` padded to `capacity` rows (0 = no padding).
Trajectory sample_trajectory(const PolicyParams& params, int n_atoms, const NoiseSchedule& s,
                             const SeedSpec& seed, int capacity = 0);

// Coordinates from the coordinate block; types one-hot at the feature argmax.
Molecule decode_molecule(const LatentState& z0);

// Empirical distribution of atom counts.
class SizeDistribution {
 public:
  SizeDistribution() = default;
  explicit SizeDistribution(const std::vector<Molecule>& data);
  SizeDistribution(std::vector<int> sizes, std::vector<double> weights);

  int sample(Rng& rng) const;
  int max_atoms() const;
  const std::vector<int>& sizes() const { return sizes_; }
  const std::vector<double>& weights() const { return weights_; }

 private:
  std::vector<int> sizes_;
  std::vector<double> weights_;
};

}  // namespace rlpf
