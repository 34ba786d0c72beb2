#pragma once

#include "rlpf/core.hpp"
#include "rlpf/denoiser.hpp"
#include "rlpf/schedule.hpp"

#include <span>
#include <vector>

namespace rlpf {

RLPF_DEFINE_ERROR(InvalidSigma)
RLPF_DEFINE_ERROR(MisalignedRatio)
RLPF_DEFINE_ERROR(InsufficientBatch)
RLPF_DEFINE_ERROR(AbortUpdate)

// log p(z_s | z_t) without the Gaussian normalization constant.
struct StepLogProb {
  double value = 0.0;
  int t = 0;
  int trajectory_id = 0;
};

// −½ Σ_i M_i · d⁻¹ Σ_j ((z_ij − μ_ij) / σ)², d = latent width. Throws InvalidSigma for σ <= 0.
StepLogProb masked_logp(const RowMatrix& z_s, const RowMatrix& mu, double sigma, const Mask& mask,
                        int t = 0, int trajectory_id = 0);

// exp(new − old). Throws MisalignedRatio unless both refer to the same (t, trajectory).
double importance_ratio(const StepLogProb& logp_new, const StepLogProb& logp_old);

struct AdvantageStats {
  double mean = 0.0;
  double std = 1.0;  // floored at 1e-8
  double clip_range = 1.0;
};

struct Advantages {
  std::vector<double> values;
  AdvantageStats stats;
};

// clip((r − mean) / max(std, 1e-8), ±clip_range) with population std over the batch.
// Throws InsufficientBatch for fewer than two rewards.
Advantages standardize_advantages(std::span<const double> rewards, double clip_range = 1.0);

// Exponential moving statistics as an alternative to per-batch standardization.
class RunningRewardStats {
 public:
  explicit RunningRewardStats(double decay = 0.9) : decay_(decay) {}
  Advantages standardize(std::span<const double> rewards, double clip_range = 1.0);

  double mean() const { return mean_; }
  double var() const { return var_; }
  bool initialized() const { return initialized_; }
  void restore(double mean, double var, bool initialized) {
    mean_ = mean;
    var_ = var;
    initialized_ = initialized;
  }

 private:
  double decay_;
  double mean_ = 0.0;
  double var_ = 1.0;
  bool initialized_ = false;
};

struct ClipConfig {
  double epsilon = 0.2;
  int inner_epochs = 1;
  int minibatch = 0;  // (k, t) pairs per optimizer step; 0 = all

  void validate() const;
};

struct PpoResult {
  double objective = 0.0;            // Σ min(I·Â, clip(I, 1±ε)·Â)
  std::vector<double> grad_ratio;    // ∂objective/∂I per term: Â, or 0 where the clip binds
  std::vector<double> grad_logp;     // ∂objective/∂log p_new = I · ∂objective/∂I
  double clip_fraction = 0.0;        // share of terms with |I − 1| > ε
};

// Clipped surrogate over aligned (ratio, advantage) terms.
PpoResult ppo_objective(std::span<const double> ratios, std::span<const double> advantages,
                        const ClipConfig& cfg);

// ---------------------------------------------------------------------------
// Per-step log-likelihood under the current parameters
// ---------------------------------------------------------------------------

struct StepEval {
  StepLogProb logp;
  RowMatrix mean;
  ForwardCache cache;
};

// Recomputes μ_θ(z_t) and log p_θ(z_s | z_t) for a recorded transition.
StepEval evaluate_step(const PolicyParams& params, const RowMatrix& z_t, const RowMatrix& z_s, int t,
                       double sigma, const NoiseSchedule& schedule, const Mask& mask,
                       int trajectory_id = 0);

// Adds weight · ∂log p/∂θ for an evaluated step into `grad`.
void accumulate_logp_grad(const PolicyParams& params, const StepEval& step, const RowMatrix& z_s,
                          double sigma, const NoiseSchedule& schedule, const Mask& mask, double weight,
                          std::span<double> grad);

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamState {
  std::vector<double> m, v;
  long step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// Decoupled weight decay followed by the bias-corrected Adam update; minimizes.
// Throws AbortUpdate (parameters untouched) if the gradient has a non-finite entry.
void adamw_step(PolicyParams& params, std::span<const double> grad, AdamState& state,
                const AdamConfig& cfg);

}  // namespace rlpf
