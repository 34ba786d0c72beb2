#include "rlpf/policy.hpp"

#include "rlpf/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace rlpf {

StepLogProb masked_logp(const RowMatrix& z_s, const RowMatrix& mu, double sigma, const Mask& mask,
                        int t, int trajectory_id) {
  if (!(sigma > 0)) throw InvalidSigma("masked_logp: sigma must be positive");
  if (z_s.rows() != mu.rows() || z_s.cols() != mu.cols() ||
      z_s.rows() != static_cast<Eigen::Index>(mask.size()))
    throw Error("masked_logp: shape mismatch");
  const double d = static_cast<double>(z_s.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < z_s.rows(); ++i) {
    if (!mask[i]) continue;
    double row = 0.0;
    for (Eigen::Index j = 0; j < z_s.cols(); ++j) {
      const double u = (z_s(i, j) - mu(i, j)) / sigma;
      row += u * u;
    }
    total += row / d;
  }
  return StepLogProb{-0.5 * total, t, trajectory_id};
}

double importance_ratio(const StepLogProb& logp_new, const StepLogProb& logp_old) {
  if (logp_new.t != logp_old.t || logp_new.trajectory_id != logp_old.trajectory_id)
    throw MisalignedRatio("importance_ratio: log-probabilities refer to different transitions");
  return std::exp(logp_new.value - logp_old.value);
}

namespace {

Advantages apply_stats(std::span<const double> rewards, double mean, double std, double clip_range) {
  Advantages out;
  out.stats = AdvantageStats{mean, std::max(std, 1e-8), clip_range};
  out.values.reserve(rewards.size());
  for (double r : rewards)
    out.values.push_back(std::clamp((r - mean) / out.stats.std, -clip_range, clip_range));
  return out;
}

}  // namespace

Advantages standardize_advantages(std::span<const double> rewards, double clip_range) {
  if (rewards.size() < 2) throw InsufficientBatch("standardize_advantages: need at least two rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= rewards.size();
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= rewards.size();
  return apply_stats(rewards, mean, std::sqrt(var), clip_range);
}

Advantages RunningRewardStats::standardize(std::span<const double> rewards, double clip_range) {
  if (rewards.size() < 2) throw InsufficientBatch("standardize: need at least two rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= rewards.size();
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= rewards.size();
  if (!initialized_) {
    mean_ = mean;
    var_ = var;
    initialized_ = true;
  } else {
    mean_ = decay_ * mean_ + (1 - decay_) * mean;
    var_ = decay_ * var_ + (1 - decay_) * var;
  }
  return apply_stats(rewards, mean_, std::sqrt(var_), clip_range);
}

void ClipConfig::validate() const {
  if (!(epsilon > 0)) throw Error("ClipConfig: epsilon must be positive");
  if (inner_epochs < 1) throw Error("ClipConfig: inner_epochs must be >= 1");
  if (minibatch < 0) throw Error("ClipConfig: minibatch must be >= 0");
}

PpoResult ppo_objective(std::span<const double> ratios, std::span<const double> advantages,
                        const ClipConfig& cfg) {
  cfg.validate();
  if (ratios.size() != advantages.size()) throw Error("ppo_objective: ratios and advantages differ in length");
  PpoResult res;
  res.grad_logp.resize(ratios.size());
  res.grad_ratio.resize(ratios.size());
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double I = ratios[i], A = advantages[i];
    const double Ic = std::clamp(I, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    const double unclipped = I * A, clipped_term = Ic * A;
    if (unclipped <= clipped_term) {
      res.objective += unclipped;
      res.grad_ratio[i] = A;
      res.grad_logp[i] = unclipped;
    } else {
      res.objective += clipped_term;
      res.grad_ratio[i] = 0.0;
      res.grad_logp[i] = 0.0;
    }
    if (std::abs(I - 1.0) > cfg.epsilon) ++clipped;
  }
  res.clip_fraction = ratios.empty() ? 0.0 : static_cast<double>(clipped) / ratios.size();
  return res;
}

StepEval evaluate_step(const PolicyParams& params, const RowMatrix& z_t, const RowMatrix& z_s, int t,
                       double sigma, const NoiseSchedule& schedule, const Mask& mask,
                       int trajectory_id) {
  StepEval ev;
  ev.mean = reverse_mean(params, z_t, t, schedule, mask, &ev.cache);
  ev.logp = masked_logp(z_s, ev.mean, sigma, mask, t, trajectory_id);
  return ev;
}

void accumulate_logp_grad(const PolicyParams& params, const StepEval& step, const RowMatrix& z_s,
                          double sigma, const NoiseSchedule& schedule, const Mask& mask, double weight,
                          std::span<double> grad) {
  if (weight == 0.0) return;
  const int F = params.shape().features;
  const double d = static_cast<double>(3 + F);
  // ∂log p/∂μ = M (z_s − μ) / (d σ²);  ∂μ/∂ε̂ = −coef
  const double scale = -weight * reverse_eps_coefficient(schedule, step.logp.t) / (d * sigma * sigma);
  const int N = static_cast<int>(mask.size());
  DenoiserOutput upstream{Coords::Zero(N, 3), RowMatrix::Zero(N, F)};
  for (int i = 0; i < N; ++i) {
    if (!mask[i]) continue;
    upstream.eps_x.row(i) = scale * (z_s.row(i).head(3) - step.mean.row(i).head(3));
    upstream.eps_h.row(i) = scale * (z_s.row(i).tail(F) - step.mean.row(i).tail(F));
  }
  backward(params, step.cache, upstream, grad);
}

void adamw_step(PolicyParams& params, std::span<const double> grad, AdamState& state,
                const AdamConfig& cfg) {
  const std::size_t n = params.size();
  if (grad.size() != n || state.m.size() != n || state.v.size() != n)
    throw Error("adamw_step: state dimension does not match parameter count");
  for (double g : grad)
    if (!std::isfinite(g)) throw AbortUpdate("adamw_step: non-finite gradient");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto theta = params.flat_view();
  for (std::size_t i = 0; i < n; ++i) {
    theta[i] *= 1.0 - cfg.lr * cfg.weight_decay;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace rlpf
