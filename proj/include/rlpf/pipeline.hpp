#pragma once

#include "rlpf/core.hpp"
#include "rlpf/denoiser.hpp"
#include "rlpf/diffusion.hpp"
#include "rlpf/metrics.hpp"
#include "rlpf/policy.hpp"
#include "rlpf/reward.hpp"
#include "rlpf/schedule.hpp"

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace rlpf {

RLPF_DEFINE_ERROR(CheckpointError)
RLPF_DEFINE_ERROR(ConfigMismatch)

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kMetricsSchema = "rlpf-metrics/1";

// ---------------------------------------------------------------------------
// Bounded queue
// ---------------------------------------------------------------------------

template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  // Blocks while full. Returns false once closed.
  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    high_water_ = std::max(high_water_, items_.size());
    not_empty_.notify_one();
    return true;
  }

  // Blocks while empty; nullopt once closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t high_water() const {
    std::lock_guard lock(mu_);
    return high_water_;
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  std::size_t high_water_ = 0;
  bool closed_ = false;
};

// ---------------------------------------------------------------------------
// Reward pipeline
// ---------------------------------------------------------------------------

struct RewardPipelineStats {
  std::size_t queue_high_water = 0;
  int failures = 0;
};

// Calls produce(k) for k = 0..count-1 on the calling thread and scores each
// molecule on `workers` threads. Results are stored by index, so the output is
// independent of scheduling. A throwing reward yields a penalty record.
std::vector<RewardRecord> reward_pipeline(int count, const std::function<Molecule(int)>& produce,
                                          const RewardFn& reward, int workers,
                                          std::size_t queue_capacity = 8,
                                          RewardKind penalty_kind = RewardKind::force,
                                          RewardPipelineStats* stats = nullptr);

// ---------------------------------------------------------------------------
// KL drift
// ---------------------------------------------------------------------------

struct ProbeState {
  RowMatrix z;
  int t = 0;
  double sigma = 0.0;
  Mask mask;
};

// Σ M_i Σ_j (a_ij − b_ij)² / (2σ²), divided by the number of masked atom-feature entries.
double gaussian_kl_shared_sigma(const RowMatrix& mean_a, const RowMatrix& mean_b, double sigma,
                                const Mask& mask);

// States visited by `trajectories` reference chains, every `stride`-th step.
std::vector<ProbeState> make_probe_states(const PolicyParams& reference, const NoiseSchedule& schedule,
                                          const SizeDistribution& sizes, const SeedSpec& seed,
                                          int trajectories = 8, int stride = 10);

// Mean over probes of the per-entry Gaussian KL between the two reverse kernels.
double kl_to_reference(const PolicyParams& params, const PolicyParams& reference,
                       const std::vector<ProbeState>& probes, const NoiseSchedule& schedule);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  PolicyParams params;
  AdamState optimizer;
  ScheduleKind schedule_kind = ScheduleKind::polynomial;
  int steps = 100;
  int epoch = 0;  // next epoch to run
  std::uint64_t master_seed = 0;
  std::uint64_t config_digest = 0;
  std::optional<std::vector<double>> reference;  // pretrained weights, for KL
  SizeDistribution sizes;
  bool ema_initialized = false;
  double ema_mean = 0.0, ema_var = 1.0;

  NoiseSchedule schedule() const { return make_schedule(steps, schedule_kind); }
  PolicyParams reference_params() const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Throws CheckpointError on bad magic, version, truncation or checksum.
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int layers = 2;
  int hidden = 32;
  int steps = 100;  // diffusion T
  ScheduleKind schedule = ScheduleKind::polynomial;
  int max_iterations = 5000;
  int batch = 64;
  double lr = 1e-4;
  int eval_every = 100;
  int patience = 10;     // evaluations without held-out improvement
  int holdout = 64;      // molecules held out from the dataset
  int holdout_draws = 4; // noise draws per held-out molecule
  LossWeighting weighting = LossWeighting::uniform;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainLogRow {
  int iteration = 0;
  double train_loss = 0.0;
  double heldout_loss = 0.0;
};

struct PretrainResult {
  Checkpoint checkpoint;  // weights with the lowest held-out loss
  std::vector<PretrainLogRow> log;
};

PretrainResult pretrain(const std::vector<Molecule>& data, const PretrainConfig& cfg,
                        const std::function<void(const PretrainLogRow&)>& on_eval = {});

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct RunConfig {
  int steps = 100;  // T
  int K = 64;
  int max_epochs = 30;
  ClipConfig clip{0.2, 1, 640};
  RewardOptions reward;
  AdamConfig adam;
  double advantage_clip = 1.0;
  bool ema_advantages = false;
  double ema_decay = 0.9;
  double valency_threshold = 0.95;
  double force_threshold = -0.25;
  bool stop_on_convergence = true;
  int reward_workers = 1;
  int queue_capacity = 8;
  std::uint64_t seed = 0;
  ScheduleKind schedule = ScheduleKind::polynomial;
  int probe_trajectories = 8;
  int probe_stride = 10;
  std::string dataset_path;
  std::string checkpoint_dir;

  void validate() const;
  // Hash over every field that affects results (excludes workers, epochs and paths).
  std::uint64_t digest() const;
};

struct EpochMetrics {
  int epoch = 0;
  double mean_reward = 0.0;
  double molecule_stability = 0.0;
  double atom_stability = 0.0;
  double validity = 0.0;
  double uniqueness = 0.0;
  double novelty = 0.0;
  double kl_to_pretrained = 0.0;
  double clip_fraction = 0.0;
  double objective = 0.0;  // surrogate mean per (k, t) term
  double mean_ratio = 0.0;
  double mean_advantage = 0.0;
  double penalty_fraction = 0.0;
  double mean_force_rmsd = 0.0;
  int updates = 0;
  bool rolled_back = false;

  static std::string csv_header();
  std::string csv_row() const;
};

struct EpochRecord {
  EpochMetrics metrics;
  std::vector<RewardRecord> rewards;
  std::vector<Molecule> samples;
  std::uint64_t theta_old_digest = 0;
};

struct FinetuneContext {
  std::unordered_set<std::uint64_t> training_hashes;
  std::string out_dir;  // metrics.csv, rewards.csv and checkpoints; empty = in memory only
  std::function<void(const EpochRecord&)> on_epoch;
  bool quiet = true;
};

struct FinetuneResult {
  Checkpoint final;
  std::vector<EpochMetrics> metrics;
  bool converged = false;
};

// Samples K trajectories from a frozen snapshot, scores them, and applies the
// clipped surrogate update, once per epoch. A checkpoint with epoch > 0 resumes
// that run; its config digest must match `cfg`.
FinetuneResult run_finetune(const RunConfig& cfg, const Checkpoint& start, const FinetuneContext& ctx);

// Final state of one epoch; exposed for testing the update in isolation.
EpochRecord run_epoch(const RunConfig& cfg, Checkpoint& state, const PolicyParams& reference,
                      const std::vector<ProbeState>& probes, const FinetuneContext& ctx);

}  // namespace rlpf
