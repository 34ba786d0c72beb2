#include "rlpf/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>

namespace rlpf {

namespace fs = std::filesystem;

namespace {

// stream tags
constexpr std::uint64_t kTagSample = 0x73616d706c65ULL;
constexpr std::uint64_t kTagSize = 0x73697a65ULL;
constexpr std::uint64_t kTagShuffle = 0x73687566ULL;
constexpr std::uint64_t kTagProbe = 0x70726f6265ULL;
constexpr std::uint64_t kTagInit = 0x696e6974ULL;
constexpr std::uint64_t kTagBatch = 0x6261746368ULL;
constexpr std::uint64_t kTagNoise = 0x6e6f697365ULL;
constexpr std::uint64_t kTagHoldout = 0x686f6c64ULL;

std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) { return mix64(h ^ mix64(v)); }
std::uint64_t hash_double(std::uint64_t h, double v) { return hash_combine(h, std::bit_cast<std::uint64_t>(v)); }

}  // namespace

// ---------------------------------------------------------------------------
// Reward pipeline
// ---------------------------------------------------------------------------

std::vector<RewardRecord> reward_pipeline(int count, const std::function<Molecule(int)>& produce,
                                          const RewardFn& reward, int workers,
                                          std::size_t queue_capacity, RewardKind penalty_kind,
                                          RewardPipelineStats* stats) {
  if (workers < 1) throw Error("reward_pipeline: workers must be >= 1");
  if (count < 0) throw Error("reward_pipeline: negative count");
  struct Job {
    int id;
    Molecule mol;
  };
  std::vector<RewardRecord> out(count);
  std::vector<std::uint8_t> failed(count, 0);
  BoundedQueue<Job> queue(queue_capacity);

  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      while (auto job = queue.pop()) {
        try {
          out[job->id] = reward(job->mol);
        } catch (...) {
          out[job->id] = RewardRecord::penalized(penalty_kind);
          failed[job->id] = 1;
        }
      }
    });

  std::exception_ptr producer_error;
  try {
    for (int k = 0; k < count; ++k) queue.push(Job{k, produce(k)});
  } catch (...) {
    producer_error = std::current_exception();
  }
  queue.close();
  for (auto& t : pool) t.join();
  if (producer_error) std::rethrow_exception(producer_error);

  if (stats) {
    stats->queue_high_water = queue.high_water();
    stats->failures = static_cast<int>(std::count(failed.begin(), failed.end(), 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// KL drift
// ---------------------------------------------------------------------------

double gaussian_kl_shared_sigma(const RowMatrix& mean_a, const RowMatrix& mean_b, double sigma,
                                const Mask& mask) {
  if (!(sigma > 0)) throw InvalidSigma("gaussian_kl_shared_sigma: sigma must be positive");
  double sum = 0.0;
  long entries = 0;
  for (Eigen::Index i = 0; i < mean_a.rows(); ++i) {
    if (!mask[i]) continue;
    sum += (mean_a.row(i) - mean_b.row(i)).squaredNorm();
    entries += mean_a.cols();
  }
  if (entries == 0) throw EmptyMolecule("gaussian_kl_shared_sigma: empty mask");
  return sum / (2.0 * sigma * sigma) / static_cast<double>(entries);
}

std::vector<ProbeState> make_probe_states(const PolicyParams& reference, const NoiseSchedule& schedule,
                                          const SizeDistribution& sizes, const SeedSpec& seed,
                                          int trajectories, int stride) {
  if (trajectories < 1 || stride < 1) throw Error("make_probe_states: counts must be positive");
  std::vector<ProbeState> probes;
  for (int k = 0; k < trajectories; ++k) {
    const SeedSpec s = seed.derive(kTagProbe, static_cast<std::uint64_t>(k));
    Rng size_rng(s.derive(kTagSize));
    const int n = sizes.sample(size_rng);
    const Trajectory traj = sample_trajectory(reference, n, schedule, s);
    for (int t = schedule.steps(); t >= 1; t -= stride)
      probes.push_back(ProbeState{traj.state_at(t), t, traj.sigma_at(t), traj.mask});
  }
  return probes;
}

double kl_to_reference(const PolicyParams& params, const PolicyParams& reference,
                       const std::vector<ProbeState>& probes, const NoiseSchedule& schedule) {
  if (probes.empty()) throw Error("kl_to_reference: empty probe set");
  double total = 0.0;
  for (const ProbeState& p : probes) {
    const RowMatrix a = reverse_mean(params, p.z, p.t, schedule, p.mask);
    const RowMatrix b = reverse_mean(reference, p.z, p.t, schedule, p.mask);
    total += gaussian_kl_shared_sigma(a, b, p.sigma, p.mask);
  }
  return total / static_cast<double>(probes.size());
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class T>
  void le(T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> v) {
    for (double x : v) f64(x);
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* p, std::size_t n) : p_(p), n_(n) {}
  void need(std::size_t k) const {
    if (pos_ + k > n_) throw CheckpointError("checkpoint truncated");
  }
  template <class T>
  T le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  void f64s(std::span<double> out) {
    for (double& x : out) x = f64();
  }
  std::size_t pos() const { return pos_; }

 private:
  const char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

std::uint64_t byte_digest(const char* p, std::size_t n) {
  std::uint64_t h = 0x5bd1e995ULL;
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    std::uint64_t w;
    std::memcpy(&w, p + i, 8);
    h = hash_combine(h, w);
  }
  std::uint64_t tail = 0;
  for (std::size_t k = 0; i < n; ++i, ++k) tail |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * k);
  return hash_combine(hash_combine(h, tail), n);
}

}  // namespace

PolicyParams Checkpoint::reference_params() const {
  PolicyParams ref(params.shape());
  const auto& src = reference ? *reference : std::vector<double>(params.flat_view().begin(), params.flat_view().end());
  if (src.size() != ref.size()) throw CheckpointError("reference parameter count mismatch");
  std::copy(src.begin(), src.end(), ref.flat_view().begin());
  return ref;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes("RLPF", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  const DenoiserShape& sh = ckpt.params.shape();
  const std::size_t P = ckpt.params.size();
  w.le<std::uint32_t>(sh.layers);
  w.le<std::uint32_t>(sh.hidden);
  w.le<std::uint32_t>(sh.features);
  w.le<std::uint64_t>(P);
  w.f64s(ckpt.params.flat_view());

  const bool has_opt = ckpt.optimizer.m.size() == P;
  w.le<std::uint8_t>(has_opt);
  if (has_opt) {
    w.le<std::int64_t>(ckpt.optimizer.step);
    w.f64s(ckpt.optimizer.m);
    w.f64s(ckpt.optimizer.v);
  }
  w.le<std::uint32_t>(static_cast<std::uint32_t>(ckpt.schedule_kind));
  w.le<std::uint32_t>(ckpt.steps);
  w.le<std::uint32_t>(ckpt.epoch);
  w.le<std::uint64_t>(ckpt.master_seed);
  w.le<std::uint64_t>(ckpt.config_digest);
  w.le<std::uint8_t>(ckpt.reference.has_value());
  if (ckpt.reference) {
    if (ckpt.reference->size() != P) throw CheckpointError("reference parameter count mismatch");
    w.f64s(*ckpt.reference);
  }
  w.le<std::uint32_t>(ckpt.sizes.sizes().size());
  for (std::size_t i = 0; i < ckpt.sizes.sizes().size(); ++i) {
    w.le<std::uint32_t>(ckpt.sizes.sizes()[i]);
    w.f64(ckpt.sizes.weights()[i]);
  }
  w.le<std::uint8_t>(ckpt.ema_initialized);
  w.f64(ckpt.ema_mean);
  w.f64(ckpt.ema_var);
  const std::uint64_t digest = byte_digest(w.data().data(), w.data().size());
  w.le<std::uint64_t>(digest);

  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw CheckpointError("cannot write " + tmp);
    f.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!f) throw CheckpointError("write failed for " + tmp);
  }
  fs::rename(tmp, target);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 16 || std::memcmp(buf.data(), "RLPF", 4) != 0) throw CheckpointError(path + ": not a checkpoint");
  const std::size_t body = buf.size() - 8;
  Reader tail(buf.data() + body, 8);
  if (tail.le<std::uint64_t>() != byte_digest(buf.data(), body)) throw CheckpointError(path + ": checksum mismatch");

  Reader r(buf.data() + 4, body - 4);
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) throw CheckpointError(path + ": unsupported version " + std::to_string(version));
  DenoiserShape sh;
  sh.layers = static_cast<int>(r.le<std::uint32_t>());
  sh.hidden = static_cast<int>(r.le<std::uint32_t>());
  sh.features = static_cast<int>(r.le<std::uint32_t>());
  const auto P = r.le<std::uint64_t>();
  if (sh.layers < 0 || sh.hidden < 1 || sh.features < 1 || sh.layers > 64 || sh.hidden > 4096 ||
      P != param_count(sh))
    throw CheckpointError(path + ": inconsistent header");
  r.need(P * 8);
  Checkpoint c;
  c.params = PolicyParams(sh);
  r.f64s(c.params.flat_view());
  if (r.le<std::uint8_t>()) {
    c.optimizer = AdamState(P);
    c.optimizer.step = r.le<std::int64_t>();
    r.f64s(c.optimizer.m);
    r.f64s(c.optimizer.v);
  }
  const auto kind = r.le<std::uint32_t>();
  if (kind > static_cast<std::uint32_t>(ScheduleKind::cosine)) throw CheckpointError(path + ": unknown schedule kind");
  c.schedule_kind = static_cast<ScheduleKind>(kind);
  c.steps = static_cast<int>(r.le<std::uint32_t>());
  c.epoch = static_cast<int>(r.le<std::uint32_t>());
  c.master_seed = r.le<std::uint64_t>();
  c.config_digest = r.le<std::uint64_t>();
  if (r.le<std::uint8_t>()) {
    std::vector<double> ref(P);
    r.f64s(ref);
    c.reference = std::move(ref);
  }
  const auto n_sizes = r.le<std::uint32_t>();
  if (n_sizes > 0) {
    std::vector<int> sizes;
    std::vector<double> weights;
    for (std::uint32_t i = 0; i < n_sizes; ++i) {
      sizes.push_back(static_cast<int>(r.le<std::uint32_t>()));
      weights.push_back(r.f64());
    }
    c.sizes = SizeDistribution(std::move(sizes), std::move(weights));
  }
  c.ema_initialized = r.le<std::uint8_t>() != 0;
  c.ema_mean = r.f64();
  c.ema_var = r.f64();
  return c;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

void PretrainConfig::validate() const {
  if (layers < 1 || hidden < 1) throw Error("pretrain: layers and hidden must be positive");
  if (steps < 2) throw InvalidSchedule("pretrain: T must be >= 2");
  if (max_iterations < 1 || batch < 1 || eval_every < 1 || patience < 1 || holdout_draws < 1)
    throw Error("pretrain: iteration counts must be positive");
  if (!(lr > 0)) throw Error("pretrain: lr must be positive");
  if (holdout < 1) throw Error("pretrain: holdout must be >= 1");
}

PretrainResult pretrain(const std::vector<Molecule>& data, const PretrainConfig& cfg,
                        const std::function<void(const PretrainLogRow&)>& on_eval) {
  cfg.validate();
  if (static_cast<int>(data.size()) <= cfg.holdout)
    throw Error("pretrain: dataset must be larger than the held-out split");
  const SeedSpec root{cfg.seed, 0};
  const NoiseSchedule sched = make_schedule(cfg.steps, cfg.schedule);

  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(root.derive(kTagHoldout));
  split_rng.shuffle(order);
  std::vector<Molecule> heldout, train;
  for (std::size_t i = 0; i < order.size(); ++i) {
    Molecule m = data[order[i]].compacted();
    m.coords = project_zero_com(m.coords, m.mask);
    (static_cast<int>(i) < cfg.holdout ? heldout : train).push_back(std::move(m));
  }

  PolicyParams params = init_params(cfg.layers, cfg.hidden, root.derive(kTagInit));
  const std::size_t P = params.size();
  AdamState opt(P);
  const AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8, 0.0};

  auto heldout_loss = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < heldout.size(); ++i)
      for (int d = 0; d < cfg.holdout_draws; ++d)
        total += pretrain_loss(params, heldout[i], sched, root.derive(kTagHoldout, i * 1000003ULL + d), cfg.weighting).loss;
    return total / static_cast<double>(heldout.size() * cfg.holdout_draws);
  };

  PretrainResult res;
  std::vector<double> best(params.flat_view().begin(), params.flat_view().end());
  double best_loss = heldout_loss();
  int since_best = 0;
  res.log.push_back({0, NAN, best_loss});
  if (on_eval) on_eval(res.log.back());

  std::vector<double> grad(P);
  double running = 0.0;
  int running_n = 0;
  for (int it = 1; it <= cfg.max_iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    Rng batch_rng(root.derive(kTagBatch, static_cast<std::uint64_t>(it)));
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const Molecule& m = train[batch_rng.below(train.size())];
      PretrainLoss l = pretrain_loss(params, m, sched, root.derive(kTagNoise, static_cast<std::uint64_t>(it) * 4096 + b), cfg.weighting);
      loss += l.loss;
      for (std::size_t p = 0; p < P; ++p) grad[p] += l.grad[p];
    }
    for (double& g : grad) g /= cfg.batch;
    adamw_step(params, grad, opt, adam);
    running += loss / cfg.batch;
    ++running_n;

    if (it % cfg.eval_every == 0 || it == cfg.max_iterations) {
      const double h = heldout_loss();
      res.log.push_back({it, running / running_n, h});
      running = 0.0;
      running_n = 0;
      if (on_eval) on_eval(res.log.back());
      if (h < best_loss) {
        best_loss = h;
        best.assign(params.flat_view().begin(), params.flat_view().end());
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    }
  }

  Checkpoint& c = res.checkpoint;
  c.params = PolicyParams(params.shape());
  std::copy(best.begin(), best.end(), c.params.flat_view().begin());
  c.schedule_kind = cfg.schedule;
  c.steps = cfg.steps;
  c.epoch = 0;
  c.master_seed = cfg.seed;
  c.sizes = SizeDistribution(data);
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  if (steps < 2) throw InvalidSchedule("RunConfig: T must be >= 2");
  if (K < 2) throw Error("RunConfig: K must be >= 2");
  if (max_epochs < 0) throw Error("RunConfig: max_epochs must be >= 0");
  if (reward_workers < 1 || queue_capacity < 1) throw Error("RunConfig: worker counts must be >= 1");
  if (probe_trajectories < 1 || probe_stride < 1) throw Error("RunConfig: probe settings must be positive");
  if (!(advantage_clip > 0)) throw Error("RunConfig: advantage_clip must be positive");
  if (!(adam.lr >= 0)) throw Error("RunConfig: lr must be >= 0");
  clip.validate();
}

std::uint64_t RunConfig::digest() const {
  std::uint64_t h = 0x524c5046ULL;
  h = hash_combine(h, steps);
  h = hash_combine(h, K);
  h = hash_double(h, clip.epsilon);
  h = hash_combine(h, clip.inner_epochs);
  h = hash_combine(h, clip.minibatch);
  h = hash_combine(h, static_cast<std::uint64_t>(reward.kind));
  h = hash_double(h, reward.composite.lambda);
  h = hash_double(h, reward.composite.eta);
  h = hash_double(h, reward.composite.target);
  for (char ch : reward.external_command) h = hash_combine(h, static_cast<unsigned char>(ch));
  h = hash_double(h, adam.lr);
  h = hash_double(h, adam.beta1);
  h = hash_double(h, adam.beta2);
  h = hash_double(h, adam.eps);
  h = hash_double(h, adam.weight_decay);
  h = hash_double(h, advantage_clip);
  h = hash_combine(h, ema_advantages);
  h = hash_double(h, ema_decay);
  h = hash_double(h, valency_threshold);
  h = hash_double(h, force_threshold);
  h = hash_combine(h, stop_on_convergence);
  h = hash_combine(h, seed);
  h = hash_combine(h, static_cast<std::uint64_t>(schedule));
  h = hash_combine(h, probe_trajectories);
  h = hash_combine(h, probe_stride);
  return h;
}

std::string EpochMetrics::csv_header() {
  return "epoch,mean_reward,molecule_stability,atom_stability,validity,uniqueness,novelty,"
         "kl_to_pretrained,clip_fraction,objective,mean_ratio,mean_advantage,penalty_fraction,"
         "mean_force_rmsd,updates,rolled_back";
}

std::string EpochMetrics::csv_row() const {
  char buf[768];
  std::snprintf(buf, sizeof buf,
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d",
                epoch, mean_reward, molecule_stability, atom_stability, validity, uniqueness, novelty,
                kl_to_pretrained, clip_fraction, objective, mean_ratio, mean_advantage, penalty_fraction,
                mean_force_rmsd, updates, rolled_back ? 1 : 0);
  return buf;
}

namespace {

struct Term {
  int k;
  int t;
};

}  // namespace

EpochRecord run_epoch(const RunConfig& cfg, Checkpoint& state, const PolicyParams& reference,
                      const std::vector<ProbeState>& probes, const FinetuneContext& ctx) {
  const NoiseSchedule sched = make_schedule(cfg.steps, cfg.schedule);
  const AtomTable& table = AtomTable::standard();
  const SeedSpec root{cfg.seed, 0};
  const int epoch = state.epoch;
  const int capacity = state.sizes.max_atoms();

  // θ_old: a frozen copy used for every trajectory of this round
  const PolicyParams theta_old = state.params;
  EpochRecord rec;
  rec.theta_old_digest = theta_old.digest();

  std::vector<Trajectory> trajs(cfg.K);
  const RewardFn reward = make_reward(cfg.reward, table);
  auto produce = [&](int k) {
    const SeedSpec s = root.derive(kTagSample, static_cast<std::uint64_t>(epoch)).derive(static_cast<std::uint64_t>(k));
    Rng size_rng(s.derive(kTagSize));
    const int n = state.sizes.sample(size_rng);
    trajs[k] = sample_trajectory(theta_old, n, sched, s, capacity);
    return trajs[k].molecule;
  };
  rec.rewards = reward_pipeline(cfg.K, produce, reward, cfg.reward_workers,
                                static_cast<std::size_t>(cfg.queue_capacity), cfg.reward.kind);
  if (theta_old.digest() != rec.theta_old_digest) throw Error("run_epoch: θ_old changed during sampling");

  EpochMetrics& mt = rec.metrics;
  mt.epoch = epoch;
  std::vector<double> rewards(cfg.K);
  int penalties = 0;
  for (int k = 0; k < cfg.K; ++k) {
    rewards[k] = rec.rewards[k].value;
    if (rec.rewards[k].penalty) ++penalties;
  }
  mt.mean_reward = std::accumulate(rewards.begin(), rewards.end(), 0.0) / cfg.K;
  mt.penalty_fraction = static_cast<double>(penalties) / cfg.K;

  Advantages adv;
  if (cfg.ema_advantages) {
    RunningRewardStats ema(cfg.ema_decay);
    ema.restore(state.ema_mean, state.ema_var, state.ema_initialized);
    adv = ema.standardize(rewards, cfg.advantage_clip);
    state.ema_mean = ema.mean();
    state.ema_var = ema.var();
    state.ema_initialized = ema.initialized();
  } else {
    adv = standardize_advantages(rewards, cfg.advantage_clip);
  }
  mt.mean_advantage = std::accumulate(adv.values.begin(), adv.values.end(), 0.0) / cfg.K;

  // sample quality at θ_old
  rec.samples.reserve(cfg.K);
  double rmsd_sum = 0.0;
  int rmsd_n = 0;
  for (int k = 0; k < cfg.K; ++k) {
    rec.samples.push_back(trajs[k].molecule);
    double r = rec.rewards[k].raw_rmsd;
    if (cfg.reward.kind != RewardKind::force) r = force_reward(trajs[k].molecule, table).raw_rmsd;
    if (std::isfinite(r)) {
      rmsd_sum += r;
      ++rmsd_n;
    }
  }
  mt.mean_force_rmsd = rmsd_n ? rmsd_sum / rmsd_n : NAN;
  const EvalReport report = evaluate(rec.samples, table, ctx.training_hashes);
  mt.molecule_stability = report.molecule_stability;
  mt.atom_stability = report.atom_stability;
  mt.validity = report.validity;
  mt.uniqueness = report.uniqueness;
  mt.novelty = report.novelty;

  // old log-probabilities from the recorded kernels
  const int T = sched.steps();
  std::vector<double> logp_old(static_cast<std::size_t>(cfg.K) * T);
  for (int k = 0; k < cfg.K; ++k)
    for (int t = 1; t <= T; ++t)
      logp_old[static_cast<std::size_t>(k) * T + (t - 1)] =
          masked_logp(trajs[k].state_at(t - 1), trajs[k].mean_at(t), trajs[k].sigma_at(t), trajs[k].mask, t, k).value;

  // snapshot for rollback
  const PolicyParams params_before = state.params;
  const AdamState opt_before = state.optimizer;

  std::vector<Term> terms;
  terms.reserve(logp_old.size());
  for (int k = 0; k < cfg.K; ++k)
    for (int t = 1; t <= T; ++t) terms.push_back({k, t});
  const std::size_t mb = cfg.clip.minibatch > 0 ? static_cast<std::size_t>(cfg.clip.minibatch) : terms.size();

  std::vector<double> grad(state.params.size());
  double objective = 0.0, ratio_sum = 0.0;
  long clipped = 0, term_count = 0;
  try {
    for (int inner = 0; inner < cfg.clip.inner_epochs; ++inner) {
      Rng shuffle_rng(root.derive(kTagShuffle, static_cast<std::uint64_t>(epoch)).derive(static_cast<std::uint64_t>(inner)));
      shuffle_rng.shuffle(terms);
      for (std::size_t start = 0; start < terms.size(); start += mb) {
        const std::size_t stop = std::min(terms.size(), start + mb);
        const double scale = 1.0 / static_cast<double>(stop - start);
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = start; i < stop; ++i) {
          const Term& term = terms[i];
          const Trajectory& tr = trajs[term.k];
          const RowMatrix& z_s = tr.state_at(term.t - 1);
          const double sigma = tr.sigma_at(term.t);
          const StepEval ev = evaluate_step(state.params, tr.state_at(term.t), z_s, term.t, sigma, sched, tr.mask, term.k);
          const StepLogProb old{logp_old[static_cast<std::size_t>(term.k) * T + (term.t - 1)], term.t, term.k};
          const double ratio = importance_ratio(ev.logp, old);
          const double a = adv.values[term.k];
          const PpoResult pr = ppo_objective(std::span(&ratio, 1), std::span(&a, 1), cfg.clip);
          if (!std::isfinite(pr.objective)) throw AbortUpdate("non-finite surrogate objective");
          objective += pr.objective;
          ratio_sum += ratio;
          clipped += pr.clip_fraction > 0 ? 1 : 0;
          ++term_count;
          // maximize: descend on −objective
          accumulate_logp_grad(state.params, ev, z_s, sigma, sched, tr.mask, -pr.grad_logp[0] * scale, grad);
        }
        adamw_step(state.params, grad, state.optimizer, cfg.adam);
        ++mt.updates;
      }
    }
  } catch (const AbortUpdate& e) {
    state.params = params_before;
    state.optimizer = opt_before;
    mt.rolled_back = true;
    mt.updates = 0;
    if (!ctx.quiet) std::cerr << "epoch " << epoch << ": update rolled back (" << e.what() << ")\n";
  }
  mt.objective = term_count ? objective / term_count : 0.0;
  mt.mean_ratio = term_count ? ratio_sum / term_count : 0.0;
  mt.clip_fraction = term_count ? static_cast<double>(clipped) / term_count : 0.0;
  mt.kl_to_pretrained = kl_to_reference(state.params, reference, probes, sched);

  state.epoch = epoch + 1;
  return rec;
}

FinetuneResult run_finetune(const RunConfig& cfg, const Checkpoint& start, const FinetuneContext& ctx) {
  cfg.validate();
  if (start.steps != cfg.steps || start.schedule_kind != cfg.schedule)
    throw ConfigMismatch("run_finetune: checkpoint schedule differs from the run config");
  if (start.sizes.sizes().empty()) throw CheckpointError("run_finetune: checkpoint lacks a size distribution");

  const bool resume = start.epoch > 0;
  if (resume && start.config_digest != cfg.digest())
    throw ConfigMismatch("run_finetune: resumed checkpoint was produced by a different config");

  FinetuneResult res;
  Checkpoint& state = res.final;
  state = start;
  if (!resume) {
    state.reference = std::vector<double>(start.params.flat_view().begin(), start.params.flat_view().end());
    state.optimizer = AdamState(start.params.size());
    state.ema_initialized = false;
    state.ema_mean = 0.0;
    state.ema_var = 1.0;
  } else if (state.optimizer.m.size() != state.params.size()) {
    state.optimizer = AdamState(state.params.size());
  }
  state.master_seed = cfg.seed;
  state.config_digest = cfg.digest();

  const NoiseSchedule sched = make_schedule(cfg.steps, cfg.schedule);
  const PolicyParams reference = state.reference_params();
  const std::vector<ProbeState> probes =
      make_probe_states(reference, sched, state.sizes, SeedSpec{cfg.seed, 0}, cfg.probe_trajectories, cfg.probe_stride);

  std::ofstream metrics_csv, rewards_csv;
  if (!ctx.out_dir.empty()) {
    fs::create_directories(ctx.out_dir);
    const fs::path mpath = fs::path(ctx.out_dir) / "metrics.csv";
    const fs::path rpath = fs::path(ctx.out_dir) / "rewards.csv";
    const bool append = resume && fs::exists(mpath);
    metrics_csv.open(mpath, append ? std::ios::app : std::ios::trunc);
    rewards_csv.open(rpath, append && fs::exists(rpath) ? std::ios::app : std::ios::trunc);
    if (!metrics_csv || !rewards_csv) throw Error("run_finetune: cannot open metrics files in " + ctx.out_dir);
    if (!append) {
      metrics_csv << EpochMetrics::csv_header() << "\n";
      rewards_csv << "epoch,trajectory_id,kind,value,penalty,raw_rmsd\n";
    }
  }

  while (state.epoch < cfg.max_epochs) {
    EpochRecord rec = run_epoch(cfg, state, reference, probes, ctx);
    const EpochMetrics& m = rec.metrics;
    res.metrics.push_back(m);
    if (metrics_csv.is_open()) {
      metrics_csv << m.csv_row() << "\n";
      metrics_csv.flush();
      char buf[160];
      for (std::size_t k = 0; k < rec.rewards.size(); ++k) {
        const RewardRecord& r = rec.rewards[k];
        std::snprintf(buf, sizeof buf, "%d,%zu,%s,%.17g,%d,%.17g\n", m.epoch, k, to_string(r.kind).c_str(),
                      r.value, r.penalty ? 1 : 0, r.raw_rmsd);
        rewards_csv << buf;
      }
      rewards_csv.flush();
    }
    if (!cfg.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.ckpt", state.epoch);
      save_checkpoint((fs::path(cfg.checkpoint_dir) / name).string(), state);
      save_checkpoint((fs::path(cfg.checkpoint_dir) / "latest.ckpt").string(), state);
    }
    if (!ctx.quiet)
      std::cerr << "epoch " << m.epoch << "  reward " << m.mean_reward << "  rmsd " << m.mean_force_rmsd
                << "  mol_stab " << m.molecule_stability << "  kl " << m.kl_to_pretrained << "  clip "
                << m.clip_fraction << "\n";
    if (ctx.on_epoch) ctx.on_epoch(rec);

    if (cfg.stop_on_convergence && !m.rolled_back) {
      // composite rewards mix units, so they never trigger early stopping
      const bool valency_done = cfg.reward.kind == RewardKind::valency && m.mean_reward > cfg.valency_threshold;
      const bool force_done = (cfg.reward.kind == RewardKind::force || cfg.reward.kind == RewardKind::external) &&
                              m.mean_reward > cfg.force_threshold;
      if (valency_done || force_done) {
        res.converged = true;
        break;
      }
    }
  }
  return res;
}

}  // namespace rlpf
