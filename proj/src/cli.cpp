#include "rlpf/cli.hpp"

#include "rlpf/xyz.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace rlpf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ParseError("config: wrong type for '" + key + "'");
  }
}

using Setter = std::function<void(CliConfig&, const json&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> s = [] {
    std::map<std::string, Setter> m;
#define RLPF_KEY(name, type, lvalue) \
  m[name] = [](CliConfig& c, const json& v, const std::string& k) { c.lvalue = get_as<type>(v, k); };
    RLPF_KEY("T", int, run.steps)
    RLPF_KEY("K", int, run.K)
    RLPF_KEY("max_epochs", int, run.max_epochs)
    RLPF_KEY("epsilon", double, run.clip.epsilon)
    RLPF_KEY("inner_epochs", int, run.clip.inner_epochs)
    RLPF_KEY("minibatch", int, run.clip.minibatch)
    RLPF_KEY("lr", double, run.adam.lr)
    RLPF_KEY("beta1", double, run.adam.beta1)
    RLPF_KEY("beta2", double, run.adam.beta2)
    RLPF_KEY("adam_eps", double, run.adam.eps)
    RLPF_KEY("weight_decay", double, run.adam.weight_decay)
    RLPF_KEY("advantage_clip", double, run.advantage_clip)
    RLPF_KEY("ema_advantages", bool, run.ema_advantages)
    RLPF_KEY("ema_decay", double, run.ema_decay)
    RLPF_KEY("valency_threshold", double, run.valency_threshold)
    RLPF_KEY("force_threshold", double, run.force_threshold)
    RLPF_KEY("stop_on_convergence", bool, run.stop_on_convergence)
    RLPF_KEY("workers", int, run.reward_workers)
    RLPF_KEY("queue_capacity", int, run.queue_capacity)
    RLPF_KEY("seed", std::uint64_t, run.seed)
    RLPF_KEY("probe_trajectories", int, run.probe_trajectories)
    RLPF_KEY("probe_stride", int, run.probe_stride)
    RLPF_KEY("dataset", std::string, run.dataset_path)
    RLPF_KEY("checkpoint_dir", std::string, run.checkpoint_dir)
    RLPF_KEY("lambda", double, run.reward.composite.lambda)
    RLPF_KEY("eta", double, run.reward.composite.eta)
    RLPF_KEY("target", double, run.reward.composite.target)
    RLPF_KEY("external_command", std::string, run.reward.external_command)
    RLPF_KEY("layers", int, pretrain.layers)
    RLPF_KEY("hidden", int, pretrain.hidden)
    RLPF_KEY("iterations", int, pretrain.max_iterations)
    RLPF_KEY("batch", int, pretrain.batch)
    RLPF_KEY("pretrain_lr", double, pretrain.lr)
    RLPF_KEY("eval_every", int, pretrain.eval_every)
    RLPF_KEY("patience", int, pretrain.patience)
    RLPF_KEY("holdout", int, pretrain.holdout)
    RLPF_KEY("holdout_draws", int, pretrain.holdout_draws)
    RLPF_KEY("pretrain_seed", std::uint64_t, pretrain.seed)
#undef RLPF_KEY
    m["reward"] = [](CliConfig& c, const json& v, const std::string& k) {
      c.run.reward.kind = reward_kind_from_string(get_as<std::string>(v, k));
    };
    m["schedule"] = [](CliConfig& c, const json& v, const std::string& k) {
      c.run.schedule = schedule_kind_from_string(get_as<std::string>(v, k));
      c.pretrain.schedule = c.run.schedule;
    };
    m["loss_weighting"] = [](CliConfig& c, const json& v, const std::string& k) {
      const auto s = get_as<std::string>(v, k);
      if (s == "uniform") c.pretrain.weighting = LossWeighting::uniform;
      else if (s == "snr") c.pretrain.weighting = LossWeighting::snr;
      else throw ParseError("config: loss_weighting must be 'uniform' or 'snr'");
    };
    m["schema"] = [](CliConfig&, const json&, const std::string&) {};
    return m;
  }();
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Run directories carry a manifest whose "complete" flag flips only on success.
class RunManifest {
 public:
  RunManifest(fs::path dir, std::string command) : dir_(std::move(dir)) {
    doc_["command"] = std::move(command);
    doc_["complete"] = false;
    flush();
  }
  json& doc() { return doc_; }
  void finish() {
    doc_["complete"] = true;
    flush();
  }

 private:
  void flush() { write_text(dir_ / "manifest.json", doc_.dump(2) + "\n"); }
  fs::path dir_;
  json doc_;
};

void echo_config(const fs::path& dir, const CliConfig& cfg) {
  write_text(dir / "config.json", config_to_json(cfg));
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ParseError("bad value '" + item + "'");
    }
    if (used != item.size()) throw ParseError("bad value '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ParseError("empty value list");
  return out;
}

std::string value_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

CliConfig parse_config(const std::string& json_text, CliConfig base) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("config: top level must be an object");
  const auto& table = setters();
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    auto s = table.find(it.key());
    if (s == table.end()) throw ParseError("config: unknown key '" + it.key() + "'");
    s->second(base, it.value(), it.key());
  }
  base.pretrain.steps = base.run.steps;
  return base;
}

CliConfig load_config(const std::string& path, CliConfig base) { return parse_config(read_text(path), base); }

std::string config_to_json(const CliConfig& c) {
  json j;
  j["schema"] = kMetricsSchema;
  j["T"] = c.run.steps;
  j["K"] = c.run.K;
  j["max_epochs"] = c.run.max_epochs;
  j["epsilon"] = c.run.clip.epsilon;
  j["inner_epochs"] = c.run.clip.inner_epochs;
  j["minibatch"] = c.run.clip.minibatch;
  j["reward"] = to_string(c.run.reward.kind);
  j["lr"] = c.run.adam.lr;
  j["beta1"] = c.run.adam.beta1;
  j["beta2"] = c.run.adam.beta2;
  j["adam_eps"] = c.run.adam.eps;
  j["weight_decay"] = c.run.adam.weight_decay;
  j["advantage_clip"] = c.run.advantage_clip;
  j["ema_advantages"] = c.run.ema_advantages;
  j["ema_decay"] = c.run.ema_decay;
  j["valency_threshold"] = c.run.valency_threshold;
  j["force_threshold"] = c.run.force_threshold;
  j["stop_on_convergence"] = c.run.stop_on_convergence;
  j["workers"] = c.run.reward_workers;
  j["queue_capacity"] = c.run.queue_capacity;
  j["seed"] = c.run.seed;
  j["schedule"] = to_string(c.run.schedule);
  j["probe_trajectories"] = c.run.probe_trajectories;
  j["probe_stride"] = c.run.probe_stride;
  j["dataset"] = c.run.dataset_path;
  j["checkpoint_dir"] = c.run.checkpoint_dir;
  j["lambda"] = c.run.reward.composite.lambda;
  j["eta"] = c.run.reward.composite.eta;
  j["target"] = c.run.reward.composite.target;
  j["external_command"] = c.run.reward.external_command;
  j["layers"] = c.pretrain.layers;
  j["hidden"] = c.pretrain.hidden;
  j["iterations"] = c.pretrain.max_iterations;
  j["batch"] = c.pretrain.batch;
  j["pretrain_lr"] = c.pretrain.lr;
  j["eval_every"] = c.pretrain.eval_every;
  j["patience"] = c.pretrain.patience;
  j["holdout_draws"] = c.pretrain.holdout_draws;
  j["holdout"] = c.pretrain.holdout;
  j["pretrain_seed"] = c.pretrain.seed;
  j["loss_weighting"] = c.pretrain.weighting == LossWeighting::snr ? "snr" : "uniform";
  return j.dump(2) + "\n";
}

std::vector<Molecule> load_dataset(const std::string& dir, const AtomTable& table) {
  const fs::path manifest = fs::path(dir) / "manifest.json";
  std::vector<std::string> files;
  if (fs::exists(manifest)) {
    const json doc = json::parse(read_text(manifest.string()));
    if (!doc.value("complete", false)) throw Error(dir + ": dataset manifest is flagged incomplete");
    for (const auto& f : doc.at("files")) files.push_back((fs::path(dir) / f.get<std::string>()).string());
  } else {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".xyz") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw Error(dir + ": no molecules found");
  std::vector<Molecule> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_xyz_file(f, table));
  return out;
}

std::unordered_set<std::uint64_t> load_hashes(const std::string& path) {
  std::unordered_set<std::uint64_t> out;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.insert(std::stoull(line, nullptr, 16));
    } catch (const std::exception&) {
      throw ParseError(path + ": bad hash line '" + line + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

namespace {

const AtomTable& table() { return AtomTable::standard(); }

int cmd_gen_data(int count, int lo, int hi, std::uint64_t seed, const std::string& out) {
  const fs::path dir(out);
  fs::create_directories(dir);
  RunManifest manifest(dir, "gen-data");
  manifest.doc()["count"] = count;
  manifest.doc()["atoms_min"] = lo;
  manifest.doc()["atoms_max"] = hi;
  manifest.doc()["seed"] = seed;
  const auto data = generate_dataset(count, {lo, hi}, table(), SeedSpec{seed, 0});
  json files = json::array();
  std::string hashes;
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "mol_%05zu.xyz", i);
    write_xyz_file((dir / name).string(), data[i].molecule, table(), "gen-data seed " + std::to_string(seed));
    files.push_back(name);
    hashes += hex(molecule_graph_hash(data[i].molecule, table())) + "\n";
  }
  write_text(dir / "train_hashes.txt", hashes);
  manifest.doc()["files"] = files;
  manifest.doc()["generated"] = data.size();
  manifest.finish();
  std::cout << "wrote " << data.size() << " molecules to " << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(CliConfig cfg, const std::string& data_dir, const std::string& out, bool quiet) {
  const fs::path dir(out);
  fs::create_directories(dir);
  RunManifest manifest(dir, "pretrain");
  cfg.run.dataset_path = data_dir;
  echo_config(dir, cfg);
  const auto data = load_dataset(data_dir, table());
  std::ofstream loss(dir / "loss.csv");
  loss << "iteration,train_loss,heldout_loss\n";
  PretrainResult res = pretrain(data, cfg.pretrain, [&](const PretrainLogRow& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", r.iteration, r.train_loss, r.heldout_loss);
    loss << buf;
    loss.flush();
    if (!quiet) std::cerr << "iter " << r.iteration << "  train " << r.train_loss << "  heldout " << r.heldout_loss << "\n";
  });
  save_checkpoint((dir / "pretrained.ckpt").string(), res.checkpoint);
  manifest.doc()["checkpoint"] = "pretrained.ckpt";
  manifest.doc()["seed"] = cfg.pretrain.seed;
  manifest.finish();
  return 0;
}

FinetuneResult finetune_into(CliConfig cfg, const Checkpoint& start, const fs::path& dir, bool quiet) {
  fs::create_directories(dir);
  RunManifest manifest(dir, "finetune");
  if (cfg.run.checkpoint_dir.empty()) cfg.run.checkpoint_dir = (dir / "checkpoints").string();
  echo_config(dir, cfg);
  FinetuneContext ctx;
  ctx.out_dir = dir.string();
  ctx.quiet = quiet;
  if (!cfg.run.dataset_path.empty()) {
    const fs::path hashes = fs::path(cfg.run.dataset_path) / "train_hashes.txt";
    if (fs::exists(hashes)) ctx.training_hashes = load_hashes(hashes.string());
  }
  FinetuneResult res = run_finetune(cfg.run, start, ctx);
  save_checkpoint((dir / "final.ckpt").string(), res.final);
  manifest.doc()["seed"] = cfg.run.seed;
  manifest.doc()["epochs"] = res.final.epoch;
  manifest.doc()["converged"] = res.converged;
  manifest.doc()["metrics_schema"] = kMetricsSchema;
  manifest.finish();
  return res;
}

int cmd_sample(const std::string& from, int n, int steps, std::uint64_t seed, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(from);
  const NoiseSchedule sched = make_schedule(steps > 0 ? steps : ckpt.steps, ckpt.schedule_kind);
  const fs::path dir(out);
  fs::create_directories(dir);
  RunManifest manifest(dir, "sample");
  json files = json::array();
  for (int k = 0; k < n; ++k) {
    const SeedSpec s = SeedSpec{seed, 0}.derive(static_cast<std::uint64_t>(k));
    Rng size_rng(s.derive(1));
    const Trajectory traj = sample_trajectory(ckpt.params, ckpt.sizes.sample(size_rng), sched, s);
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05d.xyz", k);
    write_xyz_file((dir / name).string(), traj.molecule, table(), "sample seed " + std::to_string(seed));
    files.push_back(name);
  }
  manifest.doc()["files"] = files;
  manifest.doc()["seed"] = seed;
  manifest.doc()["steps"] = sched.steps();
  manifest.finish();
  return 0;
}

int cmd_eval(const std::string& samples, const std::string& hashes_path, const std::string& format) {
  const auto mols = load_dataset(samples, table());
  std::unordered_set<std::uint64_t> hashes;
  if (!hashes_path.empty()) hashes = load_hashes(hashes_path);
  const EvalReport r = evaluate(mols, table(), hashes);
  if (format == "csv") std::cout << EvalReport::csv_header() << "\n" << r.csv_row() << "\n";
  else std::cout << r.pretty();
  return 0;
}

int cmd_reject(const std::string& from, double threshold, int target, int batch, std::uint64_t seed) {
  const Checkpoint ckpt = load_checkpoint(from);
  const RejectionResult r = rejection_sample(ckpt.params, ckpt.schedule(), ckpt.sizes, target, threshold,
                                             batch, SeedSpec{seed, 0}, table());
  std::printf("time_s,molecules_sampled\n%.3f,%ld\n", r.wall_time_s, r.total_sampled);
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Reward fine-tuning of an equivariant molecular diffusion model"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress on stderr");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic equilibrium dataset");
  int count = 512, atoms_min = 3, atoms_max = 7;
  std::uint64_t gen_seed = 7;
  std::string gen_out;
  gen->add_option("--count", count)->check(CLI::PositiveNumber);
  gen->add_option("--atoms-min", atoms_min);
  gen->add_option("--atoms-max", atoms_max);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--out", gen_out)->required();

  // shared run options
  std::string config_path, out_dir, from, reward_kind, schedule_kind;
  double epsilon = 0, lr = 0;
  int epochs = 0, K = 0, T = 0, workers = 0, minibatch = -1, iterations = 0, hidden = 0, layers = 0;
  std::uint64_t seed = 0;
  std::string data_dir;
  auto add_run_opts = [&](CLI::App* c) {
    c->add_option("--config", config_path, "JSON config")->check(CLI::ExistingFile);
    c->add_option("--out", out_dir)->required();
    c->add_option("--seed", seed);
    c->add_option("--steps,-T", T, "Diffusion steps T");
  };

  auto* pre = app.add_subcommand("pretrain", "Train the denoiser on a dataset");
  add_run_opts(pre);
  pre->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  pre->add_option("--iterations", iterations);
  pre->add_option("--hidden", hidden);
  pre->add_option("--layers", layers);

  auto add_ft_opts = [&](CLI::App* c) {
    add_run_opts(c);
    c->add_option("--from", from, "Pretrained or resumable checkpoint")->required()->check(CLI::ExistingFile);
    c->add_option("--reward", reward_kind)->check(CLI::IsMember({"force", "valency", "composite", "external"}));
    c->add_option("--epochs", epochs);
    c->add_option("-K,--trajectories", K);
    c->add_option("--workers", workers);
    c->add_option("--lr", lr);
    c->add_option("--minibatch", minibatch);
    c->add_option("--data", data_dir, "Dataset directory, for novelty hashes");
  };
  auto* ft = app.add_subcommand("finetune", "Reward fine-tuning with the clipped surrogate");
  add_ft_opts(ft);
  ft->add_option("--epsilon", epsilon, "Clip range")->check(CLI::PositiveNumber);

  auto* abl = app.add_subcommand("ablate-eps", "One fine-tune run per clip range");
  add_ft_opts(abl);
  std::string values = "0.05,0.2,100";
  abl->add_option("--values", values);

  auto* smp = app.add_subcommand("sample", "Draw molecules from a checkpoint");
  int n_samples = 64, sample_steps = 0;
  std::uint64_t sample_seed = 0;
  std::string sample_from, sample_out;
  smp->add_option("--from", sample_from)->required()->check(CLI::ExistingFile);
  smp->add_option("-n", n_samples)->check(CLI::PositiveNumber);
  smp->add_option("--steps", sample_steps);
  smp->add_option("--seed", sample_seed);
  smp->add_option("--out", sample_out)->required();

  auto* ev = app.add_subcommand("eval", "Stability, validity, uniqueness and novelty of samples");
  std::string eval_samples, eval_hashes, eval_format = "text";
  ev->add_option("--samples", eval_samples)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--train-hashes", eval_hashes)->check(CLI::ExistingFile);
  ev->add_option("--format", eval_format)->check(CLI::IsMember({"text", "csv"}));

  auto* rej = app.add_subcommand("reject", "Samples needed to collect force-stable molecules");
  std::string reject_from;
  double threshold = 0.2;
  int target = 200, batch = 64;
  std::uint64_t reject_seed = 0;
  rej->add_option("--from", reject_from)->required()->check(CLI::ExistingFile);
  rej->add_option("--threshold", threshold);
  rej->add_option("--target,-n", target)->check(CLI::PositiveNumber);
  rej->add_option("--batch", batch)->check(CLI::PositiveNumber);
  rej->add_option("--seed", reject_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  auto resolve = [&](CLI::App* c) {
    CliConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path, cfg);
    if (c->count("--seed")) {
      cfg.run.seed = seed;
      cfg.pretrain.seed = seed;
    }
    if (c->count("--steps")) cfg.run.steps = cfg.pretrain.steps = T;
    if (c->get_option_no_throw("--iterations") && c->count("--iterations")) cfg.pretrain.max_iterations = iterations;
    if (c->get_option_no_throw("--hidden") && c->count("--hidden")) cfg.pretrain.hidden = hidden;
    if (c->get_option_no_throw("--layers") && c->count("--layers")) cfg.pretrain.layers = layers;
    if (c->get_option_no_throw("--reward") && c->count("--reward")) cfg.run.reward.kind = reward_kind_from_string(reward_kind);
    if (c->get_option_no_throw("--epochs") && c->count("--epochs")) cfg.run.max_epochs = epochs;
    if (c->get_option_no_throw("-K") && c->count("-K")) cfg.run.K = K;
    if (c->get_option_no_throw("--workers") && c->count("--workers")) cfg.run.reward_workers = workers;
    if (c->get_option_no_throw("--lr") && c->count("--lr")) cfg.run.adam.lr = lr;
    if (c->get_option_no_throw("--minibatch") && c->count("--minibatch")) cfg.run.clip.minibatch = minibatch;
    if (c->get_option_no_throw("--epsilon") && c->count("--epsilon")) cfg.run.clip.epsilon = epsilon;
    if (c->get_option_no_throw("--data") && c->count("--data")) cfg.run.dataset_path = data_dir;
    return cfg;
  };

  try {
    if (*gen) {
      if (atoms_min > atoms_max) {
        std::cerr << "gen-data: --atoms-min must not exceed --atoms-max\n";
        return 2;
      }
      return cmd_gen_data(count, atoms_min, atoms_max, gen_seed, gen_out);
    }
    if (*pre) return cmd_pretrain(resolve(pre), data_dir, out_dir, quiet);
    if (*ft) {
      const CliConfig cfg = resolve(ft);
      finetune_into(cfg, load_checkpoint(from), out_dir, quiet);
      return 0;
    }
    if (*abl) {
      const CliConfig base = resolve(abl);
      const Checkpoint start = load_checkpoint(from);
      if (start.epoch != 0) {
        std::cerr << "ablate-eps: --from must be a pretrained checkpoint\n";
        return 2;
      }
      for (double v : parse_values(values)) {
        CliConfig cfg = base;
        cfg.run.clip.epsilon = v;
        cfg.run.checkpoint_dir.clear();
        finetune_into(cfg, start, fs::path(out_dir) / ("eps_" + value_label(v)), quiet);
      }
      return 0;
    }
    if (*smp) return cmd_sample(sample_from, n_samples, sample_steps, sample_seed, sample_out);
    if (*ev) return cmd_eval(eval_samples, eval_hashes, eval_format);
    if (*rej) return cmd_reject(reject_from, threshold, target, batch, reject_seed);
  } catch (const Error& e) {
    std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "exception"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace rlpf
