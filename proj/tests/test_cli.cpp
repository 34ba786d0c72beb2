#include <doctest.h>

#include "rlpf/cli.hpp"
#include "rlpf/xyz.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace rlpf;
namespace fs = std::filesystem;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "rlpf");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config parsing") {
  const CliConfig def = parse_config("{}");
  CHECK(def.run.steps == 100);
  CHECK(def.run.K == 64);
  CHECK(def.run.max_epochs == 30);
  CHECK(def.run.clip.epsilon == 0.2);
  CHECK(def.run.adam.lr == 1e-5);
  CHECK(def.run.adam.weight_decay == 1e-4);
  CHECK(def.run.advantage_clip == 1.0);

  const CliConfig c = parse_config(R"({"T": 20, "K": 8, "epsilon": 100, "reward": "valency",
                                       "schedule": "cosine", "hidden": 16, "lambda": 2.0})");
  CHECK(c.run.steps == 20);
  CHECK(c.pretrain.steps == 20);
  CHECK(c.run.K == 8);
  CHECK(c.run.clip.epsilon == 100.0);
  CHECK(c.run.reward.kind == RewardKind::valency);
  CHECK(c.run.schedule == ScheduleKind::cosine);
  CHECK(c.pretrain.hidden == 16);
  CHECK(c.run.reward.composite.lambda == 2.0);

  CHECK_THROWS_AS(parse_config(R"({"epsilom": 0.2})"), ParseError);
  CHECK_THROWS_AS(parse_config(R"({"K": "many"})"), ParseError);
  CHECK_THROWS_AS(parse_config(R"({"reward": "energy"})"), Error);
  CHECK_THROWS_AS(parse_config("[1, 2]"), ParseError);
  CHECK_THROWS_AS(parse_config("{not json"), ParseError);

  const CliConfig back = parse_config(config_to_json(c));
  CHECK(back.run.digest() == c.run.digest());
  CHECK(back.pretrain.hidden == 16);
}

TEST_CASE("command line end to end") {
  const fs::path dir = fs::temp_directory_path() / "rlpf_test_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = dir.string();

  CHECK(cli({"-q", "gen-data", "--count", "40", "--atoms-min", "3", "--atoms-max", "5", "--out", d + "/data"}) == 0);
  CHECK(fs::exists(dir / "data" / "mol_00039.xyz"));
  CHECK(slurp(dir / "data" / "manifest.json").find("\"complete\": true") != std::string::npos);
  CHECK(load_dataset(d + "/data", AtomTable::standard()).size() == 40);
  CHECK(load_hashes(d + "/data/train_hashes.txt").size() >= 1);

  {
    std::ofstream cfg(dir / "cfg.json");
    cfg << R"({"T": 6, "K": 4, "layers": 1, "hidden": 8, "iterations": 60, "batch": 4, "eval_every": 20,
              "holdout": 8, "holdout_draws": 1, "minibatch": 8, "probe_trajectories": 2, "probe_stride": 2,
              "stop_on_convergence": false})";
  }
  CHECK(cli({"-q", "pretrain", "--config", d + "/cfg.json", "--data", d + "/data", "--out", d + "/pre"}) == 0);
  CHECK(fs::exists(dir / "pre" / "pretrained.ckpt"));
  CHECK(fs::exists(dir / "pre" / "loss.csv"));

  CHECK(cli({"-q", "finetune", "--config", d + "/cfg.json", "--from", d + "/pre/pretrained.ckpt", "--epochs", "2",
             "--data", d + "/data", "--out", d + "/ft"}) == 0);
  const std::string metrics = slurp(dir / "ft" / "metrics.csv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);
  CHECK(fs::exists(dir / "ft" / "final.ckpt"));
  CHECK(fs::exists(dir / "ft" / "rewards.csv"));

  CHECK(cli({"sample", "--from", d + "/ft/final.ckpt", "-n", "5", "--out", d + "/samples"}) == 0);
  int files = 0;
  for (const auto& e : fs::directory_iterator(dir / "samples")) files += e.path().extension() == ".xyz";
  CHECK(files == 5);
  CHECK(cli({"eval", "--samples", d + "/samples", "--train-hashes", d + "/data/train_hashes.txt", "--format", "csv"}) == 0);

  // failures exit non-zero
  CHECK(cli({"-q", "finetune", "--from", d + "/pre/pretrained.ckpt", "--out", d + "/bad"}) != 0);  // T mismatch
  CHECK(cli({"bogus"}) != 0);
  {
    std::ofstream junk(dir / "junk.ckpt");
    junk << "nope";
  }
  CHECK(cli({"sample", "--from", d + "/junk.ckpt", "--out", d + "/s2"}) == 1);
  fs::remove_all(dir);
}
