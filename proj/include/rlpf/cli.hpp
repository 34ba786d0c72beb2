#pragma once

#include "rlpf/pipeline.hpp"

#include <string>

namespace rlpf {

// Everything a run can be configured with; loaded from JSON, then overridden by flags.
struct CliConfig {
  RunConfig run;
  PretrainConfig pretrain;
};

// Throws ParseError on unknown keys or wrongly typed values.
CliConfig parse_config(const std::string& json_text, CliConfig base = {});
CliConfig load_config(const std::string& path, CliConfig base = {});
std::string config_to_json(const CliConfig& cfg);

std::vector<Molecule> load_dataset(const std::string& dir, const AtomTable& table);
std::unordered_set<std::uint64_t> load_hashes(const std::string& path);

int run_cli(int argc, char** argv);

}  // namespace rlpf
