#pragma once

#include <array>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "cfanet/model.hpp"
#include "cfanet/synth.hpp"
#include "cfanet/train.hpp"

namespace cfanet {

/// Everything a command-line run can set. Serialized as one flat JSON object;
/// every key has a default.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthOptions synth;  // used when no dataset manifest is given
  int heldout_count = 32;
  std::string dataset;
  std::string heldout;
  std::string checkpoint;
  std::string out = "runs";
  std::string axis = "branches";
  int n_seeds = 5;
  int threads = 0;  // 0: CFANET_THREADS or the hardware count
  double tol = 1e-4;
};

struct ConfigKey {
  std::string name;
  std::string help;
  // Subcommands that expose the key as a flag.
  std::vector<std::string> commands;
};

const std::vector<ConfigKey>& config_keys();

/// "1-4", "3-4", "4" or a comma list such as "1,2,4".
std::array<bool, 4> parse_supervision(const std::string& s);
std::string supervision_string(const std::array<bool, 4>& stages);

nlohmann::json to_json(const RunConfig& c);

/// Starts from the defaults and applies `j`. Unknown keys, wrong JSON types
/// and unparsable enum values raise InvalidArgument.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Reads a flat JSON config file. Unreadable file: IoError; malformed JSON:
/// FormatError; bad keys or values: InvalidArgument.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Sets one key from its command-line text, typed after the key's default.
void apply_flag(nlohmann::json& j, const std::string& key, const std::string& text);

}  // namespace cfanet
