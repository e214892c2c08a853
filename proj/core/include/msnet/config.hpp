#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msnet/data.hpp"
#include "msnet/model.hpp"
#include "msnet/train.hpp"

namespace msnet {

/// Everything a CLI command needs, resolved from defaults, a config file and overrides.
struct RunConfig {
  std::uint64_t seed = 42;                 // top-level seed: init, sampling, augmentation
  std::optional<std::uint64_t> data_seed;  // corpus seed; defaults to `seed`
  ArchConfig arch;
  TrainConfig train;
  CorpusConfig corpus;
  std::string preset = "heterogeneous";
  Strategy strategy = Strategy::kMsnet;
  std::vector<Strategy> strategies{Strategy::kJoint, Strategy::kSeparate, Strategy::kDsbn, Strategy::kMsnet};
  std::vector<std::uint64_t> seeds{42};
  std::vector<double> alpha_grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  int checkpoint_every = 250;
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "out";

  /// Copies `seed` into the train and corpus configs and validates everything.
  void finalize();
  nlohmann::json to_json() const;
};

/// Every accepted key, fully qualified (section.key), for help output.
std::vector<std::string> config_keys();

/// Applies one assignment. `key` may be fully qualified or a bare key that
/// names exactly one schema entry. Throws ConfigError naming the key.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

/// Parses `key = value` lines with optional [section] headers and # comments.
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// Parses `key=value` command-line overrides.
void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments);

}  // namespace msnet
