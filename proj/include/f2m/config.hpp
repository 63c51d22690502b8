#pragma once

// Run configuration: a TOML-style key/value file with [run], [data],
// [network] and [train] sections, plus command-line overrides.
//
//   [train]
//   b = 0.02
//   flags = "fm,pf,pc,pn"
//
// Every key is unique across sections, so a section header is optional.
// Unknown keys, malformed values and constraint violations raise ConfigError
// naming the key. A run_manifest.json written by the CLI is also accepted
// and reproduces the resolved configuration.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "f2m/bench.hpp"
#include "json.hpp"

namespace f2m {

enum class Mode { f2m, baseline, ablation, sweep, flatness, convergence };

std::string mode_name(Mode mode);
Mode parse_mode(const std::string& text);

struct RunConfig {
    ExperimentConfig experiment;
    Mode mode = Mode::f2m;
    std::string out = "f2m_out";
    std::size_t seeds = 1;
    std::vector<double> sweep_grid = default_bound_grid();
    /// Run-state directory for the flatness subcommand.
    std::string checkpoint;

    bool operator==(const RunConfig&) const = default;
};

/// Defaults: b = 0.01, M = 2, 6 incremental epochs,
/// beta = 0.02, lambda = 1, 5 exemplars per new class.
RunConfig default_run_config();

using Override = std::pair<std::string, std::string>;

/// Reads `path` (if given), applies overrides (key, value) in order and
/// validates the result.
RunConfig parse_config(const std::optional<std::filesystem::path>& path, const std::vector<Override>& overrides = {});
RunConfig parse_config_text(const std::string& text, const std::vector<Override>& overrides = {});

/// Section-nested JSON of every key, in the form parse_config accepts.
nlohmann::json to_json(const RunConfig& config);

/// Names of all recognised keys.
std::vector<std::string> config_keys();

}  // namespace f2m
