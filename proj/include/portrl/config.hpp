#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "portrl/agent.hpp"
#include "portrl/backtest.hpp"
#include "portrl/ndybm.hpp"
#include "portrl/rgan.hpp"

namespace portrl {

// Full run configuration, loadable from an INI-style file with [section]
// headers and key = value lines. Every hyperparameter is addressable.
struct RunConfig {
    // [data]
    std::string csv_path;
    std::vector<std::string> assets;  // risky symbols, in portfolio order
    std::string index_symbol;
    std::string train_begin, train_end;  // inclusive ISO-8601 stamps
    std::string test_begin, test_end;
    std::size_t aggregate_factor = 1;

    // [modules]
    bool use_ipm = false;
    bool use_dam = false;
    bool use_bcm = false;
    std::string variant = "ddpg";  // ddpg | rdpg-dsr | rdpg-d3r

    // [agent]
    AgentConfig agent;

    // [ipm]
    NdybmConfig ipm;
    bool ipm_input_smoothing = true;
    double ipm_noise_sd = 0.01;
    std::size_t savgol_window = 5;
    std::size_t savgol_order = 3;

    // [dam]
    GanConfig gan;
    std::size_t dam_horizon = 42;

    // [exec]
    ExecutionConfig exec;

    // [metrics]
    double metrics_alpha = 0.95;

    // [run]
    std::uint64_t seed = 1;
    std::string output_dir = "out";
};

RunConfig config_from_ini_text(const std::string& text);
RunConfig load_config(const std::string& path);

// Throws with an actionable message on invalid combinations: empty asset
// list, overlapping or misordered date ranges, bad variant names.
void validate_config(const RunConfig& config);

// Resolved configuration echo for the report (sorted keys, no timestamps).
nlohmann::json config_echo(const RunConfig& config);

}  // namespace portrl
