#pragma once

#include <string>

#include <json.hpp>

#include "portrl/config.hpp"

namespace portrl {

struct RunArtifacts {
    nlohmann::json report;
    std::string report_path;
    std::string checkpoint_path;
    std::string gan_checkpoint_path;  // empty when DAM is off
    std::string train_log_path;
};

// Full protocol: ingest, pretrain enabled modules on the training range,
// train the agent variant, evaluate the frozen agent on the test range (the
// IPM keeps updating online), run the CRP benchmark, and write all
// artifacts under config.output_dir. Deterministic per seed.
RunArtifacts run(const RunConfig& config);

// Evaluation only: restores the agent (and IPM state) from a checkpoint and
// backtests the test range plus CRP. Used by the backtest subcommand.
nlohmann::json evaluate_checkpoint(const RunConfig& config, const std::string& checkpoint_path,
                                   const std::string& output_dir);

// Ingest + align + cache emission for the ingest subcommand. Returns the
// number of row-level errors encountered.
std::size_t ingest_to_cache(const RunConfig& config, const std::string& out_path,
                            std::string* error_report);

// Online prediction over the configured data: one CSV row per (bar, asset)
// holding the forecast made before that bar was observed.
void predict_to_csv(const RunConfig& config, const std::string& out_path);

// Metrics recomputation from an equity CSV written by `run`.
nlohmann::json report_from_equity_csv(const std::string& equity_csv, double periods_per_year,
                                      double alpha = 0.95);

}  // namespace portrl
