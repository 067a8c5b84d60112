#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "icrdn/config.hpp"

namespace icrdn {

enum class Stage { Data, Identity, Codec, Diffusion, Classifier, Eval, All };

auto to_string(Stage stage) -> std::string;
auto parse_stage(std::string_view name) -> Stage;
/// The concrete stages in execution order.
auto pipeline_stages() -> std::vector<Stage>;
/// Stages whose outputs `stage` reads.
auto stage_dependencies(Stage stage) -> std::vector<Stage>;

struct RunOptions {
    std::filesystem::path runs_root = "runs";
    bool resume = false;
    bool verbose = true;
};

struct RunReport {
    Stage stage = Stage::Data;
    std::map<std::string, double> metrics;
    std::filesystem::path checkpoint_path;
    double wall_time = 0.0;  // seconds
    std::string config_hash;
};

/// runs_root / config_hash
auto run_directory(const ExperimentConfig& config, const RunOptions& options) -> std::filesystem::path;

/// Runs one stage (or every stage for Stage::All) and writes its artifacts
/// under runs/<config_hash>/<stage>/. With `resume`, stages that already
/// have a report are loaded instead of rerun. Missing upstream stages raise
/// DependencyError listing them. Returns the report of the last stage run.
auto run_stage(const ExperimentConfig& config, Stage stage, const RunOptions& options) -> RunReport;

/// Reads a stage's report.json.
auto load_report(const std::filesystem::path& run_dir, Stage stage) -> RunReport;

/// Merged metrics of every completed stage as sorted-key JSON text, keys
/// "<stage>.<metric>"; wall times are excluded.
auto merged_metrics_json(const std::filesystem::path& run_dir) -> std::string;

/// Serialised RunReport.
auto report_json(const RunReport& report) -> std::string;

}  // namespace icrdn
