#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "icrdn/icrdn.h"

namespace {

auto fail(icrdn_status status) -> int {
    std::cerr << "icrdn: " << icrdn_status_name(status) << ": " << icrdn_last_error() << "\n";
    return static_cast<int>(status);
}

auto run_command(const std::string& config_path, const std::string& stage_name, bool resume,
                 const std::string& runs_dir, bool quiet) -> int {
    icrdn_stage stage{};
    if (auto s = icrdn_parse_stage(stage_name.c_str(), &stage); s != ICRDN_OK) {
        return fail(s);
    }
    icrdn_config* config = nullptr;
    if (auto s = icrdn_config_load(config_path.c_str(), &config); s != ICRDN_OK) {
        return fail(s);
    }
    char hash[32];
    icrdn_config_hash(config, hash, sizeof hash);
    std::cerr << "icrdn: run " << hash << " stage " << stage_name << "\n";
    char* report = nullptr;
    const auto status = icrdn_run_stage(config, stage, resume ? 1 : 0, runs_dir.c_str(), quiet ? 0 : 1, &report);
    icrdn_config_free(config);
    if (status != ICRDN_OK) {
        return fail(status);
    }
    std::cout << report;
    icrdn_string_free(report);
    return 0;
}

auto report_command(const std::string& hash, const std::string& runs_dir) -> int {
    char* metrics = nullptr;
    if (auto s = icrdn_report(runs_dir.c_str(), hash.c_str(), &metrics); s != ICRDN_OK) {
        return fail(s);
    }
    std::cout << metrics;
    icrdn_string_free(metrics);
    return 0;
}

auto hash_command(const std::string& config_path) -> int {
    icrdn_config* config = nullptr;
    if (auto s = icrdn_config_load(config_path.c_str(), &config); s != ICRDN_OK) {
        return fail(s);
    }
    char hash[32];
    icrdn_config_hash(config, hash, sizeof hash);
    icrdn_config_free(config);
    std::cout << hash << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Identity-consistent radiographic diffusion: staged experiment runner"};
    app.require_subcommand(1);
    std::string runs_dir = "runs";
    app.add_option("--runs-dir", runs_dir, "Root directory of run outputs")->capture_default_str();

    std::string config_path;
    std::string stage = "all";
    bool resume = false;
    bool quiet = false;
    auto* run = app.add_subcommand("run", "Run one pipeline stage or all of them");
    run->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
    run->add_option("--stage", stage, "data|identity|codec|diffusion|classifier|eval|all")
        ->check(CLI::IsMember({"data", "identity", "codec", "diffusion", "classifier", "eval", "all"}))
        ->capture_default_str();
    run->add_flag("--resume", resume, "Skip stages that already have a report");
    run->add_flag("--quiet", quiet, "Suppress progress logging");

    std::string hash;
    auto* report = app.add_subcommand("report", "Print the merged metrics JSON of a run");
    report->add_option("--run", hash, "Config hash of the run")->required();

    std::string hash_config;
    auto* hash_cmd = app.add_subcommand("hash", "Print the config hash of a config file");
    hash_cmd->add_option("--config", hash_config, "Config file")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);
    if (*run) {
        return run_command(config_path, stage, resume, runs_dir, quiet);
    }
    if (*report) {
        return report_command(hash, runs_dir);
    }
    return hash_command(hash_config);
}
