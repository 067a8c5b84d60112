#include "icrdn/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "icrdn/classifier.hpp"
#include "icrdn/diffusion.hpp"
#include "icrdn/errors.hpp"
#include "icrdn/evaluation.hpp"
#include "icrdn/identity_prior.hpp"
#include "icrdn/latent_codec.hpp"
#include "icrdn/random.hpp"
#include "icrdn/synthetic_data.hpp"
#include "json.hpp"

namespace icrdn {

namespace fs = std::filesystem;
using nlohmann::json;

auto to_string(Stage stage) -> std::string {
    switch (stage) {
        case Stage::Data: return "data";
        case Stage::Identity: return "identity";
        case Stage::Codec: return "codec";
        case Stage::Diffusion: return "diffusion";
        case Stage::Classifier: return "classifier";
        case Stage::Eval: return "eval";
        case Stage::All: return "all";
    }
    return "unknown";
}

auto parse_stage(std::string_view name) -> Stage {
    for (auto s : {Stage::Data, Stage::Identity, Stage::Codec, Stage::Diffusion, Stage::Classifier, Stage::Eval,
                   Stage::All}) {
        if (to_string(s) == name) {
            return s;
        }
    }
    throw ConfigError("unknown stage '" + std::string(name) +
                      "' (expected data|identity|codec|diffusion|classifier|eval|all)");
}

auto pipeline_stages() -> std::vector<Stage> {
    return {Stage::Data, Stage::Identity, Stage::Codec, Stage::Diffusion, Stage::Classifier, Stage::Eval};
}

auto stage_dependencies(Stage stage) -> std::vector<Stage> {
    switch (stage) {
        case Stage::Data: return {};
        case Stage::Identity:
        case Stage::Codec: return {Stage::Data};
        case Stage::Diffusion: return {Stage::Data, Stage::Identity, Stage::Codec};
        case Stage::Classifier: return {Stage::Data, Stage::Diffusion};
        case Stage::Eval: return {Stage::Data, Stage::Identity, Stage::Diffusion};
        case Stage::All: return {};
    }
    return {};
}

auto run_directory(const ExperimentConfig& config, const RunOptions& options) -> fs::path {
    return options.runs_root / config_hash(config);
}

namespace {

constexpr const char* kReportFile = "report.json";
constexpr const char* kMetricsFile = "metrics.json";

struct Variant {
    std::string name;
    bool injection;
    std::string samples_dir;
    std::string checkpoint;
};

auto variants(const ExperimentConfig& config) -> std::vector<Variant> {
    std::vector<Variant> out{{"icrdn", true, "samples", "denoiser_icrdn.pt"}};
    if (config.train_ablation) {
        out.push_back({"i2i", false, "samples_i2i", "denoiser_i2i.pt"});
    }
    return out;
}

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    [[nodiscard]] auto seconds() const -> double {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

void log(const RunOptions& options, Stage stage, const std::string& message) {
    if (options.verbose) {
        std::cerr << "[icrdn:" << to_string(stage) << "] " << message << std::endl;
    }
}

template <typename Module>
void save_checkpoint(Module& module, const fs::path& path, const std::string& hash) {
    fs::create_directories(path.parent_path());
    torch::serialize::OutputArchive archive;
    module->save(archive);
    archive.write("config_hash", c10::IValue(hash));
    archive.save_to(path.string());
}

template <typename Module>
void load_checkpoint(Module& module, const fs::path& path, const std::string& hash) {
    if (!fs::exists(path)) {
        throw DependencyError("missing checkpoint " + path.string());
    }
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    c10::IValue stored;
    if (!archive.try_read("config_hash", stored) || !stored.isString() || stored.toStringRef() != hash) {
        throw DependencyError("checkpoint " + path.string() + " was not produced by config " + hash);
    }
    module->load(archive);
    module->eval();
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

auto read_text(const fs::path& path) -> std::string {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

auto report_to_json(const RunReport& report) -> json {
    json metrics = json::object();
    for (const auto& [k, v] : report.metrics) {
        metrics[k] = v;
    }
    return json{{"stage", to_string(report.stage)},
                {"metrics", metrics},
                {"checkpoint_path", report.checkpoint_path.generic_string()},
                {"wall_time", report.wall_time},
                {"config_hash", report.config_hash}};
}

auto sample_seed(const ExperimentConfig& config, const JointKey& key) -> std::uint64_t {
    return derive_seed(config.rng_seed, {0xd5, static_cast<std::uint64_t>(key.subject_id),
                                         static_cast<std::uint64_t>(key.side)});
}

auto all_records(const DatasetSplit& splits) -> std::vector<JointRecord> {
    std::vector<JointRecord> out;
    for (auto name : {SplitName::Train, SplitName::Val, SplitName::Test}) {
        const auto& part = splits.part(name);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

auto load_followups(const fs::path& dir, const std::vector<JointRecord>& records, int channels) -> JointImages {
    JointImages out;
    for (const auto& r : records) {
        const auto path = dir / (r.key().str() + ".png");
        if (fs::exists(path)) {
            out.emplace(r.key(), read_png(path, channels));
        }
    }
    return out;
}

auto images_of(const std::vector<JointRecord>& records, Visit visit) -> std::vector<Image> {
    std::vector<Image> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back(r.image(visit));
    }
    return out;
}

void write_table(const fs::path& dir, const std::string& stem, const std::string& row_label,
                 const std::vector<std::string>& rows, const std::vector<std::string>& columns,
                 const std::map<std::pair<std::string, std::string>, double>& cells) {
    std::ostringstream csv;
    csv << row_label;
    for (const auto& c : columns) {
        csv << ',' << c;
    }
    csv << '\n';
    json table = json::object();
    for (const auto& r : rows) {
        csv << r;
        json row = json::object();
        for (const auto& c : columns) {
            const auto it = cells.find({r, c});
            csv << ',';
            if (it != cells.end()) {
                csv << json(it->second).dump();
                row[c] = it->second;
            }
        }
        csv << '\n';
        table[r] = row;
    }
    write_text(dir / (stem + ".csv"), csv.str());
    write_text(dir / (stem + ".json"), table.dump(2) + "\n");
}

struct StageContext {
    const ExperimentConfig& config;
    const RunOptions& options;
    fs::path run_dir;
    std::string hash;

    [[nodiscard]] auto dir(Stage stage) const -> fs::path { return run_dir / to_string(stage); }
    [[nodiscard]] auto dataset() const -> DatasetSplit { return load_dataset(dir(Stage::Data), config.channels); }
    [[nodiscard]] auto identity_model() const -> IdentityEncoder {
        auto model = make_identity_encoder(config);
        load_checkpoint(model, dir(Stage::Identity) / "encoder.pt", hash);
        return model;
    }
    [[nodiscard]] auto codec() const -> VqCodec {
        auto model = make_codec(config);
        load_checkpoint(model, dir(Stage::Codec) / "codec.pt", hash);
        return model;
    }
};

auto run_data(const StageContext& ctx, RunReport& report) {
    const auto& c = ctx.config;
    const auto records = generate_dataset(c.n_subjects, c.progression_rate, derive_seed(c.rng_seed, {0xda}),
                                          c.image_size, c.channels);
    const auto splits = split_by_subject(records, c.split_ratios, derive_seed(c.rng_seed, {0xda, 1}));
    const auto dir = ctx.dir(Stage::Data);
    save_dataset(splits, dir);
    report.checkpoint_path = dir / "manifest.json";
    report.metrics["train_joints"] = static_cast<double>(splits.train.size());
    report.metrics["val_joints"] = static_cast<double>(splits.val.size());
    report.metrics["test_joints"] = static_cast<double>(splits.test.size());
    std::array<int, kNumGrades> grades{};
    int progressors = 0;
    for (const auto& r : records) {
        ++grades[static_cast<std::size_t>(r.kl_v12m)];
        progressors += r.kl_v12m > r.kl_v00m ? 1 : 0;
    }
    for (int k = 0; k < kNumGrades; ++k) {
        report.metrics["kl_v12m_count_" + std::to_string(k)] = grades[static_cast<std::size_t>(k)];
    }
    report.metrics["progressor_fraction"] = static_cast<double>(progressors) / static_cast<double>(records.size());
}

auto run_identity(const StageContext& ctx, RunReport& report) {
    const auto splits = ctx.dataset();
    auto result = train_identity_prior(ctx.config, splits);
    report.checkpoint_path = ctx.dir(Stage::Identity) / "encoder.pt";
    save_checkpoint(result.model, report.checkpoint_path, ctx.hash);
    report.metrics["final_train_loss"] = result.final_train_loss;
    report.metrics["verification_accuracy"] = result.verification_accuracy;
    report.metrics["untrained_accuracy"] = result.untrained_accuracy;
    report.metrics["untrained_accuracy_min"] = result.untrained_min;
    report.metrics["untrained_accuracy_max"] = result.untrained_max;
    report.metrics["train_triplets"] = result.train_triplets;
    report.metrics["eval_triplets"] = result.eval_triplets;
}

auto run_codec(const StageContext& ctx, RunReport& report) {
    const auto splits = ctx.dataset();
    std::vector<Image> probe;
    for (std::size_t i = 0; i < splits.test.size() && probe.size() < 8; ++i) {
        probe.push_back(splits.test[i].image_v00m);
    }
    const auto grid_dir = ctx.dir(Stage::Codec) / "reconstructions";
    auto result = train_codec(ctx.config, splits, [&](int epoch, VqCodec& codec) {
        torch::NoGradGuard no_grad;
        codec->eval();
        const auto recon = decode_latents(codec, encode_images(codec, probe));
        std::vector<Image> row;
        for (std::int64_t i = 0; i < recon.size(0); ++i) {
            row.push_back(recon[i]);
        }
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d.png", epoch + 1);
        write_png(grid_dir / name, vstack({hstack(probe), hstack(row)}));
    });
    report.checkpoint_path = ctx.dir(Stage::Codec) / "codec.pt";
    save_checkpoint(result.codec, report.checkpoint_path, ctx.hash);
    report.metrics["test_psnr"] = result.final.psnr;
    report.metrics["test_l1"] = result.final.l1;
    report.metrics["codebook_usage"] = result.final.codebook_usage;
    report.metrics["initial_test_psnr"] = result.initial.psnr;
    report.metrics["collapse_warning"] = result.collapse_warning ? 1.0 : 0.0;
    report.metrics["final_train_l1"] = result.loss_curve.empty() ? 0.0 : result.loss_curve.back();
}

auto run_diffusion(const StageContext& ctx, RunReport& report) {
    const auto& c = ctx.config;
    const auto splits = ctx.dataset();
    auto identity_model = ctx.identity_model();
    auto codec = ctx.codec();
    const auto schedule = make_noise_schedule(c.diffusion_steps, c.beta_start, c.beta_end);
    const auto records = all_records(splits);
    const auto baselines = images_of(records, Visit::V00m);
    std::vector<std::uint64_t> seeds;
    for (const auto& r : records) {
        seeds.push_back(sample_seed(c, r.key()));
    }
    const auto dir = ctx.dir(Stage::Diffusion);
    std::map<std::string, std::vector<Image>> generated;
    for (const auto& v : variants(c)) {
        log(ctx.options, Stage::Diffusion, "training " + v.name);
        auto result = train_diffusion(c, splits, identity_model, codec, v.injection);
        save_checkpoint(result.model, dir / v.checkpoint, ctx.hash);
        report.metrics["final_loss_" + v.name] = result.final_loss;
        log(ctx.options, Stage::Diffusion, "sampling " + std::to_string(records.size()) + " follow-ups (" + v.name + ")");
        auto images = generate_followups(result.model, identity_model, codec, schedule, baselines, seeds, c.sample_batch);
        for (std::size_t i = 0; i < records.size(); ++i) {
            write_png(dir / v.samples_dir / (records[i].key().str() + ".png"), images[i]);
        }
        generated[v.name] = std::move(images);
    }
    report.checkpoint_path = dir / "denoiser_icrdn.pt";
    report.metrics["samples"] = static_cast<double>(records.size());

    // baseline | IC-RDN | ablation | real 12-month, first test joints
    const std::size_t offset = splits.train.size() + splits.val.size();
    std::vector<Image> rows;
    for (std::size_t i = offset; i < records.size() && rows.size() < 8; ++i) {
        std::vector<Image> row{records[i].image_v00m};
        for (const auto& v : variants(c)) {
            row.push_back(generated[v.name][i]);
        }
        row.push_back(records[i].image_v12m);
        rows.push_back(hstack(row));
    }
    if (!rows.empty()) {
        write_png(dir / "comparison.png", vstack(rows));
    }
}

auto run_classifier(const StageContext& ctx, RunReport& report) {
    const auto& c = ctx.config;
    const auto splits = ctx.dataset();
    const auto records = all_records(splits);
    const auto dir = ctx.dir(Stage::Classifier);
    std::vector<std::string> rows{"baseline_only"};
    std::map<std::string, JointImages> followups;
    for (const auto& v : variants(c)) {
        rows.push_back(v.name);
        followups[v.name] = load_followups(ctx.dir(Stage::Diffusion) / v.samples_dir, records, c.channels);
    }
    std::vector<std::string> columns;
    std::map<std::pair<std::string, std::string>, double> cells;
    for (auto backbone : c.backbone_matrix) {
        const auto column = to_string(backbone);
        columns.push_back(column);
        for (const auto& row : rows) {
            log(ctx.options, Stage::Classifier, row + " x " + column);
            const bool baseline_only = row == "baseline_only";
            auto result = train_and_evaluate(c, splits, baseline_only ? JointImages{} : followups[row],
                                                   baseline_only ? GradingMode::BaselineOnly : GradingMode::Generated,
                                                   backbone);
            cells[{row, column}] = result.test_accuracy;
            report.metrics["accuracy_" + row + "_" + column] = result.test_accuracy;
            report.metrics["majority_fraction"] = result.majority_fraction;
            if (backbone == c.backbone_name) {
                save_checkpoint(result.model, dir / ("classifier_" + row + ".pt"),
                                ctx.hash);
            }
        }
    }
    write_table(dir, "results", "variant", rows, columns, cells);
    report.checkpoint_path = dir / "results.json";
}

auto run_eval(const StageContext& ctx, RunReport& report) {
    const auto& c = ctx.config;
    const auto splits = ctx.dataset();
    auto identity_model = ctx.identity_model();
    const auto dir = ctx.dir(Stage::Eval);
    log(ctx.options, Stage::Eval, "training grade scorer");
    auto scorer = train_grade_scorer(c, splits);
    save_checkpoint(scorer.model, dir / "scorer.pt", ctx.hash);
    report.checkpoint_path = dir / "scorer.pt";
    report.metrics["scorer_test_accuracy"] = scorer.test_accuracy;

    const auto baselines = images_of(splits.test, Visit::V00m);
    std::vector<int> labels;
    for (const auto& r : splits.test) {
        labels.push_back(r.kl_v12m);
    }
    std::vector<std::pair<std::string, std::vector<Image>>> sets{{"real", images_of(splits.test, Visit::V12m)}};
    for (const auto& v : variants(c)) {
        const auto loaded = load_followups(ctx.dir(Stage::Diffusion) / v.samples_dir, splits.test, c.channels);
        std::vector<Image> images;
        std::vector<std::string> missing;
        for (const auto& r : splits.test) {
            const auto it = loaded.find(r.key());
            if (it == loaded.end()) {
                missing.push_back(r.key().str());
            } else {
                images.push_back(it->second);
            }
        }
        if (!missing.empty()) {
            throw DependencyError("missing " + v.name + " samples for " + std::to_string(missing.size()) +
                                  " test joints, first " + missing.front());
        }
        sets.emplace_back(v.name, std::move(images));
    }

    std::vector<std::string> columns{"inception_score", "identity_consistency"};
    std::vector<std::string> rows;
    std::map<std::pair<std::string, std::string>, double> cells;
    for (const auto& [name, images] : sets) {
        rows.push_back(name);
        const auto probs = scorer_probabilities(scorer.model, images);
        const double is = inception_score(probs, c.is_splits);
        const double consistency = identity_consistency(baselines, images, identity_model);
        cells[{name, columns[0]}] = is;
        cells[{name, columns[1]}] = consistency;
        report.metrics["inception_score_" + name] = is;
        report.metrics["identity_consistency_" + name] = consistency;
        const auto predicted = probs.argmax(1);
        std::array<int, kNumGrades> counts{};
        for (std::int64_t i = 0; i < predicted.size(0); ++i) {
            ++counts[static_cast<std::size_t>(predicted[i].item<std::int64_t>())];
        }
        for (int k = 0; k < kNumGrades; ++k) {
            report.metrics["predicted_grade_count_" + name + "_" + std::to_string(k)] = counts[static_cast<std::size_t>(k)];
        }
        if (images.size() >= 10) {
            const auto features = scorer_features(scorer.model, images);
            std::vector<FeatureVector> rows_f;
            for (std::int64_t i = 0; i < features.size(0); ++i) {
                rows_f.push_back(features[i]);
            }
            tsne_plot(rows_f, labels, dir / ("tsne_" + name + ".png"),
                      {c.tsne_perplexity, c.tsne_iterations, derive_seed(c.rng_seed, {0x75})});
        }
    }
    if (report.metrics.count("identity_consistency_i2i") != 0) {
        report.metrics["identity_consistency_gain"] =
            report.metrics["identity_consistency_icrdn"] - report.metrics["identity_consistency_i2i"];
    }
    write_table(dir, "results", "variant", rows, columns, cells);
}

auto is_complete(const fs::path& run_dir, Stage stage) -> bool {
    return fs::exists(run_dir / to_string(stage) / kReportFile);
}

auto run_single(const StageContext& ctx, Stage stage) -> RunReport {
    std::vector<std::string> missing;
    for (auto dep : stage_dependencies(stage)) {
        if (!is_complete(ctx.run_dir, dep)) {
            missing.push_back(to_string(dep));
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) {
            list += (list.empty() ? "" : ", ") + m;
        }
        throw DependencyError("stage '" + to_string(stage) + "' needs completed upstream stages: " + list);
    }
    if (ctx.options.resume && is_complete(ctx.run_dir, stage)) {
        log(ctx.options, stage, "already complete, skipping");
        return load_report(ctx.run_dir, stage);
    }
    log(ctx.options, stage, "running in " + ctx.dir(stage).string());
    fs::remove(ctx.dir(stage) / kReportFile);
    Stopwatch watch;
    RunReport report;
    report.stage = stage;
    report.config_hash = ctx.hash;
    switch (stage) {
        case Stage::Data: run_data(ctx, report); break;
        case Stage::Identity: run_identity(ctx, report); break;
        case Stage::Codec: run_codec(ctx, report); break;
        case Stage::Diffusion: run_diffusion(ctx, report); break;
        case Stage::Classifier: run_classifier(ctx, report); break;
        case Stage::Eval: run_eval(ctx, report); break;
        case Stage::All: break;
    }
    report.wall_time = watch.seconds();
    write_text(ctx.dir(stage) / kReportFile, report_json(report));
    write_text(ctx.run_dir / kMetricsFile, merged_metrics_json(ctx.run_dir));
    log(ctx.options, stage, "done in " + std::to_string(report.wall_time) + " s");
    return report;
}

}  // namespace

auto report_json(const RunReport& report) -> std::string { return report_to_json(report).dump(2) + "\n"; }

auto load_report(const fs::path& run_dir, Stage stage) -> RunReport {
    const auto path = run_dir / to_string(stage) / kReportFile;
    if (!fs::exists(path)) {
        throw DependencyError("no report for stage '" + to_string(stage) + "' in " + run_dir.string());
    }
    json j;
    try {
        j = json::parse(read_text(path));
        RunReport report;
        report.stage = parse_stage(j.at("stage").get<std::string>());
        for (const auto& [k, v] : j.at("metrics").items()) {
            report.metrics[k] = v.get<double>();
        }
        report.checkpoint_path = j.at("checkpoint_path").get<std::string>();
        report.wall_time = j.at("wall_time").get<double>();
        report.config_hash = j.at("config_hash").get<std::string>();
        return report;
    } catch (const json::exception& e) {
        throw IoError("malformed report " + path.string() + ": " + e.what());
    }
}

auto merged_metrics_json(const fs::path& run_dir) -> std::string {
    json merged = json::object();
    bool any = false;
    for (auto stage : pipeline_stages()) {
        if (!is_complete(run_dir, stage)) {
            continue;
        }
        any = true;
        for (const auto& [k, v] : load_report(run_dir, stage).metrics) {
            merged[to_string(stage) + "." + k] = v;
        }
    }
    if (!any) {
        throw DependencyError("no completed stages in " + run_dir.string());
    }
    return merged.dump(2) + "\n";
}

auto run_stage(const ExperimentConfig& config, Stage stage, const RunOptions& options) -> RunReport {
    validate(config);
    torch::set_num_threads(config.num_threads);
    const StageContext ctx{config, options, run_directory(config, options), config_hash(config)};
    fs::create_directories(ctx.run_dir);
    write_text(ctx.run_dir / "config.cfg", serialize(config));
    if (stage != Stage::All) {
        return run_single(ctx, stage);
    }
    RunReport last;
    for (auto s : pipeline_stages()) {
        last = run_single(ctx, s);
    }
    return last;
}

}  // namespace icrdn
