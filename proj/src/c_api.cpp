#include "icrdn/icrdn.h"

#include <cstring>
#include <string>

#include "icrdn/classifier.hpp"
#include "icrdn/config.hpp"
#include "icrdn/diffusion.hpp"
#include "icrdn/errors.hpp"
#include "icrdn/evaluation.hpp"
#include "icrdn/identity_prior.hpp"
#include "icrdn/pipeline.hpp"

struct icrdn_config {
    icrdn::ExperimentConfig value;
};

namespace {

thread_local std::string g_last_error;

auto status_of(icrdn::ErrorKind kind) -> icrdn_status {
    switch (kind) {
        case icrdn::ErrorKind::Config: return ICRDN_ERR_CONFIG;
        case icrdn::ErrorKind::Validation: return ICRDN_ERR_VALIDATION;
        case icrdn::ErrorKind::Dependency: return ICRDN_ERR_DEPENDENCY;
        case icrdn::ErrorKind::Training: return ICRDN_ERR_TRAINING;
        case icrdn::ErrorKind::Io: return ICRDN_ERR_IO;
    }
    return ICRDN_ERR_INTERNAL;
}

template <typename Fn>
auto guarded(Fn&& fn) -> icrdn_status {
    try {
        fn();
        g_last_error.clear();
        return ICRDN_OK;
    } catch (const icrdn::Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return ICRDN_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return ICRDN_ERR_INTERNAL;
    }
}

void require_ptr(const void* p, const char* name) {
    icrdn::require(p != nullptr, std::string(name) + " must not be null");
}

auto copy_string(const std::string& s) -> char* {
    auto* out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

auto from_buffer(const double* data, std::int64_t rows, std::int64_t cols) -> torch::Tensor {
    return torch::from_blob(const_cast<double*>(data), {rows, cols}, torch::kFloat64).clone();
}

}  // namespace

extern "C" {

const char* icrdn_last_error(void) { return g_last_error.c_str(); }

const char* icrdn_status_name(icrdn_status status) {
    switch (status) {
        case ICRDN_OK: return "ok";
        case ICRDN_ERR_CONFIG: return "configuration error";
        case ICRDN_ERR_VALIDATION: return "validation error";
        case ICRDN_ERR_DEPENDENCY: return "dependency error";
        case ICRDN_ERR_TRAINING: return "training error";
        case ICRDN_ERR_IO: return "io error";
        case ICRDN_ERR_INTERNAL: return "internal error";
    }
    return "unknown status";
}

icrdn_status icrdn_config_load(const char* path, icrdn_config** out) {
    return guarded([&] {
        require_ptr(path, "path");
        require_ptr(out, "out");
        *out = new icrdn_config{icrdn::load_config(path)};
    });
}

icrdn_status icrdn_config_parse(const char* text, icrdn_config** out) {
    return guarded([&] {
        require_ptr(text, "text");
        require_ptr(out, "out");
        *out = new icrdn_config{icrdn::parse_config(text)};
    });
}

icrdn_status icrdn_config_preset(const char* name, icrdn_config** out) {
    return guarded([&] {
        require_ptr(name, "name");
        require_ptr(out, "out");
        *out = new icrdn_config{icrdn::preset_config(name)};
    });
}

void icrdn_config_free(icrdn_config* config) { delete config; }

icrdn_status icrdn_config_set(icrdn_config* config, const char* key, const char* value) {
    return guarded([&] {
        require_ptr(config, "config");
        require_ptr(key, "key");
        require_ptr(value, "value");
        auto updated = config->value;
        icrdn::set_config_value(updated, key, value);
        icrdn::validate(updated);
        config->value = updated;
    });
}

icrdn_status icrdn_config_hash(const icrdn_config* config, char* buffer, size_t size) {
    return guarded([&] {
        require_ptr(config, "config");
        require_ptr(buffer, "buffer");
        const auto hash = icrdn::config_hash(config->value);
        icrdn::require(size > hash.size(), "hash buffer too small");
        std::memcpy(buffer, hash.c_str(), hash.size() + 1);
    });
}

icrdn_status icrdn_config_serialize(const icrdn_config* config, char** out) {
    return guarded([&] {
        require_ptr(config, "config");
        require_ptr(out, "out");
        *out = copy_string(icrdn::serialize(config->value));
    });
}

icrdn_status icrdn_parse_stage(const char* name, icrdn_stage* out) {
    return guarded([&] {
        require_ptr(name, "name");
        require_ptr(out, "out");
        *out = static_cast<icrdn_stage>(icrdn::parse_stage(name));
    });
}

icrdn_status icrdn_run_stage(const icrdn_config* config, icrdn_stage stage, int resume, const char* runs_dir,
                             int verbose, char** report_json) {
    return guarded([&] {
        require_ptr(config, "config");
        icrdn::require(stage >= ICRDN_STAGE_DATA && stage <= ICRDN_STAGE_ALL, "stage out of range");
        icrdn::RunOptions options;
        if (runs_dir != nullptr) {
            options.runs_root = runs_dir;
        }
        options.resume = resume != 0;
        options.verbose = verbose != 0;
        const auto report = icrdn::run_stage(config->value, static_cast<icrdn::Stage>(stage), options);
        if (report_json != nullptr) {
            *report_json = copy_string(icrdn::report_json(report));
        }
    });
}

icrdn_status icrdn_report(const char* runs_dir, const char* hash, char** metrics_json) {
    return guarded([&] {
        require_ptr(hash, "hash");
        require_ptr(metrics_json, "metrics_json");
        const std::filesystem::path root = runs_dir != nullptr ? runs_dir : "runs";
        const auto dir = root / hash;
        if (!std::filesystem::is_directory(dir)) {
            throw icrdn::IoError("no run directory " + dir.string());
        }
        *metrics_json = copy_string(icrdn::merged_metrics_json(dir));
    });
}

void icrdn_string_free(char* text) { delete[] text; }

icrdn_status icrdn_noise_schedule(int steps, double beta_start, double beta_end, double* alpha_bar) {
    return guarded([&] {
        require_ptr(alpha_bar, "alpha_bar");
        const auto schedule = icrdn::make_noise_schedule(steps, beta_start, beta_end);
        std::copy(schedule.alpha_bar.begin(), schedule.alpha_bar.end(), alpha_bar);
    });
}

icrdn_status icrdn_triplet_loss(const double* anchor, const double* positive, const double* negative, size_t n,
                                size_t d, double margin, double* out) {
    return guarded([&] {
        require_ptr(anchor, "anchor");
        require_ptr(positive, "positive");
        require_ptr(negative, "negative");
        require_ptr(out, "out");
        icrdn::require(n >= 1 && d >= 1, "triplet_loss: empty input");
        const auto rows = static_cast<std::int64_t>(n);
        const auto cols = static_cast<std::int64_t>(d);
        *out = icrdn::triplet_loss(from_buffer(anchor, rows, cols), from_buffer(positive, rows, cols),
                                   from_buffer(negative, rows, cols), margin)
                   .item<double>();
    });
}

icrdn_status icrdn_cross_entropy(const double* probs, int label, double* out) {
    return guarded([&] {
        require_ptr(probs, "probs");
        require_ptr(out, "out");
        const auto prediction = icrdn::make_prediction(from_buffer(probs, 1, icrdn::kNumGrades).squeeze(0));
        *out = icrdn::cross_entropy(prediction, label);
    });
}

icrdn_status icrdn_inception_score(const double* probs, size_t n, size_t k, int splits, double* out) {
    return guarded([&] {
        require_ptr(probs, "probs");
        require_ptr(out, "out");
        icrdn::require(n >= 1 && k >= 1, "inception_score: empty input");
        *out = icrdn::inception_score(
            from_buffer(probs, static_cast<std::int64_t>(n), static_cast<std::int64_t>(k)), splits);
    });
}

icrdn_status icrdn_identity_consistency(const double* baselines, const double* generated, size_t n, size_t d,
                                        double* out) {
    return guarded([&] {
        require_ptr(baselines, "baselines");
        require_ptr(generated, "generated");
        require_ptr(out, "out");
        icrdn::require(n >= 1 && d >= 1, "identity_consistency: empty input");
        const auto rows = static_cast<std::int64_t>(n);
        const auto cols = static_cast<std::int64_t>(d);
        *out = icrdn::identity_consistency(from_buffer(baselines, rows, cols), from_buffer(generated, rows, cols));
    });
}

}  // extern "C"
