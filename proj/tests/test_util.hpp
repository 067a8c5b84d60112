#pragma once

#include <filesystem>
#include <string>

#include "icrdn/config.hpp"
#include "icrdn/synthetic_data.hpp"

namespace testutil {

// Small, fast configuration for unit tests.
inline auto tiny_config() -> icrdn::ExperimentConfig {
    auto c = icrdn::preset_config("desk");
    c.image_size = 32;
    c.n_subjects = 12;
    c.progression_rate = 0.4;
    c.identity_dim = 8;
    c.triplet_count_train = 32;
    c.triplet_count_eval = 16;
    c.identity_batch = 8;
    c.identity_epochs = 1;
    c.codebook_size = 16;
    c.codec_width = 8;
    c.codec_epochs = 1;
    c.codec_batch = 8;
    c.diffusion_steps = 8;
    c.unet_base_width = 8;
    c.attention_dim = 8;
    c.diffusion_batch = 8;
    c.diffusion_epochs = 1;
    c.sample_batch = 8;
    c.feature_dim = 8;
    c.head_hidden = 8;
    c.classifier_epochs = 1;
    c.is_classifier_epochs = 1;
    c.tsne_iterations = 100;
    icrdn::validate(c);
    return c;
}

inline auto tiny_splits(const icrdn::ExperimentConfig& c) -> icrdn::DatasetSplit {
    return icrdn::split_by_subject(icrdn::generate_dataset(c.n_subjects, c.progression_rate, 77, c.image_size),
                                   c.split_ratios, 5);
}

// Fresh directory under the system temp path, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(std::filesystem::temp_directory_path() / ("icrdn_" + name)) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    auto operator=(const TempDir&) -> TempDir& = delete;
    [[nodiscard]] auto path() const -> const std::filesystem::path& { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
