#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace icrdn {

/// Feature extractors available to the two-stream classifier. `SmallCnn` is the
/// desk-scale stand-in; the others reproduce the architectures of the
/// full-scale comparison (randomly initialised, no pretrained weights).
enum class Backbone { SmallCnn, Vgg16, Vgg19, ResNet18, ResNet50, DenseNet121 };

/// Identity-prior encoder architecture.
enum class IdentityBackbone { SmallResNet, ResNet18 };

auto to_string(Backbone b) -> std::string;
auto parse_backbone(std::string_view name) -> Backbone;
auto to_string(IdentityBackbone b) -> std::string;
auto parse_identity_backbone(std::string_view name) -> IdentityBackbone;

/// Every tunable of an experiment. Defaults are the desk-scale preset; the
/// `full` preset switches to the full training scale.
struct ExperimentConfig {
    std::string preset = "desk";
    std::uint64_t rng_seed = 0;
    int num_threads = 1;

    // synthetic data
    int image_size = 64;
    int channels = 1;
    int n_subjects = 200;
    double progression_rate = 0.0615;
    std::array<double, 3> split_ratios{0.7, 0.1, 0.2};
    double augment_jitter = 0.1;

    // identity prior
    int identity_dim = 128;
    double margin = 1.0;
    int triplet_count_train = 7000;
    int triplet_count_eval = 1000;
    double identity_lr = 0.01;
    int identity_batch = 128;
    int identity_epochs = 10;
    IdentityBackbone identity_backbone = IdentityBackbone::SmallResNet;
    bool identity_finetune = false;
    bool same_subject_negatives = false;

    // latent codec
    int codec_downsample = 4;
    int latent_channels = 4;
    int codebook_size = 256;
    double commitment_beta = 0.25;
    int codec_width = 16;
    double codec_lr = 2e-3;
    int codec_batch = 16;
    int codec_epochs = 15;

    // diffusion
    int diffusion_steps = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int unet_base_width = 32;
    int unet_levels = 3;
    int attention_dim = 64;
    double diffusion_lr = 1e-3;
    int diffusion_batch = 32;
    int diffusion_epochs = 150;
    int sample_batch = 32;
    bool train_ablation = true;

    // progression classifier
    Backbone backbone_name = Backbone::SmallCnn;
    std::vector<Backbone> backbone_matrix{Backbone::SmallCnn};
    int feature_dim = 128;
    int head_hidden = 128;
    double dropout = 0.5;
    double classifier_lr = 5e-3;
    double classifier_momentum = 0.9;
    int classifier_batch = 16;
    int classifier_epochs = 30;
    double lr_decay_factor = 5e-3;
    int lr_decay_every = 5;
    bool share_branch_weights = false;

    // evaluation
    int is_splits = 1;
    int is_classifier_epochs = 15;
    double tsne_perplexity = 30.0;
    int tsne_iterations = 1000;

    /// Total spatial reduction between image and latent grid.
    [[nodiscard]] auto latent_size() const -> int { return image_size / codec_downsample; }
};

/// Defaults of a named preset ("desk" or "full").
auto preset_config(std::string_view name) -> ExperimentConfig;

/// Throws ValidationError naming the first violated constraint.
void validate(const ExperimentConfig& config);

/// Parses the flat `key = value` format. `#` starts a comment. A `preset`
/// key, wherever it appears, selects the base defaults the other keys
/// override. Unknown keys and malformed values raise ConfigError naming the
/// key; the result is validated before it is returned.
auto parse_config(std::string_view text) -> ExperimentConfig;
auto load_config(const std::filesystem::path& path) -> ExperimentConfig;

/// Canonical serialisation: one `key = value` line per field, keys sorted,
/// reals printed round-trip exact. parse_config(serialize(c)) == c.
auto serialize(const ExperimentConfig& config) -> std::string;

/// Stable hex digest (SHA-256 prefix) of the canonical serialisation.
auto config_hash(const ExperimentConfig& config) -> std::string;

/// Updates one field from its textual form, with the same rules as the file
/// parser.
void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value);

auto config_keys() -> std::vector<std::string>;

}  // namespace icrdn
