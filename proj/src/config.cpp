#include "icrdn/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "icrdn/errors.hpp"

namespace icrdn {

namespace {

auto trim(std::string_view s) -> std::string_view {
    const auto* ws = " \t\r\n";
    const auto begin = s.find_first_not_of(ws);
    if (begin == std::string_view::npos) {
        return {};
    }
    const auto end = s.find_last_not_of(ws);
    return s.substr(begin, end - begin + 1);
}

auto split_list(std::string_view s) -> std::vector<std::string_view> {
    std::vector<std::string_view> out;
    while (true) {
        const auto comma = s.find(',');
        out.push_back(trim(s.substr(0, comma)));
        if (comma == std::string_view::npos) {
            break;
        }
        s.remove_prefix(comma + 1);
    }
    return out;
}

auto format_real(double v) -> std::string {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return {buf.data(), end};
}

template <typename T>
auto parse_number(std::string_view key, std::string_view text) -> T {
    T value{};
    const auto* first = text.data();
    const auto* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last || text.empty()) {
        throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(text) + "'");
    }
    return value;
}

auto parse_bool(std::string_view key, std::string_view text) -> bool {
    if (text == "true" || text == "1" || text == "yes") {
        return true;
    }
    if (text == "false" || text == "0" || text == "no") {
        return false;
    }
    throw ConfigError("config key '" + std::string(key) + "': expected a boolean, got '" + std::string(text) + "'");
}

struct Field {
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, std::string_view key, std::string_view)> set;
};

template <typename T>
auto int_field(T ExperimentConfig::*member) -> Field {
    return {[member](const ExperimentConfig& c) { return std::to_string(c.*member); },
            [member](ExperimentConfig& c, std::string_view k, std::string_view v) { c.*member = parse_number<T>(k, v); }};
}

auto real_field(double ExperimentConfig::*member) -> Field {
    return {[member](const ExperimentConfig& c) { return format_real(c.*member); },
            [member](ExperimentConfig& c, std::string_view k, std::string_view v) {
                c.*member = parse_number<double>(k, v);
            }};
}

auto bool_field(bool ExperimentConfig::*member) -> Field {
    return {[member](const ExperimentConfig& c) { return std::string(c.*member ? "true" : "false"); },
            [member](ExperimentConfig& c, std::string_view k, std::string_view v) { c.*member = parse_bool(k, v); }};
}

auto fields() -> const std::map<std::string, Field>& {
    using C = ExperimentConfig;
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        t["rng_seed"] = int_field(&C::rng_seed);
        t["num_threads"] = int_field(&C::num_threads);

        t["image_size"] = int_field(&C::image_size);
        t["channels"] = int_field(&C::channels);
        t["n_subjects"] = int_field(&C::n_subjects);
        t["progression_rate"] = real_field(&C::progression_rate);
        t["split_ratios"] = {
            [](const C& c) {
                return format_real(c.split_ratios[0]) + ", " + format_real(c.split_ratios[1]) + ", " +
                       format_real(c.split_ratios[2]);
            },
            [](C& c, std::string_view k, std::string_view v) {
                const auto parts = split_list(v);
                if (parts.size() != 3) {
                    throw ConfigError("config key '" + std::string(k) + "': expected three comma-separated fractions");
                }
                for (std::size_t i = 0; i < 3; ++i) {
                    c.split_ratios[i] = parse_number<double>(k, parts[i]);
                }
            }};
        t["augment_jitter"] = real_field(&C::augment_jitter);

        t["identity_dim"] = int_field(&C::identity_dim);
        t["margin"] = real_field(&C::margin);
        t["triplet_count_train"] = int_field(&C::triplet_count_train);
        t["triplet_count_eval"] = int_field(&C::triplet_count_eval);
        t["identity_lr"] = real_field(&C::identity_lr);
        t["identity_batch"] = int_field(&C::identity_batch);
        t["identity_epochs"] = int_field(&C::identity_epochs);
        t["identity_backbone"] = {
            [](const C& c) { return to_string(c.identity_backbone); },
            [](C& c, std::string_view, std::string_view v) { c.identity_backbone = parse_identity_backbone(v); }};
        t["identity_finetune"] = bool_field(&C::identity_finetune);
        t["same_subject_negatives"] = bool_field(&C::same_subject_negatives);

        t["codec_downsample"] = int_field(&C::codec_downsample);
        t["latent_channels"] = int_field(&C::latent_channels);
        t["codebook_size"] = int_field(&C::codebook_size);
        t["commitment_beta"] = real_field(&C::commitment_beta);
        t["codec_width"] = int_field(&C::codec_width);
        t["codec_lr"] = real_field(&C::codec_lr);
        t["codec_batch"] = int_field(&C::codec_batch);
        t["codec_epochs"] = int_field(&C::codec_epochs);

        t["diffusion_steps"] = int_field(&C::diffusion_steps);
        t["beta_start"] = real_field(&C::beta_start);
        t["beta_end"] = real_field(&C::beta_end);
        t["unet_base_width"] = int_field(&C::unet_base_width);
        t["unet_levels"] = int_field(&C::unet_levels);
        t["attention_dim"] = int_field(&C::attention_dim);
        t["diffusion_lr"] = real_field(&C::diffusion_lr);
        t["diffusion_batch"] = int_field(&C::diffusion_batch);
        t["diffusion_epochs"] = int_field(&C::diffusion_epochs);
        t["sample_batch"] = int_field(&C::sample_batch);
        t["train_ablation"] = bool_field(&C::train_ablation);

        t["backbone_name"] = {[](const C& c) { return to_string(c.backbone_name); },
                              [](C& c, std::string_view, std::string_view v) { c.backbone_name = parse_backbone(v); }};
        t["backbone_matrix"] = {
            [](const C& c) {
                std::string out;
                for (std::size_t i = 0; i < c.backbone_matrix.size(); ++i) {
                    out += (i ? ", " : "") + to_string(c.backbone_matrix[i]);
                }
                return out;
            },
            [](C& c, std::string_view, std::string_view v) {
                c.backbone_matrix.clear();
                for (auto part : split_list(v)) {
                    c.backbone_matrix.push_back(parse_backbone(part));
                }
            }};
        t["feature_dim"] = int_field(&C::feature_dim);
        t["head_hidden"] = int_field(&C::head_hidden);
        t["dropout"] = real_field(&C::dropout);
        t["classifier_lr"] = real_field(&C::classifier_lr);
        t["classifier_momentum"] = real_field(&C::classifier_momentum);
        t["classifier_batch"] = int_field(&C::classifier_batch);
        t["classifier_epochs"] = int_field(&C::classifier_epochs);
        t["lr_decay_factor"] = real_field(&C::lr_decay_factor);
        t["lr_decay_every"] = int_field(&C::lr_decay_every);
        t["share_branch_weights"] = bool_field(&C::share_branch_weights);

        t["is_splits"] = int_field(&C::is_splits);
        t["is_classifier_epochs"] = int_field(&C::is_classifier_epochs);
        t["tsne_perplexity"] = real_field(&C::tsne_perplexity);
        t["tsne_iterations"] = int_field(&C::tsne_iterations);
        return t;
    }();
    return table;
}

}  // namespace

auto to_string(Backbone b) -> std::string {
    switch (b) {
        case Backbone::SmallCnn: return "small_cnn";
        case Backbone::Vgg16: return "vgg16";
        case Backbone::Vgg19: return "vgg19";
        case Backbone::ResNet18: return "resnet18";
        case Backbone::ResNet50: return "resnet50";
        case Backbone::DenseNet121: return "densenet121";
    }
    return "unknown";
}

auto parse_backbone(std::string_view name) -> Backbone {
    for (auto b : {Backbone::SmallCnn, Backbone::Vgg16, Backbone::Vgg19, Backbone::ResNet18, Backbone::ResNet50,
                   Backbone::DenseNet121}) {
        if (to_string(b) == name) {
            return b;
        }
    }
    throw ConfigError("unknown backbone '" + std::string(name) + "'");
}

auto to_string(IdentityBackbone b) -> std::string {
    return b == IdentityBackbone::SmallResNet ? "small_resnet" : "resnet18";
}

auto parse_identity_backbone(std::string_view name) -> IdentityBackbone {
    if (name == "small_resnet") {
        return IdentityBackbone::SmallResNet;
    }
    if (name == "resnet18") {
        return IdentityBackbone::ResNet18;
    }
    throw ConfigError("unknown identity backbone '" + std::string(name) + "'");
}

auto preset_config(std::string_view name) -> ExperimentConfig {
    ExperimentConfig c;
    if (name == "desk") {
        return c;
    }
    if (name != "full") {
        throw ConfigError("config key 'preset': unknown preset '" + std::string(name) + "'");
    }
    c.preset = "full";
    c.image_size = 224;
    c.n_subjects = 4000;
    c.identity_backbone = IdentityBackbone::ResNet18;
    c.triplet_count_train = 7000;
    c.triplet_count_eval = 1000;
    c.identity_lr = 0.01;
    c.identity_batch = 128;
    c.identity_epochs = 50;
    c.codec_width = 128;
    c.codec_epochs = 100;
    c.diffusion_steps = 1000;
    c.unet_base_width = 128;
    c.attention_dim = 128;
    c.diffusion_lr = 1e-4;
    c.diffusion_batch = 64;
    c.sample_batch = 8;
    c.diffusion_epochs = 400;
    c.backbone_name = Backbone::Vgg16;
    c.backbone_matrix = {Backbone::Vgg16, Backbone::Vgg19, Backbone::ResNet18, Backbone::ResNet50,
                         Backbone::DenseNet121};
    c.classifier_epochs = 100;
    c.is_classifier_epochs = 50;
    return c;
}

void validate(const ExperimentConfig& c) {
    const double ratio_sum = c.split_ratios[0] + c.split_ratios[1] + c.split_ratios[2];
    require(std::abs(ratio_sum - 1.0) <= 1e-9, "split_ratios must sum to 1");
    for (double r : c.split_ratios) {
        require(r >= 0.0, "split_ratios must be nonnegative");
    }
    require(c.beta_start > 0.0, "0 < β_start (beta_start must be positive)");
    require(c.beta_start <= c.beta_end, "β_start ≤ β_end (beta_start must not exceed beta_end)");
    require(c.beta_end < 1.0, "β_end < 1 (beta_end must be below 1)");
    require(c.diffusion_steps >= 1, "T ≥ 1 (diffusion_steps)");
    require(c.identity_dim >= 1, "d ≥ 1 (identity_dim)");
    require(c.margin >= 0.0, "α ≥ 0 (margin)");
    require(c.channels >= 1, "channels ≥ 1");
    require(c.image_size >= 32, "image_size ≥ 32");
    require(c.codec_downsample >= 1 && (c.codec_downsample & (c.codec_downsample - 1)) == 0,
            "codec_downsample must be a power of two");
    require(c.image_size % c.codec_downsample == 0, "image_size divisible by codec_downsample");
    require(c.unet_levels >= 1, "unet_levels ≥ 1");
    require(c.latent_size() % (1 << (c.unet_levels - 1)) == 0,
            "latent size (image_size / codec_downsample) divisible by 2^(unet_levels-1)");
    require(c.latent_channels >= 1, "latent_channels ≥ 1");
    require(c.codebook_size >= 2, "codebook_size ≥ 2");
    require(c.commitment_beta >= 0.0, "commitment_beta ≥ 0");
    require(c.n_subjects >= 0, "n_subjects ≥ 0");
    require(c.progression_rate >= 0.0 && c.progression_rate <= 1.0, "0 ≤ progression_rate ≤ 1");
    require(c.augment_jitter >= 0.0 && c.augment_jitter < 1.0, "0 ≤ augment_jitter < 1");
    require(c.triplet_count_train >= 1 && c.triplet_count_eval >= 1, "triplet counts ≥ 1");
    for (int v : {c.identity_batch, c.codec_batch, c.diffusion_batch, c.classifier_batch, c.sample_batch}) {
        require(v >= 1, "batch sizes ≥ 1");
    }
    for (int v : {c.identity_epochs, c.codec_epochs, c.diffusion_epochs, c.classifier_epochs, c.is_classifier_epochs}) {
        require(v >= 0, "epoch counts ≥ 0");
    }
    for (double v : {c.identity_lr, c.codec_lr, c.diffusion_lr, c.classifier_lr}) {
        require(v > 0.0, "learning rates > 0");
    }
    require(c.unet_base_width >= 8 && c.unet_base_width % 8 == 0, "unet_base_width a positive multiple of 8");
    require(c.codec_width >= 8 && c.codec_width % 8 == 0, "codec_width a positive multiple of 8");
    require(c.attention_dim >= 1, "attention_dim ≥ 1");
    require(c.feature_dim >= 1 && c.head_hidden >= 1, "feature_dim, head_hidden ≥ 1");
    require(c.dropout >= 0.0 && c.dropout < 1.0, "0 ≤ dropout < 1");
    require(c.classifier_momentum >= 0.0 && c.classifier_momentum < 1.0, "0 ≤ classifier_momentum < 1");
    require(c.lr_decay_factor >= 0.0 && c.lr_decay_factor < 1.0, "0 ≤ lr_decay_factor < 1");
    require(c.lr_decay_every >= 1, "lr_decay_every ≥ 1");
    require(!c.backbone_matrix.empty(), "backbone_matrix nonempty");
    require(c.is_splits >= 1, "is_splits ≥ 1");
    require(c.tsne_perplexity > 0.0, "tsne_perplexity > 0");
    require(c.tsne_iterations >= 1, "tsne_iterations ≥ 1");
    require(c.num_threads >= 1, "num_threads ≥ 1");
}

void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value) {
    const auto& table = fields();
    const auto it = table.find(std::string(key));
    if (it == table.end()) {
        throw ConfigError("unknown config key '" + std::string(key) + "'");
    }
    it->second.set(config, key, trim(value));
}

auto parse_config(std::string_view text) -> ExperimentConfig {
    std::vector<std::pair<std::string, std::string>> entries;
    std::string preset = "desk";
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view view = line;
        if (const auto hash = view.find('#'); hash != std::string_view::npos) {
            view = view.substr(0, hash);
        }
        view = trim(view);
        if (view.empty()) {
            continue;
        }
        const auto eq = view.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                              std::string(view) + "'");
        }
        std::string key(trim(view.substr(0, eq)));
        std::string value(trim(view.substr(eq + 1)));
        if (key.empty()) {
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        }
        if (key == "preset") {
            preset = value;
        } else {
            entries.emplace_back(std::move(key), std::move(value));
        }
    }
    auto config = preset_config(preset);
    for (const auto& [key, value] : entries) {
        set_config_value(config, key, value);
    }
    validate(config);
    return config;
}

auto load_config(const std::filesystem::path& path) -> ExperimentConfig {
    std::ifstream file(path);
    if (!file) {
        throw ConfigError("cannot open config file '" + path.string() + "'");
    }
    std::stringstream buffer;
    buffer << file.rdbuf();
    return parse_config(buffer.str());
}

auto serialize(const ExperimentConfig& config) -> std::string {
    std::string out = "preset = " + config.preset + "\n";
    for (const auto& [key, field] : fields()) {
        out += key + " = " + field.get(config) + "\n";
    }
    return out;
}

auto config_hash(const ExperimentConfig& config) -> std::string {
    const auto text = serialize(config);
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int length = 0;
    if (EVP_Digest(text.data(), text.size(), digest.data(), &length, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorKind::Io, "SHA-256 digest failed");
    }
    std::ostringstream hex;
    for (unsigned int i = 0; i < 8; ++i) {
        hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return hex.str();
}

auto config_keys() -> std::vector<std::string> {
    std::vector<std::string> keys{"preset"};
    for (const auto& [key, field] : fields()) {
        keys.push_back(key);
    }
    return keys;
}

}  // namespace icrdn
