#include "icrdn/synthetic_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

#include "icrdn/errors.hpp"
#include "icrdn/random.hpp"

namespace icrdn {

namespace {

constexpr std::array<double, kNumGrades> kGapFraction{0.20, 0.155, 0.115, 0.08, 0.05};
constexpr std::array<double, kNumGrades> kBaselineGradeWeights{0.39, 0.18, 0.25, 0.13, 0.05};
constexpr int kTextureWaves = 6;

constexpr double kBackground = 0.08;
constexpr double kBoneLevel = 0.62;
constexpr double kTextureAmplitude = 0.05;

auto smoothstep(const torch::Tensor& x) -> torch::Tensor {
    auto c = x.clamp(0.0, 1.0);
    return c * c * (3.0 - 2.0 * c);
}

// Soft inside-indicator of `signed_distance` < 0, ramped over `width`.
auto soft_inside(const torch::Tensor& signed_distance, double width) -> torch::Tensor {
    return smoothstep(0.5 - signed_distance / width);
}

auto uniform(std::mt19937_64& rng, double lo, double hi) -> double {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

auto to_string(Side side) -> std::string { return side == Side::Left ? "left" : "right"; }
auto to_string(Visit visit) -> std::string { return visit == Visit::V00m ? "v00m" : "v12m"; }

auto to_string(SplitName split) -> std::string {
    switch (split) {
        case SplitName::Train: return "train";
        case SplitName::Val: return "val";
        case SplitName::Test: return "test";
    }
    return "unknown";
}

auto JointKey::str() const -> std::string { return std::to_string(subject_id) + "_" + to_string(side); }

auto make_identity(std::uint64_t dataset_seed, int subject_id, Side side) -> IdentityParams {
    // Subject-level anatomy is shared by both knees; side-level detail differs.
    std::mt19937_64 subject_rng(derive_seed(dataset_seed, {0x5b, static_cast<std::uint64_t>(subject_id)}));
    const double subject_width = uniform(subject_rng, 0.56, 0.76);
    const double subject_gap = uniform(subject_rng, 0.9, 1.1);

    const auto side_tag = static_cast<std::uint64_t>(side == Side::Left ? 0 : 1);
    std::mt19937_64 rng(derive_seed(dataset_seed, {0x51de, static_cast<std::uint64_t>(subject_id), side_tag}));

    IdentityParams p;
    p.subject_id = subject_id;
    p.side = side;
    p.bone_width = std::clamp(subject_width + uniform(rng, -0.02, 0.02), 0.5, 0.8);
    p.gap_scale = std::clamp(subject_gap + uniform(rng, -0.02, 0.02), 0.88, 1.12);
    p.edge_curvature = uniform(rng, 0.2, 0.9);
    // Injective in (subject, side) for a fixed dataset seed.
    p.texture_seed = mix64(dataset_seed) + 2 * static_cast<std::uint64_t>(subject_id) + side_tag;
    p.trabecular_frequency = uniform(rng, 3.0, 7.0);
    for (int i = 0; i < 3; ++i) {
        p.landmark_offsets[2 * i] = uniform(rng, -0.8, 0.8);  // fraction of bone half-width
        p.landmark_offsets[2 * i + 1] = uniform(rng, 0.06, 0.3);  // distance from the joint line
    }
    return p;
}

auto joint_space_width(const IdentityParams& identity, int severity) -> double {
    require(severity >= 0 && severity < kNumGrades, "severity must be a KL grade in 0..4");
    return kGapFraction[static_cast<std::size_t>(severity)] * identity.gap_scale;
}

auto render_knee(const IdentityParams& identity, int severity, int size, const RenderOptions& options) -> Image {
    const int channels = options.channels;
    const double sclerosis = options.sclerosis;
    require(size >= kMinRenderSize, "render_knee: size must be at least " + std::to_string(kMinRenderSize));
    require(channels == 1 || channels == 3, "render_knee: channels must be 1 or 3");
    require(sclerosis >= 0.0 && sclerosis <= 1.0, "render_knee: sclerosis must lie in [0, 1]");
    const double gap = joint_space_width(identity, severity);

    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    const auto coords = (torch::arange(size, opts) + 0.5) / static_cast<double>(size);
    auto grids = torch::meshgrid({coords, coords}, "ij");
    const auto v = grids[0] - options.shift_y;  // rows, top to bottom
    auto u = grids[1] - options.shift_x;        // columns
    if (identity.side == Side::Left) {
        u = 1.0 - u;  // left knees are mirror images
    }
    const double px = 1.0 / size;
    const double centre = 0.5;
    const auto du = u - centre;

    // Condyles: femur edge bulges down away from the centre line, tibial
    // plateau is slightly concave.
    const auto femur_edge = centre - gap / 2.0 - identity.edge_curvature * 0.25 * du.pow(2);
    const auto tibia_edge = centre + gap / 2.0 + identity.edge_curvature * 0.12 * du.pow(2);
    const double half_width = identity.bone_width / 2.0;
    // Shafts taper away from the joint.
    const auto taper = 0.62 + 0.38 * smoothstep(1.0 - (v - centre).abs() / 0.45);
    const auto lateral = du.abs() - half_width * taper;

    const auto femur = soft_inside(v - femur_edge, px) * soft_inside(lateral, px);
    const auto tibia = soft_inside(tibia_edge - v, px) * soft_inside(lateral, px);
    auto bone = torch::max(femur, tibia);

    // Band-limited trabecular texture, fixed by the identity's texture seed.
    std::mt19937_64 tex_rng(mix64(identity.texture_seed));
    auto texture = torch::zeros_like(u);
    for (int k = 0; k < kTextureWaves; ++k) {
        const double theta = uniform(tex_rng, 0.0, std::numbers::pi);
        const double phase = uniform(tex_rng, 0.0, 2.0 * std::numbers::pi);
        const double freq = identity.trabecular_frequency * uniform(tex_rng, 0.8, 1.25);
        texture += torch::cos(2.0 * std::numbers::pi * freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
    }
    texture /= std::sqrt(static_cast<double>(kTextureWaves));

    // Cortical rim: brighter shell just inside the joint surfaces.
    const auto rim_femur = torch::exp(-((femur_edge - v) / 0.025).pow(2)) * femur;
    const auto rim_tibia = torch::exp(-((v - tibia_edge) / 0.025).pow(2)) * tibia;
    auto intensity = kBoneLevel + kTextureAmplitude * texture + 0.1 * (rim_femur + rim_tibia);

    // Subchondral sclerosis band.
    if (sclerosis > 0.0) {
        const auto band_f = torch::exp(-((femur_edge - v - 0.05) / 0.04).pow(2)) * femur;
        const auto band_t = torch::exp(-((v - tibia_edge - 0.05) / 0.04).pow(2)) * tibia;
        intensity = intensity + 0.14 * sclerosis * (band_f + band_t);
    }

    // Landmarks: three persistent blobs, alternating bright and dark.
    for (int i = 0; i < 3; ++i) {
        const double lu = centre + identity.landmark_offsets[2 * i] * half_width * 0.8;
        const double offset = identity.landmark_offsets[2 * i + 1];
        const double lv = i % 2 == 0 ? centre - gap / 2.0 - offset : centre + gap / 2.0 + offset;
        const double amplitude = i % 2 == 0 ? 0.16 : -0.12;
        const double radius = 0.03 + 0.01 * i;
        intensity = intensity + amplitude * torch::exp(-((u - lu).pow(2) + (v - lv).pow(2)) / (radius * radius));
    }

    auto image = kBackground + 0.04 * smoothstep(1.0 - du.abs() / 0.5) + bone * (intensity - kBackground);

    // Osteophytes: bony spurs growing out of the joint margins from grade 3.
    if (severity >= 3) {
        const double length = 0.035 * (severity - 2);
        for (double sign : {-1.0, 1.0}) {
            const double mu = centre + sign * (half_width + 0.2 * length);
            for (double mv : {centre - gap / 2.0 - 0.02, centre + gap / 2.0 + 0.02}) {
                const auto blob = torch::exp(-(((u - mu) / length).pow(2) + ((v - mv) / 0.025).pow(2)));
                image = torch::max(image, kBackground + blob * (kBoneLevel + 0.08 - kBackground));
            }
        }
    }

    image = image.clamp(0.0, 1.0).to(torch::kFloat32).unsqueeze(0);
    if (channels == 3) {
        image = image.repeat({3, 1, 1});
    }
    return image.contiguous();
}

auto sample_acquisition(std::uint64_t seed) -> Acquisition {
    std::mt19937_64 rng(seed);
    Acquisition a;
    a.gain = uniform(rng, 0.75, 1.25);
    a.offset = uniform(rng, -0.06, 0.06);
    a.gamma = std::exp(uniform(rng, -0.25, 0.25));
    a.shift_x = uniform(rng, -0.04, 0.04);
    a.shift_y = uniform(rng, -0.04, 0.04);
    a.noise_std = 0.01;
    a.noise_seed = rng();
    return a;
}

auto acquire_knee(const IdentityParams& identity, int severity, int size, int channels, double sclerosis,
                  const Acquisition& acquisition) -> Image {
    RenderOptions options;
    options.channels = channels;
    options.sclerosis = sclerosis;
    options.shift_x = acquisition.shift_x;
    options.shift_y = acquisition.shift_y;
    auto image = render_knee(identity, severity, size, options);
    image = (image.pow(acquisition.gamma) * acquisition.gain + acquisition.offset);
    if (acquisition.noise_std > 0.0) {
        auto gen = make_generator(acquisition.noise_seed);
        image = image + torch::randn(image.sizes(), gen) * acquisition.noise_std;
    }
    return image.clamp(0.0, 1.0).contiguous();
}

auto generate_dataset(int n_subjects, double progression_rate, std::uint64_t seed, int size, int channels)
    -> std::vector<JointRecord> {
    require(progression_rate >= 0.0 && progression_rate <= 1.0, "progression_rate must lie in [0, 1]");
    require(n_subjects >= 0, "n_subjects must be nonnegative");
    std::vector<JointRecord> records;
    records.reserve(static_cast<std::size_t>(2 * n_subjects));
    for (int subject = 0; subject < n_subjects; ++subject) {
        for (auto side : {Side::Left, Side::Right}) {
            const auto side_tag = static_cast<std::uint64_t>(side == Side::Left ? 0 : 1);
            std::mt19937_64 rng(derive_seed(seed, {0x9a7e, static_cast<std::uint64_t>(subject), side_tag}));
            const bool progresses = std::bernoulli_distribution(progression_rate)(rng);
            int baseline = 0;
            if (progresses) {
                // Grade 4 cannot progress further.
                std::discrete_distribution<int> grades(kBaselineGradeWeights.begin(), kBaselineGradeWeights.end() - 1);
                baseline = grades(rng);
            } else {
                std::discrete_distribution<int> grades(kBaselineGradeWeights.begin(), kBaselineGradeWeights.end());
                baseline = grades(rng);
            }
            int followup = baseline;
            if (progresses) {
                const int step = (baseline <= 2 && std::bernoulli_distribution(0.15)(rng)) ? 2 : 1;
                followup = std::min(baseline + step, kNumGrades - 1);
            }

            JointRecord record;
            record.identity = make_identity(seed, subject, side);
            record.kl_v00m = baseline;
            record.kl_v12m = followup;
            const double sclerosis = progresses ? 1.0 : 0.0;
            for (auto visit : {Visit::V00m, Visit::V12m}) {
                const int grade = visit == Visit::V00m ? baseline : followup;
                const auto acquisition = sample_acquisition(derive_seed(
                    seed, {0xacc, static_cast<std::uint64_t>(subject), side_tag,
                           static_cast<std::uint64_t>(visit == Visit::V00m ? 0 : 1)}));
                (visit == Visit::V00m ? record.image_v00m : record.image_v12m) =
                    acquire_knee(record.identity, grade, size, channels, sclerosis, acquisition);
            }
            records.push_back(std::move(record));
        }
    }
    return records;
}

auto DatasetSplit::part(SplitName name) const -> const std::vector<JointRecord>& {
    switch (name) {
        case SplitName::Train: return train;
        case SplitName::Val: return val;
        case SplitName::Test: return test;
    }
    return train;
}

auto DatasetSplit::part(SplitName name) -> std::vector<JointRecord>& {
    return const_cast<std::vector<JointRecord>&>(std::as_const(*this).part(name));
}

auto split_by_subject(const std::vector<JointRecord>& records, const std::array<double, 3>& ratios,
                      std::uint64_t seed) -> DatasetSplit {
    const double sum = ratios[0] + ratios[1] + ratios[2];
    require(std::abs(sum - 1.0) <= 1e-9, "split ratios must sum to 1");
    require(ratios[0] >= 0.0 && ratios[1] >= 0.0 && ratios[2] >= 0.0, "split ratios must be nonnegative");

    std::set<int> unique;
    for (const auto& r : records) {
        unique.insert(r.identity.subject_id);
    }
    std::vector<int> subjects(unique.begin(), unique.end());
    const int n = static_cast<int>(subjects.size());
    const int nonempty = static_cast<int>(std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0; }));
    require(n >= nonempty, "split_by_subject: " + std::to_string(n) + " subjects cannot fill " +
                               std::to_string(nonempty) + " splits");

    auto share = [n](double ratio) {
        if (ratio <= 0.0) {
            return 0;
        }
        return std::max(1, static_cast<int>(std::floor(n * ratio + 1e-9)));
    };
    const int n_val = share(ratios[1]);
    const int n_test = share(ratios[2]);
    const int n_train = n - n_val - n_test;
    require(ratios[0] <= 0.0 || n_train >= 1, "split_by_subject: too few subjects for a nonempty train split");

    std::mt19937_64 rng(derive_seed(seed, {0x5b117}));
    std::shuffle(subjects.begin(), subjects.end(), rng);

    DatasetSplit split;
    for (int i = 0; i < n; ++i) {
        const auto name = i < n_train ? SplitName::Train : (i < n_train + n_val ? SplitName::Val : SplitName::Test);
        split.manifest[subjects[static_cast<std::size_t>(i)]] = name;
    }
    for (const auto& r : records) {
        split.part(split.manifest.at(r.identity.subject_id)).push_back(r);
    }
    return split;
}

auto augment(const Image& image, double brightness, double contrast, double saturation, std::uint64_t seed)
    -> Image {
    require(brightness > 0.0 && contrast > 0.0 && saturation > 0.0, "augment: factors must be positive");
    require(image.dim() == 3, "augment: expected a (C, H, W) image");
    std::array<int, 3> order{0, 1, 2};
    std::mt19937_64 rng(mix64(seed));
    std::shuffle(order.begin(), order.end(), rng);

    auto luminance = [](const Image& img) {
        if (img.size(0) == 3) {
            return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).unsqueeze(0);
        }
        return img;
    };

    auto out = image;
    for (int op : order) {
        if (op == 0 && brightness != 1.0) {
            out = (out * brightness).clamp(0.0, 1.0);
        } else if (op == 1 && contrast != 1.0) {
            const auto mean = luminance(out).mean();
            out = (contrast * out + (1.0 - contrast) * mean).clamp(0.0, 1.0);
        } else if (op == 2 && saturation != 1.0) {
            out = (saturation * out + (1.0 - saturation) * luminance(out)).clamp(0.0, 1.0);
        }
    }
    return out;
}

auto random_augment(const Image& image, double jitter, std::uint64_t seed) -> Image {
    if (jitter <= 0.0) {
        return image;
    }
    std::mt19937_64 rng(seed);
    const double b = uniform(rng, 1.0 - jitter, 1.0 + jitter);
    const double c = uniform(rng, 1.0 - jitter, 1.0 + jitter);
    const double s = uniform(rng, 1.0 - jitter, 1.0 + jitter);
    return augment(image, b, c, s, rng());
}

namespace {

auto image_path(const std::filesystem::path& root, SplitName split, const JointKey& key, Visit visit)
    -> std::filesystem::path {
    return root / to_string(split) / (key.str() + "_" + to_string(visit) + ".png");
}

auto parse_side(const std::string& s) -> Side {
    if (s == "left") {
        return Side::Left;
    }
    if (s == "right") {
        return Side::Right;
    }
    throw ValidationError("unknown side '" + s + "'");
}

auto parse_split(const std::string& s) -> SplitName {
    for (auto name : {SplitName::Train, SplitName::Val, SplitName::Test}) {
        if (to_string(name) == s) {
            return name;
        }
    }
    throw ValidationError("unknown split '" + s + "'");
}

auto identity_to_json(const IdentityParams& p) -> nlohmann::json {
    return {{"bone_width", p.bone_width},
            {"edge_curvature", p.edge_curvature},
            {"gap_scale", p.gap_scale},
            {"texture_seed", p.texture_seed},
            {"trabecular_frequency", p.trabecular_frequency},
            {"landmark_offsets", p.landmark_offsets}};
}

void validate_record(const JointRecord& r) {
    const auto name = r.key().str();
    require(r.kl_v00m >= 0 && r.kl_v00m < kNumGrades && r.kl_v12m >= 0 && r.kl_v12m < kNumGrades,
            "record " + name + ": KL grades must lie in 0..4");
    require(r.kl_v12m >= r.kl_v00m, "record " + name + ": kl_v12m must not be below kl_v00m");
    require(r.image_v00m.sizes() == r.image_v12m.sizes(), "record " + name + ": visit images differ in shape");
}

}  // namespace

void save_dataset(const DatasetSplit& split, const std::filesystem::path& root) {
    std::filesystem::create_directories(root);
    nlohmann::json records = nlohmann::json::array();
    std::ofstream csv(root / "grades.csv");
    csv << "subject_id,side,split,kl_v00m,kl_v12m\n";
    int size = 0;
    int channels = 0;
    for (auto name : {SplitName::Train, SplitName::Val, SplitName::Test}) {
        for (const auto& r : split.part(name)) {
            write_png(image_path(root, name, r.key(), Visit::V00m), r.image_v00m);
            write_png(image_path(root, name, r.key(), Visit::V12m), r.image_v12m);
            size = static_cast<int>(r.image_v00m.size(1));
            channels = static_cast<int>(r.image_v00m.size(0));
            records.push_back({{"subject_id", r.identity.subject_id},
                               {"side", to_string(r.identity.side)},
                               {"split", to_string(name)},
                               {"kl_v00m", r.kl_v00m},
                               {"kl_v12m", r.kl_v12m},
                               {"identity", identity_to_json(r.identity)}});
            csv << r.identity.subject_id << ',' << to_string(r.identity.side) << ',' << to_string(name) << ','
                << r.kl_v00m << ',' << r.kl_v12m << '\n';
        }
    }
    nlohmann::json split_map = nlohmann::json::object();
    for (const auto& [subject, name] : split.manifest) {
        split_map[std::to_string(subject)] = to_string(name);
    }
    nlohmann::json manifest = {
        {"image_size", size}, {"channels", channels}, {"records", records}, {"split_map", split_map}};
    std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
}

auto load_dataset(const std::filesystem::path& root, int channels, bool with_identity) -> DatasetSplit {
    struct Row {
        int subject_id;
        Side side;
        SplitName split;
        int kl_v00m;
        int kl_v12m;
        nlohmann::json identity;
    };
    std::vector<Row> rows;
    if (std::filesystem::exists(root / "manifest.json")) {
        std::ifstream in(root / "manifest.json");
        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("cannot parse " + (root / "manifest.json").string() + ": " + e.what());
        }
        for (const auto& r : manifest.at("records")) {
            rows.push_back({r.at("subject_id").get<int>(), parse_side(r.at("side").get<std::string>()),
                            parse_split(r.at("split").get<std::string>()), r.at("kl_v00m").get<int>(),
                            r.at("kl_v12m").get<int>(), r.value("identity", nlohmann::json::object())});
        }
    } else if (std::filesystem::exists(root / "grades.csv")) {
        std::ifstream in(root / "grades.csv");
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            std::stringstream ss(line);
            std::array<std::string, 5> cells;
            for (auto& cell : cells) {
                std::getline(ss, cell, ',');
            }
            try {
                rows.push_back({std::stoi(cells[0]), parse_side(cells[1]), parse_split(cells[2]),
                                std::stoi(cells[3]), std::stoi(cells[4]), nlohmann::json::object()});
            } catch (const std::logic_error&) {
                throw ValidationError("grades.csv: malformed row '" + line + "'");
            }
        }
    } else {
        throw DependencyError("dataset directory " + root.string() + " has neither manifest.json nor grades.csv");
    }

    DatasetSplit split;
    for (const auto& row : rows) {
        const auto existing = split.manifest.find(row.subject_id);
        require(existing == split.manifest.end() || existing->second == row.split,
                "subject " + std::to_string(row.subject_id) + " appears in more than one split");
        split.manifest[row.subject_id] = row.split;

        JointRecord r;
        r.identity.subject_id = row.subject_id;
        r.identity.side = row.side;
        if (with_identity && !row.identity.empty()) {
            r.identity.bone_width = row.identity.at("bone_width").get<double>();
            r.identity.edge_curvature = row.identity.at("edge_curvature").get<double>();
            r.identity.gap_scale = row.identity.at("gap_scale").get<double>();
            r.identity.texture_seed = row.identity.at("texture_seed").get<std::uint64_t>();
            r.identity.trabecular_frequency = row.identity.at("trabecular_frequency").get<double>();
            r.identity.landmark_offsets = row.identity.at("landmark_offsets").get<std::array<double, 6>>();
        }
        r.kl_v00m = row.kl_v00m;
        r.kl_v12m = row.kl_v12m;
        const auto p00 = image_path(root, row.split, r.key(), Visit::V00m);
        const auto p12 = image_path(root, row.split, r.key(), Visit::V12m);
        if (!std::filesystem::exists(p00) || !std::filesystem::exists(p12)) {
            throw DependencyError("missing image pair for joint " + r.key().str() + " under " + root.string());
        }
        r.image_v00m = read_png(p00, channels);
        r.image_v12m = read_png(p12, channels);
        validate_record(r);
        split.part(row.split).push_back(std::move(r));
    }
    return split;
}

}  // namespace icrdn
