#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "icrdn/image.hpp"

namespace icrdn {

enum class Side { Left, Right };
enum class Visit { V00m, V12m };

inline constexpr int kNumGrades = 5;
inline constexpr int kMinRenderSize = 32;

auto to_string(Side side) -> std::string;
auto to_string(Visit visit) -> std::string;

/// Identifies one knee joint across visits.
struct JointKey {
    int subject_id = 0;
    Side side = Side::Left;

    auto operator<=>(const JointKey&) const = default;
    /// "<subject>_<side>", the file-name stem used on disk.
    [[nodiscard]] auto str() const -> std::string;
};

/// Anatomical signature of one joint; persists across visits.
struct IdentityParams {
    int subject_id = 0;
    Side side = Side::Left;
    double bone_width = 0.65;        // fraction of image width
    double edge_curvature = 0.5;     // condyle rounding
    double gap_scale = 1.0;          // per-joint joint-space scale
    std::uint64_t texture_seed = 0;  // unique per (subject, side) within a dataset
    double trabecular_frequency = 5.0;  // cycles per image
    std::array<double, 6> landmark_offsets{};  // three (u, v) protrusion centres

    [[nodiscard]] auto key() const -> JointKey { return {subject_id, side}; }
};

/// Deterministic identity of (subject, side) under a dataset seed.
auto make_identity(std::uint64_t dataset_seed, int subject_id, Side side) -> IdentityParams;

/// Joint-space width (fraction of image height) at a KL grade; strictly
/// decreasing in severity.
auto joint_space_width(const IdentityParams& identity, int severity) -> double;

struct RenderOptions {
    int channels = 1;
    /// In [0, 1]; brightens the subchondral bone, the baseline sign of a joint
    /// that is about to progress.
    double sclerosis = 0.0;
    /// Positioning offset of the whole joint, fractions of the image size.
    double shift_x = 0.0;
    double shift_y = 0.0;
};

/// Renders a knee radiograph: femur above, tibia below, separated by a joint
/// space that narrows with severity; osteophyte spurs from grade 3. Pure
/// function of its arguments.
auto render_knee(const IdentityParams& identity, int severity, int size, const RenderOptions& options = {}) -> Image;

/// Per-visit acquisition variation applied on top of a rendered joint.
struct Acquisition {
    double gain = 1.0;
    double offset = 0.0;
    double gamma = 1.0;
    double shift_x = 0.0;
    double shift_y = 0.0;
    double noise_std = 0.0;
    std::uint64_t noise_seed = 0;
};

/// Draws exposure, gamma, positioning and noise settings for one visit.
auto sample_acquisition(std::uint64_t seed) -> Acquisition;

/// Renders one visit under `acquisition`.
auto acquire_knee(const IdentityParams& identity, int severity, int size, int channels, double sclerosis,
                  const Acquisition& acquisition) -> Image;

struct JointRecord {
    IdentityParams identity;
    Image image_v00m;
    Image image_v12m;
    int kl_v00m = 0;
    int kl_v12m = 0;

    [[nodiscard]] auto key() const -> JointKey { return identity.key(); }
    [[nodiscard]] auto image(Visit visit) const -> const Image& {
        return visit == Visit::V00m ? image_v00m : image_v12m;
    }
};

/// Both knees of `n_subjects` subjects. A fraction `progression_rate` of
/// joints (in expectation) gain one or two KL grades by 12 months; those
/// joints carry a subchondral sclerosis sign at both visits.
auto generate_dataset(int n_subjects, double progression_rate, std::uint64_t seed, int size = 64, int channels = 1)
    -> std::vector<JointRecord>;

enum class SplitName { Train, Val, Test };
auto to_string(SplitName split) -> std::string;

struct DatasetSplit {
    std::vector<JointRecord> train;
    std::vector<JointRecord> val;
    std::vector<JointRecord> test;
    std::map<int, SplitName> manifest;  // subject_id -> split

    [[nodiscard]] auto part(SplitName name) const -> const std::vector<JointRecord>&;
    [[nodiscard]] auto part(SplitName name) -> std::vector<JointRecord>&;
};

/// Shuffles subjects with `seed` and assigns floor-rounded shares to val and
/// test, the remainder to train. Both knees of a subject share a split.
auto split_by_subject(const std::vector<JointRecord>& records, const std::array<double, 3>& ratios,
                      std::uint64_t seed) -> DatasetSplit;

/// Photometric jitter: brightness scales intensities, contrast blends with
/// the image mean, saturation blends with per-pixel luminance (a no-op on
/// grayscale). As in a colour-jitter transform, `seed` picks the order in
/// which the three adjustments apply. Output clamped to [0, 1].
auto augment(const Image& image, double brightness, double contrast, double saturation, std::uint64_t seed)
    -> Image;

/// Draws factors uniformly from [1 - jitter, 1 + jitter] and applies them.
auto random_augment(const Image& image, double jitter, std::uint64_t seed) -> Image;

/// Writes `<root>/<split>/<subject>_<side>_<visit>.png` and
/// `<root>/manifest.json`.
void save_dataset(const DatasetSplit& split, const std::filesystem::path& root);

/// Loads a dataset directory in the layout written by save_dataset. With
/// `with_identity` false (external, e.g. OAI-derived, data) identity fields
/// other than subject/side are left at defaults. Records are validated.
auto load_dataset(const std::filesystem::path& root, int channels, bool with_identity = true) -> DatasetSplit;

}  // namespace icrdn
