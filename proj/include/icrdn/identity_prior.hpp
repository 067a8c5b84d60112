#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "icrdn/config.hpp"
#include "icrdn/image.hpp"
#include "icrdn/synthetic_data.hpp"

namespace icrdn {

/// F_ID: a (d) float tensor, or (N, d) for a batch. Not length-normalised.
using IdentityEmbedding = torch::Tensor;

/// The identity prior f: image -> F_ID.
class IdentityEncoderImpl : public torch::nn::Module {
public:
    IdentityEncoderImpl(int channels, int image_size, int dim, IdentityBackbone backbone);

    /// (N, C, H, W) -> (N, d).
    auto forward(torch::Tensor images) -> torch::Tensor;

    [[nodiscard]] auto dim() const -> int { return dim_; }
    [[nodiscard]] auto channels() const -> int { return channels_; }
    [[nodiscard]] auto image_size() const -> int { return image_size_; }

private:
    int channels_;
    int image_size_;
    int dim_;
    torch::nn::AnyModule net_;
};
TORCH_MODULE(IdentityEncoder);

auto make_identity_encoder(const ExperimentConfig& config) -> IdentityEncoder;

/// Evaluation-mode embedding of one (C, H, W) image. Restores the module's
/// previous train/eval mode.
auto embed_identity(IdentityEncoder& model, const Image& image) -> IdentityEmbedding;

/// Evaluation-mode embeddings of an image list, batched; returns (N, d).
auto embed_identities(IdentityEncoder& model, const std::vector<Image>& images, int batch_size = 64)
    -> torch::Tensor;

/// Hinge triplet loss max(0, |a-p|^2 - |a-n|^2 + margin). Accepts single
/// embeddings (d) or batches (N, d); a batch yields the sum over triplets.
/// Differentiable through all three arguments.
auto triplet_loss(const torch::Tensor& anchor, const torch::Tensor& positive, const torch::Tensor& negative,
                  double margin) -> torch::Tensor;

/// (anchor = baseline of joint i, positive = 12-month of joint i,
///  negative = baseline of joint k != i).
struct Triplet {
    Image anchor;
    Image positive;
    Image negative;
    JointKey anchor_key;
    JointKey negative_key;
};

/// Uniform anchors, uniform negatives among the other joints. Joints of the
/// anchor's own subject are excluded as negatives unless
/// `allow_same_subject` is set.
auto sample_triplets(const std::vector<JointRecord>& records, int count, std::uint64_t seed,
                     bool allow_same_subject = false) -> std::vector<Triplet>;

/// Fraction of triplets with |f(a)-f(p)|^2 < |f(a)-f(n)|^2; ties fail.
auto verification_accuracy(IdentityEncoder& model, const std::vector<Triplet>& triplets) -> double;

/// Fresh initialisations averaged for the untrained verification baseline.
inline constexpr int kUntrainedTrials = 10;

struct IdentityTrainResult {
    IdentityEncoder model{nullptr};
    std::vector<double> loss_curve;  // mean loss per triplet, one entry per epoch
    double final_train_loss = 0.0;
    double untrained_accuracy = 0.0;  // mean over kUntrainedTrials fresh encoders
    double untrained_min = 0.0;
    double untrained_max = 0.0;
    double verification_accuracy = 0.0;
    int batch_size = 0;
    int train_triplets = 0;
    int eval_triplets = 0;
};

/// Adam on the mean triplet loss over `triplet_count_train` triplets from the
/// train split, with photometric jitter; verification accuracy is measured on
/// `triplet_count_eval` triplets from the test split before and after
/// training. Throws TrainingError on a non-finite loss.
auto train_identity_prior(const ExperimentConfig& config, const DatasetSplit& splits) -> IdentityTrainResult;

}  // namespace icrdn
