#pragma once

#include <torch/torch.h>

#include <functional>
#include <vector>

#include "icrdn/config.hpp"
#include "icrdn/image.hpp"
#include "icrdn/synthetic_data.hpp"

namespace icrdn {

/// Spatial latent: (latent_channels, H/s, W/s), or batched (N, ...).
using LatentTensor = torch::Tensor;

struct QuantizeResult {
    LatentTensor quantized;  // straight-through: forward value is the codebook entry
    torch::Tensor indices;   // int64, latent shape without the channel axis
    torch::Tensor vq_loss;   // |sg(z) - e|^2 + beta |z - sg(e)|^2, both as means
};

/// Nearest-codebook assignment of every spatial position of `latent`
/// ((C, h, w) or (N, C, h, w)) against `codebook` (K, C). Ties go to the
/// lowest index. Gradients reach `latent` straight through and `codebook`
/// through the alignment term.
auto quantize(const LatentTensor& latent, const torch::Tensor& codebook, double commitment_beta) -> QuantizeResult;

/// Residual block with GroupNorm and SiLU; shape preserving.
class ResidualUnitImpl : public torch::nn::Module {
public:
    ResidualUnitImpl(int in_channels, int out_channels);
    auto forward(torch::Tensor x) -> torch::Tensor;

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
};
TORCH_MODULE(ResidualUnit);

/// VQ encoder/decoder pair with a gradient-trained codebook.
class VqCodecImpl : public torch::nn::Module {
public:
    VqCodecImpl(int channels, int image_size, int downsample, int latent_channels, int codebook_size, int width,
                double commitment_beta);

    /// (N, C, H, W) -> pre-quantisation latent (N, Cl, H/s, W/s).
    auto encode(torch::Tensor images) -> torch::Tensor;
    auto quantize(torch::Tensor latent) -> QuantizeResult;
    /// (N, Cl, h, w) -> images in [0, 1].
    auto decode(torch::Tensor latent) -> torch::Tensor;

    [[nodiscard]] auto codebook() const -> const torch::Tensor& { return codebook_; }
    auto codebook_mut() -> torch::Tensor& { return codebook_; }
    [[nodiscard]] auto channels() const -> int { return channels_; }
    [[nodiscard]] auto image_size() const -> int { return image_size_; }
    [[nodiscard]] auto latent_size() const -> int { return image_size_ / downsample_; }
    [[nodiscard]] auto latent_channels() const -> int { return latent_channels_; }

private:
    int channels_;
    int image_size_;
    int downsample_;
    int latent_channels_;
    double commitment_beta_;
    torch::nn::Sequential encoder_;
    torch::nn::Sequential decoder_;
    torch::Tensor codebook_;
};
TORCH_MODULE(VqCodec);

auto make_codec(const ExperimentConfig& config) -> VqCodec;

/// Evaluation-mode single-image helpers with shape validation.
auto encode(VqCodec& codec, const Image& image) -> LatentTensor;
auto decode(VqCodec& codec, const LatentTensor& latent) -> Image;

/// Batched evaluation-mode encode of an image list -> (N, Cl, h, w).
auto encode_images(VqCodec& codec, const std::vector<Image>& images, int batch_size = 64) -> torch::Tensor;
/// Quantise then decode a latent batch -> (N, C, H, W).
auto decode_latents(VqCodec& codec, const torch::Tensor& latents, int batch_size = 64) -> torch::Tensor;

/// Peak signal-to-noise ratio in dB for images in [0, 1].
auto psnr(const torch::Tensor& reference, const torch::Tensor& reconstruction) -> double;

struct CodecEvaluation {
    double l1 = 0.0;             // mean absolute reconstruction error
    double psnr = 0.0;           // mean per-image PSNR
    double codebook_usage = 0.0;  // fraction of entries selected at least once
};
auto evaluate_codec(VqCodec& codec, const std::vector<Image>& images) -> CodecEvaluation;

struct CodecTrainResult {
    VqCodec codec{nullptr};
    std::vector<double> loss_curve;  // mean L1 reconstruction per epoch (training)
    CodecEvaluation initial;         // test split, before training
    CodecEvaluation final;           // test split, after training
    bool collapse_warning = false;   // fewer than two entries in use
};

/// L1 reconstruction + VQ loss with Adam over every train-split image (both
/// visits). The codebook is initialised from encoder outputs and entries left
/// unused during an epoch are re-seeded from that epoch's latents. `on_epoch`
/// runs after every epoch with the epoch index and the current codec.
using CodecEpochHook = std::function<void(int epoch, VqCodec& codec)>;
auto train_codec(const ExperimentConfig& config, const DatasetSplit& splits, const CodecEpochHook& on_epoch = {})
    -> CodecTrainResult;

/// Every image (both visits) of a record list.
auto all_images(const std::vector<JointRecord>& records) -> std::vector<Image>;

}  // namespace icrdn
