#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <vector>

#include "icrdn/config.hpp"
#include "icrdn/identity_prior.hpp"
#include "icrdn/latent_codec.hpp"

namespace icrdn {

/// Linear-beta DDPM schedule over T steps, indexed 0..T-1.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // running product of alpha

    /// Variance of the ancestral reverse step at t (0 at t = 0).
    [[nodiscard]] auto posterior_variance(int t) const -> double;
};

auto make_noise_schedule(int steps, double beta_start, double beta_end) -> NoiseSchedule;

/// z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps.
auto forward_diffuse(const LatentTensor& z0, int t, const torch::Tensor& eps, const NoiseSchedule& schedule)
    -> LatentTensor;

/// Batched form: `t` is an int64 (N) tensor of per-item steps.
auto forward_diffuse(const LatentTensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                     const NoiseSchedule& schedule) -> LatentTensor;

struct AttentionResult {
    torch::Tensor output;   // (..., L, Cv)
    torch::Tensor weights;  // (..., L, S), rows sum to 1
};

/// softmax(Q K^T / sqrt(d_attn)) V with Q = features M_q, K = context M_k,
/// V = context M_v. `features` is (..., L, C) flattened feature rows,
/// `context` is (..., S, d) identity tokens; leading dimensions broadcast.
auto cross_attention(const torch::Tensor& features, const torch::Tensor& context, const torch::Tensor& m_q,
                     const torch::Tensor& m_k, const torch::Tensor& m_v) -> AttentionResult;

/// Identity injection for one UNet layer: phi <- phi + A, with A attending
/// from the flattened spatial features to the identity embedding.
class IdentityCrossAttentionImpl : public torch::nn::Module {
public:
    IdentityCrossAttentionImpl(int feature_channels, int identity_dim, int attention_dim);

    /// phi: (N, C, H, W); identity: (N, d) single-token context.
    auto forward(const torch::Tensor& phi, const torch::Tensor& identity) -> torch::Tensor;

    torch::Tensor m_q, m_k, m_v;
};
TORCH_MODULE(IdentityCrossAttention);

struct DenoiserOptions {
    int latent_channels = 4;
    int identity_dim = 128;
    int base_width = 32;
    int levels = 3;
    int attention_dim = 64;
    bool identity_injection = true;
};

/// Time-conditional UNet eps_theta(z_t, t, z_cond, F_ID). The baseline latent
/// is concatenated with z_t on the channel axis; F_ID enters through a
/// cross-attention block at every resolution. With identity injection off the
/// attention blocks are skipped and F_ID is ignored.
class DenoiserImpl : public torch::nn::Module {
public:
    explicit DenoiserImpl(const DenoiserOptions& options);

    auto forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& z_cond,
                 const torch::Tensor& identity) -> torch::Tensor;

    [[nodiscard]] auto options() const -> const DenoiserOptions& { return options_; }
    void set_identity_injection(bool enabled) { options_.identity_injection = enabled; }
    auto attention_layers() -> std::vector<IdentityCrossAttention>;

    /// Affine map from codec latents to the unit-scale diffusion space.
    torch::Tensor latent_shift, latent_scale;

private:
    auto time_embedding(const torch::Tensor& t) -> torch::Tensor;

    DenoiserOptions options_;
    torch::nn::Linear time_in{nullptr}, time_out{nullptr};
    torch::nn::Conv2d input_conv{nullptr}, output_conv{nullptr};
    torch::nn::GroupNorm output_norm{nullptr};
    torch::nn::ModuleList down_blocks, down_attn, downsamplers;
    torch::nn::ModuleList mid_blocks, mid_attn;
    torch::nn::ModuleList up_blocks, up_attn, upsamplers;
};
TORCH_MODULE(Denoiser);

auto make_denoiser(const ExperimentConfig& config, bool identity_injection) -> Denoiser;

/// Any noise estimator eps_hat(z_t, t, z_cond, F_ID); F_ID may be undefined.
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& z_t, const torch::Tensor& t,
                                                   const torch::Tensor& z_cond, const torch::Tensor& identity)>;

/// Wraps a denoiser as a NoisePredictor with shape validation.
auto as_predictor(Denoiser& model) -> NoisePredictor;

/// Validated single call: z_t, z_cond (N, Cl, h, w), t an int64 (N) tensor.
auto predict_noise(Denoiser& model, const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& z_cond,
                   const torch::Tensor& identity) -> torch::Tensor;

struct DiffusionBatch {
    torch::Tensor z0;        // target latents (N, Cl, h, w)
    torch::Tensor z_cond;    // baseline latents (N, Cl, h, w)
    torch::Tensor identity;  // (N, d), undefined in the ablation
};

/// Mean over batch items and latent elements of (eps - eps_hat)^2 for given
/// steps and noise.
auto diffusion_loss(const NoisePredictor& predictor, const DiffusionBatch& batch, const NoiseSchedule& schedule,
                    const torch::Tensor& t, const torch::Tensor& eps) -> torch::Tensor;

/// As above with t ~ U{0..T-1} per item and eps ~ N(0, I) drawn from `seed`.
auto diffusion_loss(const NoisePredictor& predictor, const DiffusionBatch& batch, const NoiseSchedule& schedule,
                    std::uint64_t seed) -> torch::Tensor;

/// Ancestral DDPM reverse chain from Gaussian noise. Item i draws all of its
/// noise from a generator seeded with seeds[i], so results do not depend on
/// batch composition.
auto sample_latents(const NoisePredictor& predictor, const torch::Tensor& z_cond, const torch::Tensor& identity,
                    const NoiseSchedule& schedule, const std::vector<std::uint64_t>& seeds) -> torch::Tensor;

/// Forecast 12-month images for a list of baselines: encode + embed each
/// baseline, run the reverse chain, quantise and decode.
auto generate_followups(Denoiser& model, IdentityEncoder& identity_model, VqCodec& codec,
                        const NoiseSchedule& schedule, const std::vector<Image>& baselines,
                        const std::vector<std::uint64_t>& seeds, int batch_size) -> std::vector<Image>;

/// Single-image convenience form of generate_followups.
auto sample(Denoiser& model, const Image& baseline, IdentityEncoder* identity_model, VqCodec* codec,
            const NoiseSchedule& schedule, std::uint64_t seed) -> Image;

struct DiffusionTrainResult {
    Denoiser model{nullptr};
    std::vector<double> loss_curve;  // mean loss per epoch
    double final_loss = 0.0;
};

/// Adam on diffusion_loss over the train split's (12-month, baseline) latent
/// pairs with frozen codec and identity encoder (fine-tuned instead when
/// config.identity_finetune is set).
auto train_diffusion(const ExperimentConfig& config, const DatasetSplit& splits, IdentityEncoder& identity_model,
                     VqCodec& codec, bool identity_injection) -> DiffusionTrainResult;

}  // namespace icrdn
