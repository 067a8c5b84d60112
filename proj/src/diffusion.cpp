#include "icrdn/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "icrdn/errors.hpp"
#include "icrdn/random.hpp"

namespace icrdn {

namespace nn = torch::nn;

auto NoiseSchedule::posterior_variance(int t) const -> double {
    if (t <= 0) {
        return 0.0;
    }
    const auto i = static_cast<std::size_t>(t);
    return beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]);
}

auto make_noise_schedule(int steps, double beta_start, double beta_end) -> NoiseSchedule {
    require(steps >= 1, "noise schedule: T ≥ 1");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "noise schedule: 0 < β_start ≤ β_end < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.beta.resize(static_cast<std::size_t>(steps));
    s.alpha.resize(s.beta.size());
    s.alpha_bar.resize(s.beta.size());
    double product = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
        const auto i = static_cast<std::size_t>(t);
        s.beta[i] = beta_start + frac * (beta_end - beta_start);
        s.alpha[i] = 1.0 - s.beta[i];
        product *= s.alpha[i];
        s.alpha_bar[i] = product;
    }
    return s;
}

auto forward_diffuse(const LatentTensor& z0, int t, const torch::Tensor& eps, const NoiseSchedule& schedule)
    -> LatentTensor {
    require(t >= 0 && t < schedule.steps,
            "forward_diffuse: step " + std::to_string(t) + " outside [0, " + std::to_string(schedule.steps) + ")");
    require(z0.sizes() == eps.sizes(), "forward_diffuse: noise shape differs from latent shape");
    const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

auto forward_diffuse(const LatentTensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                     const NoiseSchedule& schedule) -> LatentTensor {
    require(z0.sizes() == eps.sizes(), "forward_diffuse: noise shape differs from latent shape");
    require(t.dim() == 1 && t.size(0) == z0.size(0), "forward_diffuse: need one step per batch item");
    require(t.numel() == 0 || (t.min().item<std::int64_t>() >= 0 && t.max().item<std::int64_t>() < schedule.steps),
            "forward_diffuse: step outside [0, T)");
    const auto table = torch::tensor(schedule.alpha_bar, torch::kFloat64);
    auto ab = table.index_select(0, t.to(torch::kLong)).to(z0.scalar_type());
    std::vector<std::int64_t> shape(static_cast<std::size_t>(z0.dim()), 1);
    shape[0] = z0.size(0);
    ab = ab.reshape(shape);
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps;
}

auto cross_attention(const torch::Tensor& features, const torch::Tensor& context, const torch::Tensor& m_q,
                     const torch::Tensor& m_k, const torch::Tensor& m_v) -> AttentionResult {
    require(features.dim() >= 2 && context.dim() >= 2, "cross_attention: features and context must be matrices");
    require(m_q.dim() == 2 && m_k.dim() == 2 && m_v.dim() == 2, "cross_attention: projections must be matrices");
    require(features.size(-1) == m_q.size(0), "cross_attention: feature width " + std::to_string(features.size(-1)) +
                                                  " does not match M_q rows " + std::to_string(m_q.size(0)));
    require(context.size(-1) == m_k.size(0) && context.size(-1) == m_v.size(0),
            "cross_attention: context width does not match M_k/M_v rows");
    require(m_q.size(1) == m_k.size(1), "cross_attention: M_q and M_k project to different dimensions");
    const auto q = features.matmul(m_q);
    const auto k = context.matmul(m_k);
    const auto v = context.matmul(m_v);
    const auto scores = q.matmul(k.transpose(-2, -1)) / std::sqrt(static_cast<double>(m_q.size(1)));
    auto weights = torch::softmax(scores, -1);
    return {weights.matmul(v), weights};
}

IdentityCrossAttentionImpl::IdentityCrossAttentionImpl(int feature_channels, int identity_dim, int attention_dim) {
    const double q_scale = 1.0 / std::sqrt(static_cast<double>(feature_channels));
    const double kv_scale = 1.0 / std::sqrt(static_cast<double>(identity_dim));
    m_q = register_parameter("m_q", torch::randn({feature_channels, attention_dim}) * q_scale);
    m_k = register_parameter("m_k", torch::randn({identity_dim, attention_dim}) * kv_scale);
    m_v = register_parameter("m_v", torch::randn({identity_dim, feature_channels}) * kv_scale);
}

auto IdentityCrossAttentionImpl::forward(const torch::Tensor& phi, const torch::Tensor& identity) -> torch::Tensor {
    const auto n = phi.size(0);
    const auto c = phi.size(1);
    const auto flat = phi.flatten(2).transpose(1, 2);  // (N, HW, C)
    const auto context = identity.reshape({n, 1, identity.size(-1)});
    const auto attended = cross_attention(flat, context, m_q, m_k, m_v).output;  // (N, HW, C)
    return phi + attended.transpose(1, 2).reshape({n, c, phi.size(2), phi.size(3)});
}

namespace {

auto groups_for(int channels) -> int { return channels % 8 == 0 ? 8 : 1; }

auto conv3(int in, int out, int stride = 1) -> nn::Conv2d {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

class TimeResBlockImpl : public nn::Module {
public:
    TimeResBlockImpl(int in, int out, int time_dim)
        : norm1(nn::GroupNormOptions(groups_for(in), in)),
          conv1(conv3(in, out)),
          time_proj(time_dim, out),
          norm2(nn::GroupNormOptions(groups_for(out), out)),
          conv2(conv3(out, out)) {
        register_module("norm1", norm1);
        register_module("conv1", conv1);
        register_module("time_proj", time_proj);
        register_module("norm2", norm2);
        register_module("conv2", conv2);
        if (in != out) {
            skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
        }
    }
    auto forward(const torch::Tensor& x, const torch::Tensor& temb) -> torch::Tensor {
        auto h = conv1(torch::silu(norm1(x)));
        h = h + time_proj(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
        h = conv2(torch::silu(norm2(h)));
        return h + (skip ? skip(x) : x);
    }

private:
    nn::GroupNorm norm1;
    nn::Conv2d conv1;
    nn::Linear time_proj;
    nn::GroupNorm norm2;
    nn::Conv2d conv2;
    nn::Conv2d skip{nullptr};
};
TORCH_MODULE(TimeResBlock);

auto level_width(const DenoiserOptions& o, int level) -> int { return o.base_width * (level == 0 ? 1 : 2); }

}  // namespace

DenoiserImpl::DenoiserImpl(const DenoiserOptions& options) : options_(options) {
    require(options.levels >= 1, "denoiser: at least one resolution level");
    const int time_dim = 4 * options.base_width;
    time_in = register_module("time_in", nn::Linear(options.base_width, time_dim));
    time_out = register_module("time_out", nn::Linear(time_dim, time_dim));
    input_conv = register_module("input_conv", conv3(2 * options.latent_channels, options.base_width));

    int ch = options.base_width;
    std::vector<int> skip_channels;
    for (int level = 0; level < options.levels; ++level) {
        const int w = level_width(options, level);
        down_blocks->push_back(TimeResBlock(ch, w, time_dim));
        down_attn->push_back(IdentityCrossAttention(w, options.identity_dim, options.attention_dim));
        ch = w;
        skip_channels.push_back(ch);
        if (level + 1 < options.levels) {
            downsamplers->push_back(conv3(ch, ch, 2));
        }
    }
    mid_blocks->push_back(TimeResBlock(ch, ch, time_dim));
    mid_attn->push_back(IdentityCrossAttention(ch, options.identity_dim, options.attention_dim));
    mid_blocks->push_back(TimeResBlock(ch, ch, time_dim));
    for (int level = options.levels - 1; level >= 0; --level) {
        const int w = level_width(options, level);
        up_blocks->push_back(TimeResBlock(ch + skip_channels[static_cast<std::size_t>(level)], w, time_dim));
        up_attn->push_back(IdentityCrossAttention(w, options.identity_dim, options.attention_dim));
        ch = w;
        if (level > 0) {
            upsamplers->push_back(conv3(ch, ch));
        }
    }
    output_norm = register_module("output_norm", nn::GroupNorm(nn::GroupNormOptions(groups_for(ch), ch)));
    output_conv = register_module("output_conv", conv3(ch, options.latent_channels));
    register_module("down_blocks", down_blocks);
    register_module("down_attn", down_attn);
    register_module("downsamplers", downsamplers);
    register_module("mid_blocks", mid_blocks);
    register_module("mid_attn", mid_attn);
    register_module("up_blocks", up_blocks);
    register_module("up_attn", up_attn);
    register_module("upsamplers", upsamplers);
    latent_shift = register_buffer("latent_shift", torch::zeros({1}));
    latent_scale = register_buffer("latent_scale", torch::ones({1}));
}

auto DenoiserImpl::time_embedding(const torch::Tensor& t) -> torch::Tensor {
    const int half = options_.base_width / 2;
    const auto freqs =
        torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
    const auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
    return time_out(torch::silu(time_in(emb.to(time_in->weight.scalar_type()))));
}

auto DenoiserImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& z_cond,
                           const torch::Tensor& identity) -> torch::Tensor {
    const bool inject = options_.identity_injection;
    const auto temb = time_embedding(t).to(z_t.scalar_type());
    auto attend = [&](nn::ModuleList& list, std::size_t i, const torch::Tensor& phi) {
        return inject ? list[i]->as<IdentityCrossAttention>()->forward(phi, identity) : phi;
    };

    auto h = input_conv(torch::cat({z_t, z_cond}, 1));
    std::vector<torch::Tensor> skips;
    for (int level = 0; level < options_.levels; ++level) {
        const auto i = static_cast<std::size_t>(level);
        h = down_blocks[i]->as<TimeResBlock>()->forward(h, temb);
        h = attend(down_attn, i, h);
        skips.push_back(h);
        if (level + 1 < options_.levels) {
            h = downsamplers[i]->as<nn::Conv2d>()->forward(h);
        }
    }
    h = mid_blocks[0]->as<TimeResBlock>()->forward(h, temb);
    h = attend(mid_attn, 0, h);
    h = mid_blocks[1]->as<TimeResBlock>()->forward(h, temb);
    std::size_t up = 0;
    for (int level = options_.levels - 1; level >= 0; --level, ++up) {
        h = torch::cat({h, skips[static_cast<std::size_t>(level)]}, 1);
        h = up_blocks[up]->as<TimeResBlock>()->forward(h, temb);
        h = attend(up_attn, up, h);
        if (level > 0) {
            h = torch::upsample_nearest2d(h, std::vector<std::int64_t>{h.size(2) * 2, h.size(3) * 2});
            h = upsamplers[up]->as<nn::Conv2d>()->forward(h);
        }
    }
    return output_conv(torch::silu(output_norm(h)));
}

auto DenoiserImpl::attention_layers() -> std::vector<IdentityCrossAttention> {
    std::vector<IdentityCrossAttention> layers;
    for (auto* list : {&down_attn, &mid_attn, &up_attn}) {
        for (const auto& m : **list) {
            layers.emplace_back(std::dynamic_pointer_cast<IdentityCrossAttentionImpl>(m));
        }
    }
    return layers;
}

auto make_denoiser(const ExperimentConfig& config, bool identity_injection) -> Denoiser {
    DenoiserOptions o;
    o.latent_channels = config.latent_channels;
    o.identity_dim = config.identity_dim;
    o.base_width = config.unet_base_width;
    o.levels = config.unet_levels;
    o.attention_dim = config.attention_dim;
    o.identity_injection = identity_injection;
    return Denoiser(o);
}

auto predict_noise(Denoiser& model, const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& z_cond,
                   const torch::Tensor& identity) -> torch::Tensor {
    const auto& o = model->options();
    require(z_t.dim() == 4 && z_t.size(1) == o.latent_channels, "predict_noise: z_t must be (N, latent_channels, h, w)");
    require(z_t.sizes() == z_cond.sizes(), "predict_noise: z_t and z_cond shapes differ");
    require(z_t.size(2) % (1 << (o.levels - 1)) == 0 && z_t.size(3) % (1 << (o.levels - 1)) == 0,
            "predict_noise: latent size not divisible by the UNet's downsampling");
    require(t.dim() == 1 && t.size(0) == z_t.size(0), "predict_noise: need one step per batch item");
    if (o.identity_injection) {
        require(identity.defined() && identity.dim() == 2 && identity.size(0) == z_t.size(0) &&
                    identity.size(1) == o.identity_dim,
                "predict_noise: identity embedding must be (N, " + std::to_string(o.identity_dim) + ")");
    }
    return model->forward(z_t, t, z_cond, identity);
}

auto as_predictor(Denoiser& model) -> NoisePredictor {
    return [model](const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& z_cond,
                   const torch::Tensor& identity) mutable { return predict_noise(model, z_t, t, z_cond, identity); };
}

auto diffusion_loss(const NoisePredictor& predictor, const DiffusionBatch& batch, const NoiseSchedule& schedule,
                    const torch::Tensor& t, const torch::Tensor& eps) -> torch::Tensor {
    require(batch.z0.defined() && batch.z0.size(0) > 0, "diffusion_loss: empty batch");
    const auto z_t = forward_diffuse(batch.z0, t, eps, schedule);
    const auto eps_hat = predictor(z_t, t, batch.z_cond, batch.identity);
    return (eps - eps_hat).pow(2).mean();
}

auto diffusion_loss(const NoisePredictor& predictor, const DiffusionBatch& batch, const NoiseSchedule& schedule,
                    std::uint64_t seed) -> torch::Tensor {
    require(batch.z0.defined() && batch.z0.size(0) > 0, "diffusion_loss: empty batch");
    auto gen = make_generator(seed);
    const auto t = torch::randint(schedule.steps, {batch.z0.size(0)}, gen, torch::kLong);
    const auto eps = torch::randn(batch.z0.sizes(), gen, batch.z0.options());
    return diffusion_loss(predictor, batch, schedule, t, eps);
}

auto sample_latents(const NoisePredictor& predictor, const torch::Tensor& z_cond, const torch::Tensor& identity,
                    const NoiseSchedule& schedule, const std::vector<std::uint64_t>& seeds) -> torch::Tensor {
    require(z_cond.dim() == 4, "sample_latents: z_cond must be (N, C, h, w)");
    require(static_cast<std::int64_t>(seeds.size()) == z_cond.size(0), "sample_latents: need one seed per item");
    torch::NoGradGuard no_grad;
    std::vector<torch::Generator> gens;
    std::vector<torch::Tensor> init;
    const auto item_shape = z_cond.sizes().slice(1);
    for (auto seed : seeds) {
        gens.push_back(make_generator(seed));
        init.push_back(torch::randn(item_shape, gens.back(), z_cond.options()));
    }
    auto z = torch::stack(init);
    const auto n = z.size(0);
    for (int t = schedule.steps - 1; t >= 0; --t) {
        const auto i = static_cast<std::size_t>(t);
        const auto steps = torch::full({n}, t, torch::kLong);
        const auto eps_hat = predictor(z, steps, z_cond, identity);
        const double coef = schedule.beta[i] / std::sqrt(1.0 - schedule.alpha_bar[i]);
        z = (z - coef * eps_hat) / std::sqrt(schedule.alpha[i]);
        if (t > 0) {
            std::vector<torch::Tensor> noise;
            for (auto& gen : gens) {
                noise.push_back(torch::randn(item_shape, gen, z_cond.options()));
            }
            z = z + std::sqrt(schedule.posterior_variance(t)) * torch::stack(noise);
        }
    }
    return z;
}

auto generate_followups(Denoiser& model, IdentityEncoder& identity_model, VqCodec& codec,
                        const NoiseSchedule& schedule, const std::vector<Image>& baselines,
                        const std::vector<std::uint64_t>& seeds, int batch_size) -> std::vector<Image> {
    require(baselines.size() == seeds.size(), "generate_followups: need one seed per baseline");
    torch::NoGradGuard no_grad;
    model->eval();
    codec->eval();
    const bool inject = model->options().identity_injection;
    std::vector<Image> out;
    out.reserve(baselines.size());
    for (std::size_t start = 0; start < baselines.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(baselines.size(), start + static_cast<std::size_t>(batch_size));
        const std::vector<Image> chunk(baselines.begin() + static_cast<std::ptrdiff_t>(start),
                                       baselines.begin() + static_cast<std::ptrdiff_t>(end));
        const std::vector<std::uint64_t> chunk_seeds(seeds.begin() + static_cast<std::ptrdiff_t>(start),
                                                     seeds.begin() + static_cast<std::ptrdiff_t>(end));
        const auto z_cond = (encode_images(codec, chunk) - model->latent_shift) / model->latent_scale;
        torch::Tensor identity;
        if (inject) {
            identity = embed_identities(identity_model, chunk);
        }
        const auto z = sample_latents(as_predictor(model), z_cond, identity, schedule, chunk_seeds);
        const auto images = decode_latents(codec, z * model->latent_scale + model->latent_shift);
        for (std::int64_t i = 0; i < images.size(0); ++i) {
            out.push_back(images[i].contiguous());
        }
    }
    return out;
}

auto sample(Denoiser& model, const Image& baseline, IdentityEncoder* identity_model, VqCodec* codec,
            const NoiseSchedule& schedule, std::uint64_t seed) -> Image {
    if (!model) {
        throw DependencyError("sample: denoiser not loaded");
    }
    if (codec == nullptr || !*codec) {
        throw DependencyError("sample: codec not loaded");
    }
    const bool inject = model->options().identity_injection;
    if (inject && (identity_model == nullptr || !*identity_model)) {
        throw DependencyError("sample: identity encoder not loaded");
    }
    check_image(baseline, (*codec)->channels(), (*codec)->image_size(), "sample");
    IdentityEncoder placeholder{nullptr};
    auto& encoder = identity_model != nullptr ? *identity_model : placeholder;
    return generate_followups(model, encoder, *codec, schedule, {baseline}, {seed}, 1).front();
}

auto train_diffusion(const ExperimentConfig& config, const DatasetSplit& splits, IdentityEncoder& identity_model,
                     VqCodec& codec, bool identity_injection) -> DiffusionTrainResult {
    require(!splits.train.empty(), "train_diffusion: empty train split");
    // Both variants start from the same weights; only the injection differs.
    torch::manual_seed(derive_seed(config.rng_seed, {0xd1ff}));
    DiffusionTrainResult result;
    result.model = make_denoiser(config, identity_injection);
    auto& model = result.model;
    const auto schedule = make_noise_schedule(config.diffusion_steps, config.beta_start, config.beta_end);

    std::vector<Image> baselines, followups;
    for (const auto& r : splits.train) {
        baselines.push_back(r.image_v00m);
        followups.push_back(r.image_v12m);
    }
    codec->eval();
    const auto z_cond_raw = encode_images(codec, baselines);
    const auto z0_raw = encode_images(codec, followups);
    {
        torch::NoGradGuard no_grad;
        const auto all = torch::cat({z_cond_raw, z0_raw});
        model->latent_shift.fill_(all.mean().item<double>());
        model->latent_scale.fill_(all.std().item<double>());
    }
    const auto z_cond_all = (z_cond_raw - model->latent_shift) / model->latent_scale;
    const auto z0_all = (z0_raw - model->latent_shift) / model->latent_scale;
    const auto baseline_stack = torch::stack(baselines);
    torch::Tensor identity_all;
    if (identity_injection && !config.identity_finetune) {
        identity_all = embed_identities(identity_model, baselines);
    }

    auto params = model->parameters();
    if (identity_injection && config.identity_finetune) {
        for (auto& p : identity_model->parameters()) {
            params.push_back(p);
        }
    }
    torch::optim::Adam optimizer(params, torch::optim::AdamOptions(config.diffusion_lr));
    const auto predictor = as_predictor(model);
    std::mt19937_64 rng(derive_seed(config.rng_seed, {0xd1ff, 1}));
    const auto n = z0_all.size(0);
    long step = 0;
    model->train();
    for (int epoch = 0; epoch < config.diffusion_epochs; ++epoch) {
        auto gen = make_generator(rng());
        const auto order = torch::randperm(n, gen, torch::kLong);
        double epoch_loss = 0.0;
        for (std::int64_t start = 0; start < n; start += config.diffusion_batch) {
            const auto idx = order.slice(0, start, std::min(n, start + config.diffusion_batch));
            DiffusionBatch batch{z0_all.index_select(0, idx), z_cond_all.index_select(0, idx), {}};
            if (identity_injection) {
                if (config.identity_finetune) {
                    identity_model->eval();
                    batch.identity = identity_model->forward(baseline_stack.index_select(0, idx));
                } else {
                    batch.identity = identity_all.index_select(0, idx);
                }
            }
            const auto loss = diffusion_loss(predictor, batch, schedule, rng());
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw TrainingError("diffusion training diverged: non-finite loss at step " + std::to_string(step),
                                    step - 1);
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            epoch_loss += value * static_cast<double>(idx.size(0));
            ++step;
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(n));
    }
    result.final_loss = result.loss_curve.empty() ? 0.0 : result.loss_curve.back();
    model->eval();
    return result;
}

}  // namespace icrdn
