#include "icrdn/latent_codec.hpp"

#include <cmath>
#include <random>

#include "icrdn/errors.hpp"
#include "icrdn/random.hpp"

namespace icrdn {

namespace nn = torch::nn;

namespace {

auto groups_for(int channels) -> int { return channels % 8 == 0 ? 8 : 1; }

auto conv(int in, int out, int kernel, int stride = 1) -> nn::Conv2d {
    return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2));
}

}  // namespace

auto quantize(const LatentTensor& latent, const torch::Tensor& codebook, double commitment_beta) -> QuantizeResult {
    require(latent.dim() == 3 || latent.dim() == 4, "quantize: expected (C, h, w) or (N, C, h, w) latent");
    require(codebook.dim() == 2 && codebook.size(0) >= 2, "quantize: codebook must be (K >= 2, C)");
    const bool batched = latent.dim() == 4;
    const auto z = batched ? latent : latent.unsqueeze(0);
    require(z.size(1) == codebook.size(1), "quantize: latent has " + std::to_string(z.size(1)) +
                                               " channels but codebook entries have dimension " +
                                               std::to_string(codebook.size(1)));
    const auto channels = z.size(1);
    const auto flat = z.permute({0, 2, 3, 1}).reshape({-1, channels});
    // |z|^2 - 2 z.e + |e|^2, evaluated without building the difference tensor.
    const auto distances = flat.detach().pow(2).sum(1, true) - 2.0 * flat.detach().matmul(codebook.detach().t()) +
                           codebook.detach().pow(2).sum(1).unsqueeze(0);
    const auto indices = distances.argmin(1);
    auto chosen = codebook.index_select(0, indices)
                      .reshape({z.size(0), z.size(2), z.size(3), channels})
                      .permute({0, 3, 1, 2});
    const auto alignment = torch::mse_loss(chosen, z.detach());
    const auto commitment = torch::mse_loss(z, chosen.detach());
    auto straight_through = z + (chosen - z).detach();
    auto grid = indices.reshape({z.size(0), z.size(2), z.size(3)});
    if (!batched) {
        straight_through = straight_through.squeeze(0);
        grid = grid.squeeze(0);
    }
    return {straight_through, grid, alignment + commitment_beta * commitment};
}

ResidualUnitImpl::ResidualUnitImpl(int in_channels, int out_channels)
    : norm1(nn::GroupNormOptions(groups_for(in_channels), in_channels)),
      norm2(nn::GroupNormOptions(groups_for(out_channels), out_channels)),
      conv1(conv(in_channels, out_channels, 3)),
      conv2(conv(out_channels, out_channels, 3)) {
    register_module("norm1", norm1);
    register_module("norm2", norm2);
    register_module("conv1", conv1);
    register_module("conv2", conv2);
    if (in_channels != out_channels) {
        skip = register_module("skip", conv(in_channels, out_channels, 1));
    }
}

auto ResidualUnitImpl::forward(torch::Tensor x) -> torch::Tensor {
    auto h = conv1(torch::silu(norm1(x)));
    h = conv2(torch::silu(norm2(h)));
    return h + (skip ? skip(x) : x);
}

VqCodecImpl::VqCodecImpl(int channels, int image_size, int downsample, int latent_channels, int codebook_size,
                         int width, double commitment_beta)
    : channels_(channels),
      image_size_(image_size),
      downsample_(downsample),
      latent_channels_(latent_channels),
      commitment_beta_(commitment_beta) {
    require(downsample >= 1 && (downsample & (downsample - 1)) == 0, "codec: downsample must be a power of two");
    require(image_size % downsample == 0, "codec: image_size must be divisible by the downsampling factor");
    require(codebook_size >= 2, "codec: codebook needs at least 2 entries");
    int stages = 0;
    while ((1 << stages) < downsample) {
        ++stages;
    }

    int w = width;
    encoder_->push_back(conv(channels, w, 3));
    for (int s = 0; s < stages; ++s) {
        encoder_->push_back(ResidualUnit(w, w));
        encoder_->push_back(conv(w, 2 * w, 3, 2));
        w *= 2;
    }
    encoder_->push_back(ResidualUnit(w, w));
    encoder_->push_back(nn::GroupNorm(nn::GroupNormOptions(groups_for(w), w)));
    encoder_->push_back(nn::SiLU());
    encoder_->push_back(conv(w, latent_channels, 1));

    decoder_->push_back(conv(latent_channels, w, 3));
    decoder_->push_back(ResidualUnit(w, w));
    for (int s = 0; s < stages; ++s) {
        decoder_->push_back(nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
        decoder_->push_back(conv(w, w / 2, 3));
        w /= 2;
        decoder_->push_back(ResidualUnit(w, w));
    }
    decoder_->push_back(nn::GroupNorm(nn::GroupNormOptions(groups_for(w), w)));
    decoder_->push_back(nn::SiLU());
    decoder_->push_back(conv(w, channels, 3));
    decoder_->push_back(nn::Sigmoid());

    register_module("encoder", encoder_);
    register_module("decoder", decoder_);
    codebook_ = register_parameter("codebook", torch::randn({codebook_size, latent_channels}));
}

auto VqCodecImpl::encode(torch::Tensor images) -> torch::Tensor {
    require(images.dim() == 4 && images.size(1) == channels_ && images.size(2) == image_size_ &&
                images.size(3) == image_size_,
            "codec encode: expected (N, " + std::to_string(channels_) + ", " + std::to_string(image_size_) + ", " +
                std::to_string(image_size_) + ") images, got " + c10::str(images.sizes()));
    return encoder_->forward(images);
}

auto VqCodecImpl::quantize(torch::Tensor latent) -> QuantizeResult {
    return icrdn::quantize(latent, codebook_, commitment_beta_);
}

auto VqCodecImpl::decode(torch::Tensor latent) -> torch::Tensor {
    require(latent.dim() == 4 && latent.size(1) == latent_channels_ && latent.size(2) == latent_size() &&
                latent.size(3) == latent_size(),
            "codec decode: expected (N, " + std::to_string(latent_channels_) + ", " + std::to_string(latent_size()) +
                ", " + std::to_string(latent_size()) + ") latent, got " + c10::str(latent.sizes()));
    return decoder_->forward(latent);
}

auto make_codec(const ExperimentConfig& config) -> VqCodec {
    return VqCodec(config.channels, config.image_size, config.codec_downsample, config.latent_channels,
                   config.codebook_size, config.codec_width, config.commitment_beta);
}

auto encode(VqCodec& codec, const Image& image) -> LatentTensor {
    check_image(image, codec->channels(), codec->image_size(), "codec encode");
    torch::NoGradGuard no_grad;
    return codec->encode(image.unsqueeze(0)).squeeze(0);
}

auto decode(VqCodec& codec, const LatentTensor& latent) -> Image {
    require(latent.dim() == 3 && latent.size(0) == codec->latent_channels() &&
                latent.size(1) == codec->latent_size() && latent.size(2) == codec->latent_size(),
            "codec decode: expected a (latent_channels, h, w) latent");
    torch::NoGradGuard no_grad;
    return codec->decode(latent.unsqueeze(0)).squeeze(0);
}

auto encode_images(VqCodec& codec, const std::vector<Image>& images, int batch_size) -> torch::Tensor {
    require(!images.empty(), "encode_images: no images");
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> out;
    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<torch::Tensor> batch(images.begin() + static_cast<std::ptrdiff_t>(start),
                                         images.begin() + static_cast<std::ptrdiff_t>(end));
        out.push_back(codec->encode(torch::stack(batch)));
    }
    return torch::cat(out);
}

auto decode_latents(VqCodec& codec, const torch::Tensor& latents, int batch_size) -> torch::Tensor {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> out;
    for (std::int64_t start = 0; start < latents.size(0); start += batch_size) {
        const auto chunk = latents.slice(0, start, std::min(latents.size(0), start + batch_size));
        out.push_back(codec->decode(codec->quantize(chunk).quantized));
    }
    return torch::cat(out);
}

auto psnr(const torch::Tensor& reference, const torch::Tensor& reconstruction) -> double {
    require(reference.sizes() == reconstruction.sizes(), "psnr: shape mismatch");
    const double mse = (reference.to(torch::kFloat64) - reconstruction.to(torch::kFloat64)).pow(2).mean().item<double>();
    return mse <= 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

auto evaluate_codec(VqCodec& codec, const std::vector<Image>& images) -> CodecEvaluation {
    require(!images.empty(), "evaluate_codec: no images");
    torch::NoGradGuard no_grad;
    codec->eval();
    const auto latents = encode_images(codec, images);
    const auto q = codec->quantize(latents);
    const auto recon = decode_latents(codec, latents);
    const auto originals = torch::stack(images);
    CodecEvaluation e;
    e.l1 = (recon - originals).abs().mean().item<double>();
    double total = 0.0;
    for (std::int64_t i = 0; i < originals.size(0); ++i) {
        total += psnr(originals[i], recon[i]);
    }
    e.psnr = total / static_cast<double>(originals.size(0));
    const auto used = std::get<0>(at::_unique(q.indices.flatten())).numel();
    e.codebook_usage = static_cast<double>(used) / static_cast<double>(codec->codebook().size(0));
    return e;
}

auto all_images(const std::vector<JointRecord>& records) -> std::vector<Image> {
    std::vector<Image> images;
    images.reserve(2 * records.size());
    for (const auto& r : records) {
        images.push_back(r.image_v00m);
        images.push_back(r.image_v12m);
    }
    return images;
}

auto train_codec(const ExperimentConfig& config, const DatasetSplit& splits, const CodecEpochHook& on_epoch)
    -> CodecTrainResult {
    require(!splits.train.empty() && !splits.test.empty(), "train_codec: train and test splits must be nonempty");
    torch::manual_seed(derive_seed(config.rng_seed, {0xc0dec}));
    CodecTrainResult result;
    result.codec = make_codec(config);
    auto& codec = result.codec;

    const auto train_images = all_images(splits.train);
    const auto test_images = all_images(splits.test);
    const auto train_stack = torch::stack(train_images);
    std::mt19937_64 rng(derive_seed(config.rng_seed, {0xc0dec, 1}));

    auto reseed = [&](const torch::Tensor& latents, const torch::Tensor& mask) {
        // Replace masked entries with randomly chosen latent vectors.
        torch::NoGradGuard no_grad;
        const auto flat = latents.permute({0, 2, 3, 1}).reshape({-1, latents.size(1)});
        auto gen = make_generator(rng());
        const auto picks = torch::randint(flat.size(0), {codec->codebook().size(0)}, gen, torch::kLong);
        const auto fresh = flat.index_select(0, picks);
        codec->codebook_mut().copy_(torch::where(mask.unsqueeze(1), fresh, codec->codebook()));
    };

    {
        codec->eval();
        torch::NoGradGuard no_grad;
        const auto latents = encode_images(codec, train_images);
        reseed(latents, torch::ones({codec->codebook().size(0)}, torch::kBool));
    }
    result.initial = evaluate_codec(codec, test_images);

    torch::optim::Adam optimizer(codec->parameters(), torch::optim::AdamOptions(config.codec_lr));
    const auto n = train_stack.size(0);
    for (int epoch = 0; epoch < config.codec_epochs; ++epoch) {
        codec->train();
        auto gen = make_generator(rng());
        const auto order = torch::randperm(n, gen, torch::kLong);
        auto used = torch::zeros({codec->codebook().size(0)}, torch::kBool);
        std::vector<torch::Tensor> epoch_latents;
        double epoch_l1 = 0.0;
        for (std::int64_t start = 0; start < n; start += config.codec_batch) {
            const auto idx = order.slice(0, start, std::min(n, start + config.codec_batch));
            const auto batch = train_stack.index_select(0, idx);
            const auto z = codec->encode(batch);
            auto q = codec->quantize(z);
            const auto recon = codec->decode(q.quantized);
            const auto l1 = (recon - batch).abs().mean();
            const auto loss = l1 + q.vq_loss;
            if (!std::isfinite(loss.item<double>())) {
                throw TrainingError("codec training diverged at epoch " + std::to_string(epoch), epoch);
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            epoch_l1 += l1.item<double>() * static_cast<double>(idx.size(0));
            used.index_fill_(0, std::get<0>(at::_unique(q.indices.flatten())), true);
            epoch_latents.push_back(z.detach());
        }
        result.loss_curve.push_back(epoch_l1 / static_cast<double>(n));
        if (on_epoch) {
            on_epoch(epoch, codec);
            codec->train();
        }
        if (epoch + 1 < config.codec_epochs) {
            reseed(torch::cat(epoch_latents), ~used);
        }
    }
    codec->eval();
    result.final = evaluate_codec(codec, test_images);
    result.collapse_warning = result.final.codebook_usage * static_cast<double>(config.codebook_size) < 2.0;
    return result;
}

}  // namespace icrdn
