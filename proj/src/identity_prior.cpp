#include "icrdn/identity_prior.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "icrdn/backbones.hpp"
#include "icrdn/errors.hpp"
#include "icrdn/eval_guard.hpp"
#include "icrdn/random.hpp"

namespace icrdn {

IdentityEncoderImpl::IdentityEncoderImpl(int channels, int image_size, int dim, IdentityBackbone backbone)
    : channels_(channels), image_size_(image_size), dim_(dim) {
    require(dim >= 1, "identity dimension must be positive");
    net_ = backbone == IdentityBackbone::ResNet18 ? make_backbone(Backbone::ResNet18, channels, dim)
                                                  : make_small_resnet(channels, dim);
    register_module("net", net_.ptr());
}

auto IdentityEncoderImpl::forward(torch::Tensor images) -> torch::Tensor {
    require(images.dim() == 4 && images.size(1) == channels_ && images.size(2) == image_size_ &&
                images.size(3) == image_size_,
            "identity encoder: expected (N, " + std::to_string(channels_) + ", " + std::to_string(image_size_) + ", " +
                std::to_string(image_size_) + ") input, got " + c10::str(images.sizes()));
    return net_.forward(images);
}

auto make_identity_encoder(const ExperimentConfig& config) -> IdentityEncoder {
    return IdentityEncoder(config.channels, config.image_size, config.identity_dim, config.identity_backbone);
}

auto embed_identity(IdentityEncoder& model, const Image& image) -> IdentityEmbedding {
    check_image(image, model->channels(), model->image_size(), "embed_identity");
    EvalGuard guard(*model);
    torch::NoGradGuard no_grad;
    return model->forward(image.unsqueeze(0)).squeeze(0);
}

auto embed_identities(IdentityEncoder& model, const std::vector<Image>& images, int batch_size) -> torch::Tensor {
    require(!images.empty(), "embed_identities: no images");
    EvalGuard guard(*model);
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> out;
    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<torch::Tensor> batch;
        for (auto i = start; i < end; ++i) {
            check_image(images[i], model->channels(), model->image_size(), "embed_identities");
            batch.push_back(images[i]);
        }
        out.push_back(model->forward(torch::stack(batch)));
    }
    return torch::cat(out);
}

auto triplet_loss(const torch::Tensor& anchor, const torch::Tensor& positive, const torch::Tensor& negative,
                  double margin) -> torch::Tensor {
    require(margin >= 0.0, "triplet_loss: margin must be nonnegative");
    require(anchor.sizes() == positive.sizes() && anchor.sizes() == negative.sizes(),
            "triplet_loss: embedding dimensions differ");
    require(anchor.dim() == 1 || anchor.dim() == 2, "triplet_loss: expected (d) or (N, d) embeddings");
    const auto pos = (anchor - positive).pow(2).sum(-1);
    const auto neg = (anchor - negative).pow(2).sum(-1);
    return torch::clamp_min(pos - neg + margin, 0.0).sum();
}

auto sample_triplets(const std::vector<JointRecord>& records, int count, std::uint64_t seed, bool allow_same_subject)
    -> std::vector<Triplet> {
    require(count >= 0, "sample_triplets: count must be nonnegative");
    require(records.size() >= 2, "sample_triplets: need at least 2 distinct joints");

    // Candidate negatives per anchor.
    std::vector<std::vector<std::size_t>> candidates(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (std::size_t k = 0; k < records.size(); ++k) {
            if (records[k].key() == records[i].key()) {
                continue;
            }
            if (!allow_same_subject && records[k].identity.subject_id == records[i].identity.subject_id) {
                continue;
            }
            candidates[i].push_back(k);
        }
        require(!candidates[i].empty(), "sample_triplets: joint " + records[i].key().str() + " has no valid negative");
    }

    std::mt19937_64 rng(derive_seed(seed, {0x7219}));
    std::uniform_int_distribution<std::size_t> pick_anchor(0, records.size() - 1);
    std::vector<Triplet> triplets;
    triplets.reserve(static_cast<std::size_t>(count));
    for (int t = 0; t < count; ++t) {
        const auto i = pick_anchor(rng);
        const auto& pool = candidates[i];
        const auto k = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
        triplets.push_back({records[i].image_v00m, records[i].image_v12m, records[k].image_v00m, records[i].key(),
                            records[k].key()});
    }
    return triplets;
}

auto verification_accuracy(IdentityEncoder& model, const std::vector<Triplet>& triplets) -> double {
    require(!triplets.empty(), "verification_accuracy: empty triplet list");
    std::vector<Image> anchors, positives, negatives;
    for (const auto& t : triplets) {
        anchors.push_back(t.anchor);
        positives.push_back(t.positive);
        negatives.push_back(t.negative);
    }
    const auto a = embed_identities(model, anchors).to(torch::kFloat64);
    const auto p = embed_identities(model, positives).to(torch::kFloat64);
    const auto n = embed_identities(model, negatives).to(torch::kFloat64);
    const auto correct = ((a - p).pow(2).sum(1) < (a - n).pow(2).sum(1)).sum().item<std::int64_t>();
    return static_cast<double>(correct) / static_cast<double>(triplets.size());
}

auto train_identity_prior(const ExperimentConfig& config, const DatasetSplit& splits) -> IdentityTrainResult {
    require(!splits.train.empty() && !splits.test.empty(), "train_identity_prior: train and test splits must be nonempty");
    IdentityTrainResult result;
    result.batch_size = config.identity_batch;
    const auto train = sample_triplets(splits.train, config.triplet_count_train, derive_seed(config.rng_seed, {0x1d, 1}),
                                       config.same_subject_negatives);
    const auto eval = sample_triplets(splits.test, config.triplet_count_eval, derive_seed(config.rng_seed, {0x1d, 2}),
                                      config.same_subject_negatives);
    result.train_triplets = static_cast<int>(train.size());
    result.eval_triplets = static_cast<int>(eval.size());

    double untrained_sum = 0.0;
    result.untrained_min = 1.0;
    result.untrained_max = 0.0;
    for (int trial = 0; trial < kUntrainedTrials; ++trial) {
        torch::manual_seed(derive_seed(config.rng_seed, {0x1d, 4, static_cast<std::uint64_t>(trial)}));
        auto fresh = make_identity_encoder(config);
        const double acc = verification_accuracy(fresh, eval);
        untrained_sum += acc;
        result.untrained_min = std::min(result.untrained_min, acc);
        result.untrained_max = std::max(result.untrained_max, acc);
    }
    result.untrained_accuracy = untrained_sum / kUntrainedTrials;

    torch::manual_seed(derive_seed(config.rng_seed, {0x1d}));
    result.model = make_identity_encoder(config);

    torch::optim::Adam optimizer(result.model->parameters(), torch::optim::AdamOptions(config.identity_lr));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(config.rng_seed, {0x1d, 3}));
    long step = 0;
    result.model->train();
    for (int epoch = 0; epoch < config.identity_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.identity_batch)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.identity_batch));
            std::vector<torch::Tensor> images;
            const auto n = static_cast<std::int64_t>(end - start);
            images.reserve(static_cast<std::size_t>(3 * n));
            for (int role = 0; role < 3; ++role) {
                for (auto i = start; i < end; ++i) {
                    const auto& t = train[order[i]];
                    const auto& img = role == 0 ? t.anchor : (role == 1 ? t.positive : t.negative);
                    images.push_back(random_augment(img, config.augment_jitter, rng()));
                }
            }
            const auto embeddings = result.model->forward(torch::stack(images));
            const auto parts = embeddings.split(n);
            const auto batch_loss = triplet_loss(parts[0], parts[1], parts[2], config.margin);
            const auto loss = batch_loss / static_cast<double>(n);
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw TrainingError("identity prior diverged: non-finite triplet loss at step " + std::to_string(step),
                                    step - 1);
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            epoch_loss += batch_loss.item<double>();
            ++step;
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    result.final_train_loss = result.loss_curve.empty() ? 0.0 : result.loss_curve.back();
    result.verification_accuracy = verification_accuracy(result.model, eval);
    result.model->eval();
    return result;
}

}  // namespace icrdn
