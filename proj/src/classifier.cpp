#include "icrdn/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "icrdn/backbones.hpp"
#include "icrdn/errors.hpp"
#include "icrdn/eval_guard.hpp"
#include "icrdn/random.hpp"

namespace icrdn {

auto make_prediction(const torch::Tensor& probs) -> GradePrediction {
    require(probs.dim() == 1 && probs.size(0) == kNumGrades, "make_prediction: expected 5 probabilities");
    const auto p = probs.to(torch::kFloat64).contiguous();
    GradePrediction out;
    for (int k = 0; k < kNumGrades; ++k) {
        out.probs[static_cast<std::size_t>(k)] = p[k].item<double>();
        require(std::isfinite(out.probs[static_cast<std::size_t>(k)]) && out.probs[static_cast<std::size_t>(k)] >= 0.0,
                "make_prediction: probabilities must be finite and nonnegative");
    }
    out.grade = static_cast<int>(std::max_element(out.probs.begin(), out.probs.end()) - out.probs.begin());
    return out;
}

auto cross_entropy(const GradePrediction& prediction, int label) -> double {
    require(label >= 0 && label < kNumGrades, "cross_entropy: label " + std::to_string(label) + " outside 0-4");
    return -std::log(prediction.probs[static_cast<std::size_t>(label)]);
}

auto cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels) -> torch::Tensor {
    require(logits.dim() == 2 && logits.size(1) == kNumGrades, "cross_entropy: expected (N, 5) logits");
    require(labels.dim() == 1 && labels.size(0) == logits.size(0), "cross_entropy: labels must be (N)");
    require(labels.numel() == 0 || (labels.min().item<std::int64_t>() >= 0 &&
                                    labels.max().item<std::int64_t>() < kNumGrades),
            "cross_entropy: label outside 0-4");
    const auto log_probs = torch::log_softmax(logits, 1);
    return -log_probs.gather(1, labels.to(torch::kInt64).unsqueeze(1)).sum();
}

GradeHeadImpl::GradeHeadImpl(int feature_dim, int hidden, double dropout) : feature_dim(feature_dim) {
    require(feature_dim >= 1 && hidden >= 1, "grade head: dimensions must be positive");
    fc1 = register_module("fc1", torch::nn::Linear(2 * feature_dim, hidden));
    drop = register_module("drop", torch::nn::Dropout(dropout));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, kNumGrades));
}

auto GradeHeadImpl::forward(const torch::Tensor& joint_features) -> torch::Tensor {
    require(joint_features.dim() == 2 && joint_features.size(1) == 2 * feature_dim,
            "grade head: expected (N, " + std::to_string(2 * feature_dim) + ") features");
    return fc2(drop(torch::relu(fc1(joint_features))));
}

TwoStreamClassifierImpl::TwoStreamClassifierImpl(Backbone backbone, int channels, int image_size, int feature_dim,
                                                 int hidden, double dropout, bool share_weights)
    : channels_(channels), image_size_(image_size), feature_dim_(feature_dim) {
    branch_v00m_ = make_backbone(backbone, channels, feature_dim);
    register_module("branch_v00m", branch_v00m_.ptr());
    if (share_weights) {
        branch_v12m_ = branch_v00m_;
    } else {
        branch_v12m_ = make_backbone(backbone, channels, feature_dim);
        register_module("branch_v12m", branch_v12m_.ptr());
    }
    head = register_module("head", GradeHead(feature_dim, hidden, dropout));
}

auto TwoStreamClassifierImpl::features(Branch branch, const torch::Tensor& images) -> torch::Tensor {
    require(images.dim() == 4 && images.size(1) == channels_ && images.size(2) == image_size_ &&
                images.size(3) == image_size_,
            "classifier: expected (N, " + std::to_string(channels_) + ", " + std::to_string(image_size_) + ", " +
                std::to_string(image_size_) + ") input, got " + c10::str(images.sizes()));
    return branch == Branch::V00m ? branch_v00m_.forward(images) : branch_v12m_.forward(images);
}

auto TwoStreamClassifierImpl::forward(const torch::Tensor& baseline, const torch::Tensor& followup) -> torch::Tensor {
    return head->forward(torch::cat({features(Branch::V00m, baseline), features(Branch::V12m, followup)}, 1));
}

auto make_classifier(const ExperimentConfig& config, Backbone backbone) -> TwoStreamClassifier {
    return TwoStreamClassifier(backbone, config.channels, config.image_size, config.feature_dim, config.head_hidden,
                               config.dropout, config.share_branch_weights);
}

auto extract_features(TwoStreamClassifier& model, Branch branch, const Image& image) -> FeatureVector {
    check_image(image, model->channels(), model->image_size(), "extract_features");
    EvalGuard guard(*model);
    torch::NoGradGuard no_grad;
    return model->features(branch, image.unsqueeze(0)).squeeze(0);
}

auto predict_grade(GradeHead& head, const FeatureVector& p00, const FeatureVector& p12) -> GradePrediction {
    require(p00.dim() == 1 && p12.dim() == 1 && p00.size(0) == head->feature_dim && p12.size(0) == head->feature_dim,
            "predict_grade: both feature vectors must have length " + std::to_string(head->feature_dim));
    EvalGuard guard(*head);
    torch::NoGradGuard no_grad;
    const auto logits = head->forward(torch::cat({p00, p12}).unsqueeze(0).to(torch::kFloat32));
    return make_prediction(torch::softmax(logits.squeeze(0).to(torch::kFloat64), 0));
}

namespace {

struct GradingSet {
    std::vector<Image> baseline;
    std::vector<Image> followup;
    std::vector<std::int64_t> labels;
};

auto build_set(const std::vector<JointRecord>& records, const JointImages& followups, GradingMode mode,
               std::vector<std::string>& missing) -> GradingSet {
    GradingSet set;
    for (const auto& r : records) {
        set.baseline.push_back(r.image_v00m);
        set.labels.push_back(r.kl_v12m);
        if (mode == GradingMode::BaselineOnly) {
            set.followup.push_back(r.image_v00m);
            continue;
        }
        const auto it = followups.find(r.key());
        if (it == followups.end()) {
            missing.push_back(r.key().str());
            continue;
        }
        set.followup.push_back(it->second);
    }
    return set;
}

auto accuracy(TwoStreamClassifier& model, const GradingSet& set) -> double {
    if (set.labels.empty()) {
        return 0.0;
    }
    EvalGuard guard(*model);
    torch::NoGradGuard no_grad;
    std::int64_t correct = 0;
    constexpr std::size_t kBatch = 64;
    for (std::size_t start = 0; start < set.labels.size(); start += kBatch) {
        const auto end = std::min(set.labels.size(), start + kBatch);
        std::vector<torch::Tensor> a(set.baseline.begin() + static_cast<std::ptrdiff_t>(start),
                                     set.baseline.begin() + static_cast<std::ptrdiff_t>(end));
        std::vector<torch::Tensor> b(set.followup.begin() + static_cast<std::ptrdiff_t>(start),
                                     set.followup.begin() + static_cast<std::ptrdiff_t>(end));
        const auto pred = model->forward(torch::stack(a), torch::stack(b)).argmax(1);
        for (auto i = start; i < end; ++i) {
            correct += pred[static_cast<std::int64_t>(i - start)].item<std::int64_t>() == set.labels[i] ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(set.labels.size());
}

auto majority_grade(const std::vector<JointRecord>& records) -> int {
    std::array<int, kNumGrades> counts{};
    for (const auto& r : records) {
        ++counts[static_cast<std::size_t>(r.kl_v12m)];
    }
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

auto step_decayed_lr(const ExperimentConfig& config, int epoch) -> double {
    const int steps = config.lr_decay_every > 0 ? epoch / config.lr_decay_every : 0;
    return config.classifier_lr * std::pow(1.0 - config.lr_decay_factor, steps);
}

template <typename Optimizer>
void set_lr(Optimizer& optimizer, double lr) {
    for (auto& group : optimizer.param_groups()) {
        static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
    }
}

}  // namespace

auto train_and_evaluate(const ExperimentConfig& config, const DatasetSplit& splits, const JointImages& followups,
                        GradingMode mode, Backbone backbone) -> GradingResult {
    require(!splits.train.empty() && !splits.test.empty(), "train_and_evaluate: train and test splits must be nonempty");
    std::vector<std::string> missing;
    const auto train = build_set(splits.train, followups, mode, missing);
    const auto test = build_set(splits.test, followups, mode, missing);
    if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < missing.size() && i < 20; ++i) {
            list += (i ? ", " : "") + missing[i];
        }
        if (missing.size() > 20) {
            list += ", ... (" + std::to_string(missing.size()) + " total)";
        }
        throw DependencyError("missing generated follow-up images for joints: " + list);
    }
    std::vector<std::string> ignored;
    const auto val = build_set(splits.val, followups, mode, ignored);
    const bool val_complete = ignored.empty();

    const auto tag = static_cast<std::uint64_t>(backbone) * 2 + (mode == GradingMode::BaselineOnly ? 0 : 1);
    torch::manual_seed(derive_seed(config.rng_seed, {0xc1, tag}));
    GradingResult result;
    result.model = make_classifier(config, backbone);
    torch::optim::SGD optimizer(result.model->parameters(),
                                torch::optim::SGDOptions(config.classifier_lr).momentum(config.classifier_momentum));

    std::vector<std::size_t> order(train.labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(config.rng_seed, {0xc1, tag, 1}));
    const auto batch = static_cast<std::size_t>(config.classifier_batch);
    long step = 0;
    result.model->train();
    for (int epoch = 0; epoch < config.classifier_epochs; ++epoch) {
        set_lr(optimizer, step_decayed_lr(config, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const auto end = std::min(order.size(), start + batch);
            if (end - start < 2 && order.size() >= 2) {
                continue;  // batch norm needs two samples
            }
            std::vector<torch::Tensor> a, b;
            std::vector<std::int64_t> labels;
            for (auto i = start; i < end; ++i) {
                a.push_back(random_augment(train.baseline[order[i]], config.augment_jitter, rng()));
                b.push_back(random_augment(train.followup[order[i]], config.augment_jitter, rng()));
                labels.push_back(train.labels[order[i]]);
            }
            const auto logits = result.model->forward(torch::stack(a), torch::stack(b));
            const auto batch_loss = cross_entropy(logits, torch::tensor(labels, torch::kInt64));
            const auto loss = batch_loss / static_cast<double>(labels.size());
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw TrainingError("classifier diverged: non-finite loss at step " + std::to_string(step), step - 1);
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            epoch_loss += batch_loss.item<double>();
            ++step;
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(order.size(), 1)));
    }
    result.model->eval();
    result.test_accuracy = accuracy(result.model, test);
    result.val_accuracy = val_complete ? accuracy(result.model, val) : 0.0;
    result.majority_fraction = majority_class_accuracy(splits.train, splits.test);
    return result;
}

auto majority_class_accuracy(const std::vector<JointRecord>& train, const std::vector<JointRecord>& test) -> double {
    require(!train.empty() && !test.empty(), "majority_class_accuracy: empty record list");
    const int majority = majority_grade(train);
    const auto hits =
        std::count_if(test.begin(), test.end(), [&](const JointRecord& r) { return r.kl_v12m == majority; });
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

GradeScorerImpl::GradeScorerImpl(Backbone backbone, int channels, int image_size, int feature_dim)
    : channels_(channels), image_size_(image_size) {
    backbone_ = make_backbone(backbone, channels, feature_dim);
    register_module("backbone", backbone_.ptr());
    classifier_ = register_module("classifier", torch::nn::Linear(feature_dim, kNumGrades));
}

auto GradeScorerImpl::features(const torch::Tensor& images) -> torch::Tensor {
    require(images.dim() == 4 && images.size(1) == channels_ && images.size(2) == image_size_ &&
                images.size(3) == image_size_,
            "grade scorer: expected (N, " + std::to_string(channels_) + ", " + std::to_string(image_size_) + ", " +
                std::to_string(image_size_) + ") input, got " + c10::str(images.sizes()));
    return backbone_.forward(images);
}

auto GradeScorerImpl::forward(const torch::Tensor& images) -> torch::Tensor {
    return classifier_(torch::relu(features(images)));
}

namespace {

template <typename Fn>
auto batched_eval(GradeScorer& scorer, const std::vector<Image>& images, Fn fn) -> torch::Tensor {
    require(!images.empty(), "grade scorer: no images");
    EvalGuard guard(*scorer);
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> out;
    constexpr std::size_t kBatch = 64;
    for (std::size_t start = 0; start < images.size(); start += kBatch) {
        const auto end = std::min(images.size(), start + kBatch);
        std::vector<torch::Tensor> batch;
        for (auto i = start; i < end; ++i) {
            check_image(images[i], scorer->channels(), scorer->image_size(), "grade scorer");
            batch.push_back(images[i]);
        }
        out.push_back(fn(torch::stack(batch)));
    }
    return torch::cat(out).to(torch::kFloat64);
}

}  // namespace

auto scorer_probabilities(GradeScorer& scorer, const std::vector<Image>& images) -> torch::Tensor {
    return batched_eval(scorer, images,
                        [&](const torch::Tensor& x) { return torch::softmax(scorer->forward(x).to(torch::kFloat64), 1); });
}

auto scorer_features(GradeScorer& scorer, const std::vector<Image>& images) -> torch::Tensor {
    return batched_eval(scorer, images, [&](const torch::Tensor& x) { return scorer->features(x); });
}

auto train_grade_scorer(const ExperimentConfig& config, const DatasetSplit& splits) -> ScorerResult {
    require(!splits.train.empty() && !splits.test.empty(), "train_grade_scorer: train and test splits must be nonempty");
    torch::manual_seed(derive_seed(config.rng_seed, {0x15}));
    ScorerResult result;
    result.model = GradeScorer(config.backbone_name, config.channels, config.image_size, config.feature_dim);
    torch::optim::SGD optimizer(result.model->parameters(),
                                torch::optim::SGDOptions(config.classifier_lr).momentum(config.classifier_momentum));
    std::vector<std::size_t> order(splits.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(config.rng_seed, {0x15, 1}));
    const auto batch = static_cast<std::size_t>(config.classifier_batch);
    result.model->train();
    for (int epoch = 0; epoch < config.is_classifier_epochs; ++epoch) {
        set_lr(optimizer, step_decayed_lr(config, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const auto end = std::min(order.size(), start + batch);
            if (end - start < 2 && order.size() >= 2) {
                continue;
            }
            std::vector<torch::Tensor> images;
            std::vector<std::int64_t> labels;
            for (auto i = start; i < end; ++i) {
                const auto& r = splits.train[order[i]];
                images.push_back(random_augment(r.image_v12m, config.augment_jitter, rng()));
                labels.push_back(r.kl_v12m);
            }
            const auto loss = cross_entropy(result.model->forward(torch::stack(images)),
                                            torch::tensor(labels, torch::kInt64)) /
                              static_cast<double>(labels.size());
            if (!std::isfinite(loss.item<double>())) {
                throw TrainingError("grade scorer diverged: non-finite loss", -1);
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
        }
    }
    result.model->eval();
    std::vector<Image> test_images;
    for (const auto& r : splits.test) {
        test_images.push_back(r.image_v12m);
    }
    const auto pred = scorer_probabilities(result.model, test_images).argmax(1);
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < splits.test.size(); ++i) {
        correct += pred[static_cast<std::int64_t>(i)].item<std::int64_t>() == splits.test[i].kl_v12m ? 1 : 0;
    }
    result.test_accuracy = static_cast<double>(correct) / static_cast<double>(splits.test.size());
    return result;
}

}  // namespace icrdn
