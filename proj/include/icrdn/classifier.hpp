#pragma once

#include <torch/torch.h>

#include <array>
#include <map>
#include <string>
#include <vector>

#include "icrdn/config.hpp"
#include "icrdn/image.hpp"
#include "icrdn/synthetic_data.hpp"

namespace icrdn {

/// Per-branch representation P: a (feature_dim) tensor.
using FeatureVector = torch::Tensor;

struct GradePrediction {
    std::array<double, kNumGrades> probs{};
    int grade = 0;  // argmax, lowest index on ties
};

/// Builds a GradePrediction from a (5) probability vector.
auto make_prediction(const torch::Tensor& probs) -> GradePrediction;

/// -log probs[label] for one prediction.
auto cross_entropy(const GradePrediction& prediction, int label) -> double;

/// Summed cross-entropy of a batch: logits (N, 5), labels int64 (N).
auto cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels) -> torch::Tensor;

enum class Branch { V00m, V12m };

/// g: linear -> ReLU -> dropout -> linear over the concatenation (P00 || P12).
class GradeHeadImpl : public torch::nn::Module {
public:
    GradeHeadImpl(int feature_dim, int hidden, double dropout);
    /// (N, 2F) -> logits (N, 5).
    auto forward(const torch::Tensor& joint_features) -> torch::Tensor;

    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
    torch::nn::Dropout drop{nullptr};
    int feature_dim;
};
TORCH_MODULE(GradeHead);

/// Two backbones h_v00m, h_v12m of one architecture (independent weights
/// unless `share_weights`) feeding a GradeHead.
class TwoStreamClassifierImpl : public torch::nn::Module {
public:
    TwoStreamClassifierImpl(Backbone backbone, int channels, int image_size, int feature_dim, int hidden,
                            double dropout, bool share_weights);

    auto features(Branch branch, const torch::Tensor& images) -> torch::Tensor;
    auto forward(const torch::Tensor& baseline, const torch::Tensor& followup) -> torch::Tensor;

    [[nodiscard]] auto channels() const -> int { return channels_; }
    [[nodiscard]] auto image_size() const -> int { return image_size_; }
    [[nodiscard]] auto feature_dim() const -> int { return feature_dim_; }

    GradeHead head{nullptr};

private:
    int channels_;
    int image_size_;
    int feature_dim_;
    torch::nn::AnyModule branch_v00m_;
    torch::nn::AnyModule branch_v12m_;
};
TORCH_MODULE(TwoStreamClassifier);

auto make_classifier(const ExperimentConfig& config, Backbone backbone) -> TwoStreamClassifier;

/// Evaluation-mode features of one image from one branch.
auto extract_features(TwoStreamClassifier& model, Branch branch, const Image& image) -> FeatureVector;

/// Evaluation-mode grade prediction from the two branch features, in the
/// order (p00, p12).
auto predict_grade(GradeHead& head, const FeatureVector& p00, const FeatureVector& p12) -> GradePrediction;

/// How the second branch is fed.
enum class GradingMode { BaselineOnly, Generated };

/// Follow-up images keyed by joint; produced by a generator variant.
using JointImages = std::map<JointKey, Image>;

struct GradingResult {
    TwoStreamClassifier model{nullptr};
    double test_accuracy = 0.0;
    double val_accuracy = 0.0;
    double majority_fraction = 0.0;  // accuracy of predicting the most common train grade on test
    std::vector<double> loss_curve;  // mean CE per epoch
};

/// Trains on the train split and reports accuracy on the 12-month grade.
/// In BaselineOnly mode the baseline image feeds both branches; otherwise
/// `followups` must hold an image for every train and test joint, and a
/// DependencyError lists the missing joints.
auto train_and_evaluate(const ExperimentConfig& config, const DatasetSplit& splits, const JointImages& followups,
                        GradingMode mode, Backbone backbone) -> GradingResult;

/// Accuracy on `test` of always predicting the most common 12-month grade of
/// `train` (lowest grade on ties).
auto majority_class_accuracy(const std::vector<JointRecord>& train, const std::vector<JointRecord>& test) -> double;

/// Single-stream 12-month grade scorer used by the inception score: one
/// backbone plus a linear softmax head, trained on real 12-month images.
class GradeScorerImpl : public torch::nn::Module {
public:
    GradeScorerImpl(Backbone backbone, int channels, int image_size, int feature_dim);
    auto features(const torch::Tensor& images) -> torch::Tensor;
    /// Logits (N, 5).
    auto forward(const torch::Tensor& images) -> torch::Tensor;

    [[nodiscard]] auto channels() const -> int { return channels_; }
    [[nodiscard]] auto image_size() const -> int { return image_size_; }

private:
    int channels_;
    int image_size_;
    torch::nn::AnyModule backbone_;
    torch::nn::Linear classifier_{nullptr};
};
TORCH_MODULE(GradeScorer);

struct ScorerResult {
    GradeScorer model{nullptr};
    double test_accuracy = 0.0;  // on real 12-month test images
};

auto train_grade_scorer(const ExperimentConfig& config, const DatasetSplit& splits) -> ScorerResult;

/// Evaluation-mode class posteriors (N, 5) in float64.
auto scorer_probabilities(GradeScorer& scorer, const std::vector<Image>& images) -> torch::Tensor;
/// Evaluation-mode penultimate features (N, feature_dim).
auto scorer_features(GradeScorer& scorer, const std::vector<Image>& images) -> torch::Tensor;

}  // namespace icrdn
