#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "icrdn/classifier.hpp"
#include "icrdn/identity_prior.hpp"
#include "icrdn/image.hpp"

namespace icrdn {

/// Inception score from class posteriors (N, K): exp of the mean KL between
/// each row and the within-split marginal, averaged over `splits` contiguous
/// splits. 0 log 0 is taken as 0.
auto inception_score(const torch::Tensor& class_probs, int splits) -> double;

/// Inception score of images under a grade scorer.
auto inception_score(const std::vector<Image>& images, GradeScorer& classifier, int splits) -> double;

/// Rank-1 retrieval: fraction of rows i whose generated embedding is strictly
/// closer to baseline i than to every other baseline.
auto identity_consistency(const torch::Tensor& baseline_embeddings, const torch::Tensor& generated_embeddings) -> double;

auto identity_consistency(const std::vector<Image>& baselines, const std::vector<Image>& generated,
                          IdentityEncoder& identity_model) -> double;

struct TsneOptions {
    double perplexity = 30.0;
    int iterations = 1000;
    std::uint64_t seed = 0;
};

/// Exact t-SNE of rows of `features` (N, D) to (N, 2), float64.
auto tsne_embed(const torch::Tensor& features, const TsneOptions& options) -> torch::Tensor;

/// Mean silhouette coefficient of points (N, D) under integer labels.
auto silhouette_score(const torch::Tensor& points, const std::vector<int>& labels) -> double;

struct TsnePlot {
    torch::Tensor embedding;  // (N, 2)
    std::filesystem::path path;
    int points = 0;
};

/// Embeds features with t-SNE and writes a grade-coloured scatter PNG.
auto tsne_plot(const std::vector<FeatureVector>& features, const std::vector<int>& labels,
               const std::filesystem::path& out, const TsneOptions& options) -> TsnePlot;

/// Scatter of 2-D points coloured by label (0-4) as an RGB image.
auto render_scatter(const torch::Tensor& points, const std::vector<int>& labels, int size = 480) -> Image;

struct MetricReport {
    double inception_score = 1.0;
    double identity_consistency = 0.0;
    std::array<int, kNumGrades> grade_counts{};  // argmax grades of the scored images
    std::vector<std::filesystem::path> plots;
};

}  // namespace icrdn
