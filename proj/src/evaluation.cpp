#include "icrdn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "icrdn/errors.hpp"
#include "icrdn/random.hpp"

namespace icrdn {

auto inception_score(const torch::Tensor& class_probs, int splits) -> double {
    require(class_probs.dim() == 2 && class_probs.size(1) >= 1, "inception_score: expected (N, K) probabilities");
    require(splits >= 1, "inception_score: splits must be positive");
    const auto n = class_probs.size(0);
    require(n >= splits, "inception_score: " + std::to_string(n) + " images is fewer than " + std::to_string(splits) +
                             " splits");
    const auto p = class_probs.to(torch::kFloat64).contiguous();
    require(torch::isfinite(p).all().item<bool>() && p.min().item<double>() >= 0.0,
            "inception_score: probabilities must be finite and nonnegative");
    double total = 0.0;
    for (int s = 0; s < splits; ++s) {
        const auto begin = n * s / splits;
        const auto end = n * (s + 1) / splits;
        const auto part = p.slice(0, begin, end);
        const auto marginal = part.mean(0, true).expand_as(part);
        const auto positive = part > 0;
        const auto terms = torch::where(positive, part * (torch::log(torch::where(positive, part, torch::ones_like(part))) -
                                                         torch::log(torch::where(positive, marginal, torch::ones_like(part)))),
                                        torch::zeros_like(part));
        total += std::exp(terms.sum(1).mean().item<double>());
    }
    return total / splits;
}

auto inception_score(const std::vector<Image>& images, GradeScorer& classifier, int splits) -> double {
    require(static_cast<std::int64_t>(images.size()) >= splits, "inception_score: fewer images than splits");
    return inception_score(scorer_probabilities(classifier, images), splits);
}

auto identity_consistency(const torch::Tensor& baseline_embeddings, const torch::Tensor& generated_embeddings)
    -> double {
    require(baseline_embeddings.dim() == 2 && generated_embeddings.dim() == 2 &&
                baseline_embeddings.sizes() == generated_embeddings.sizes(),
            "identity_consistency: baselines and generated images must be paired");
    const auto n = baseline_embeddings.size(0);
    require(n >= 2, "identity_consistency: need at least 2 pairs");
    const auto b = baseline_embeddings.to(torch::kFloat64);
    const auto g = generated_embeddings.to(torch::kFloat64);
    // d[i][j] = |g_i - b_j|^2
    const auto d = (g.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(2);
    const auto own = d.diagonal().unsqueeze(1);
    const auto eye = torch::eye(n, torch::kBool);
    const auto beaten = ((d <= own) & ~eye).any(1);
    const auto hits = (~beaten).sum().item<std::int64_t>();
    return static_cast<double>(hits) / static_cast<double>(n);
}

auto identity_consistency(const std::vector<Image>& baselines, const std::vector<Image>& generated,
                          IdentityEncoder& identity_model) -> double {
    require(baselines.size() == generated.size(), "identity_consistency: " + std::to_string(baselines.size()) +
                                                      " baselines vs " + std::to_string(generated.size()) +
                                                      " generated images");
    require(baselines.size() >= 2, "identity_consistency: need at least 2 pairs");
    return identity_consistency(embed_identities(identity_model, baselines),
                                embed_identities(identity_model, generated));
}

namespace {

// Row-conditional affinities with the requested perplexity, by bisection on
// the Gaussian precision.
auto conditional_affinities(const torch::Tensor& sq_dist, double perplexity) -> torch::Tensor {
    const auto n = sq_dist.size(0);
    auto p = torch::zeros({n, n}, torch::kFloat64);
    const double target = std::log(perplexity);
    auto acc = sq_dist.accessor<double, 2>();
    auto out = p.accessor<double, 2>();
    std::vector<double> row(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double min_d = std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < n; ++j) {
            if (j != i) {
                min_d = std::min(min_d, acc[i][j]);
            }
        }
        for (int iter = 0; iter < 100; ++iter) {
            double sum = 0.0, weighted = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                const double w = j == i ? 0.0 : std::exp(-beta * (acc[i][j] - min_d));
                row[static_cast<std::size_t>(j)] = w;
                sum += w;
                weighted += w * (acc[i][j] - min_d);
            }
            const double entropy = std::log(sum) + beta * weighted / sum;
            for (std::int64_t j = 0; j < n; ++j) {
                out[i][j] = row[static_cast<std::size_t>(j)] / sum;
            }
            const double diff = entropy - target;
            if (std::abs(diff) < 1e-5) {
                break;
            }
            if (diff > 0) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    return p;
}

auto pairwise_sq_dist(const torch::Tensor& x) -> torch::Tensor {
    const auto sq = x.pow(2).sum(1);
    return (sq.unsqueeze(1) + sq.unsqueeze(0) - 2.0 * x.matmul(x.t())).clamp_min(0.0);
}

}  // namespace

auto tsne_embed(const torch::Tensor& features, const TsneOptions& options) -> torch::Tensor {
    require(features.dim() == 2 && features.size(0) >= 2, "tsne: expected (N, D) features with N >= 2");
    require(options.perplexity > 0.0 && options.iterations >= 1, "tsne: perplexity and iterations must be positive");
    const auto n = features.size(0);
    const auto x = features.to(torch::kFloat64).contiguous();
    require(torch::isfinite(x).all().item<bool>(), "tsne: features must be finite");
    double perplexity = options.perplexity;
    if (3.0 * perplexity > static_cast<double>(n - 1)) {
        perplexity = std::max(1.0, static_cast<double>(n - 1) / 3.0);
    }
    auto p = conditional_affinities(pairwise_sq_dist(x).contiguous(), perplexity);
    p = (p + p.t()) / (2.0 * static_cast<double>(n));
    p = p.clamp_min(1e-12);

    constexpr int kExaggerationIters = 250;
    constexpr double kExaggeration = 12.0;
    constexpr double kLearningRate = 200.0;
    auto gen = make_generator(derive_seed(options.seed, {0x75e}));
    auto y = torch::randn({n, 2}, gen, torch::kFloat64) * 1e-4;
    auto update = torch::zeros_like(y);
    auto gains = torch::ones_like(y);
    const auto off_diag = 1.0 - torch::eye(n, torch::kFloat64);
    for (int iter = 0; iter < options.iterations; ++iter) {
        const auto pe = iter < kExaggerationIters ? p * kExaggeration : p;
        const auto num = off_diag / (1.0 + pairwise_sq_dist(y));
        const auto q = (num / num.sum()).clamp_min(1e-12);
        const auto w = (pe - q) * num;
        const auto grad = 4.0 * (w.sum(1, true) * y - w.matmul(y));
        const double momentum = iter < kExaggerationIters ? 0.5 : 0.8;
        const auto same_sign = (grad > 0) == (update > 0);
        gains = torch::where(same_sign, gains * 0.8, gains + 0.2).clamp_min(0.01);
        update = momentum * update - kLearningRate * gains * grad;
        y = y + update;
        y = y - y.mean(0, true);
    }
    return y;
}

auto silhouette_score(const torch::Tensor& points, const std::vector<int>& labels) -> double {
    require(points.dim() == 2 && points.size(0) == static_cast<std::int64_t>(labels.size()),
            "silhouette_score: points and labels must have equal length");
    const auto n = points.size(0);
    require(n >= 2, "silhouette_score: need at least 2 points");
    const auto d = torch::sqrt(pairwise_sq_dist(points.to(torch::kFloat64))).contiguous();
    auto acc = d.accessor<double, 2>();
    std::map<int, int> sizes;
    for (int l : labels) {
        ++sizes[l];
    }
    require(sizes.size() >= 2, "silhouette_score: need at least 2 clusters");
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        std::map<int, double> sums;
        for (std::int64_t j = 0; j < n; ++j) {
            if (j != i) {
                sums[labels[static_cast<std::size_t>(j)]] += acc[i][j];
            }
        }
        const int own = labels[static_cast<std::size_t>(i)];
        if (sizes[own] <= 1) {
            continue;
        }
        const double a = sums[own] / (sizes[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (const auto& [label, size] : sizes) {
            if (label != own) {
                b = std::min(b, sums[label] / size);
            }
        }
        const double denom = std::max(a, b);
        total += denom > 0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(n);
}

auto render_scatter(const torch::Tensor& points, const std::vector<int>& labels, int size) -> Image {
    require(points.dim() == 2 && points.size(1) == 2 && points.size(0) == static_cast<std::int64_t>(labels.size()),
            "render_scatter: expected (N, 2) points with one label each");
    static constexpr std::array<std::array<float, 3>, kNumGrades> kPalette{{
        {0.12F, 0.47F, 0.71F},
        {0.17F, 0.63F, 0.17F},
        {1.00F, 0.50F, 0.05F},
        {0.84F, 0.15F, 0.16F},
        {0.58F, 0.40F, 0.74F},
    }};
    auto canvas = torch::ones({3, size, size}, torch::kFloat32);
    auto c = canvas.accessor<float, 3>();
    const auto pts = points.to(torch::kFloat64).contiguous();
    const auto lo = std::get<0>(pts.min(0));
    const auto hi = std::get<0>(pts.max(0));
    const int margin = 12;
    for (std::int64_t i = 0; i < pts.size(0); ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        require(label >= 0 && label < kNumGrades, "render_scatter: label outside 0-4");
        int px[2];
        for (int k = 0; k < 2; ++k) {
            const double span = (hi[k] - lo[k]).item<double>();
            const double u = span > 0 ? (pts[i][k].item<double>() - lo[k].item<double>()) / span : 0.5;
            px[k] = margin + static_cast<int>(std::lround(u * (size - 1 - 2 * margin)));
        }
        for (int dy = -2; dy <= 2; ++dy) {
            for (int dx = -2; dx <= 2; ++dx) {
                const int row = size - 1 - (px[1] + dy);
                const int col = px[0] + dx;
                for (int ch = 0; ch < 3; ++ch) {
                    c[ch][row][col] = kPalette[static_cast<std::size_t>(label)][static_cast<std::size_t>(ch)];
                }
            }
        }
    }
    return canvas;
}

auto tsne_plot(const std::vector<FeatureVector>& features, const std::vector<int>& labels,
               const std::filesystem::path& out, const TsneOptions& options) -> TsnePlot {
    require(features.size() == labels.size(), "tsne_plot: " + std::to_string(features.size()) + " features vs " +
                                                  std::to_string(labels.size()) + " labels");
    require(features.size() >= 10, "tsne_plot: need at least 10 points");
    TsnePlot plot;
    plot.embedding = tsne_embed(torch::stack(features), options);
    plot.path = out;
    plot.points = static_cast<int>(features.size());
    write_png(out, render_scatter(plot.embedding, labels));
    return plot;
}

}  // namespace icrdn
