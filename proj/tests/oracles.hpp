#pragma once

// Plain-loop reference implementations used as test oracles. They share no
// code with the library.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
// Row-major matrix.
struct Mat {
    std::size_t rows = 0, cols = 0;
    Vec v;
    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
    auto operator()(std::size_t r, std::size_t c) -> double& { return v[r * cols + c]; }
    auto operator()(std::size_t r, std::size_t c) const -> double { return v[r * cols + c]; }
};

inline auto random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) -> Mat {
    std::normal_distribution<double> n(0.0, scale);
    Mat m(r, c);
    for (auto& x : m.v) {
        x = n(rng);
    }
    return m;
}

inline auto sq_dist(const double* a, const double* b, std::size_t d) -> double {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return s;
}

// Sum over rows of max(0, |a-p|^2 - |a-n|^2 + margin).
inline auto triplet_loss(const Mat& a, const Mat& p, const Mat& n, double margin) -> double {
    double total = 0.0;
    for (std::size_t r = 0; r < a.rows; ++r) {
        const double h = sq_dist(&a.v[r * a.cols], &p.v[r * a.cols], a.cols) -
                         sq_dist(&a.v[r * a.cols], &n.v[r * a.cols], a.cols) + margin;
        total += h > 0.0 ? h : 0.0;
    }
    return total;
}

inline auto matmul(const Mat& a, const Mat& b) -> Mat {
    Mat out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) {
                s += a(i, k) * b(k, j);
            }
            out(i, j) = s;
        }
    }
    return out;
}

struct Attention {
    Mat output;
    Mat weights;
};

// softmax((F Mq)(C Mk)^T / sqrt(d_attn)) (C Mv), scalar loops.
inline auto cross_attention(const Mat& features, const Mat& context, const Mat& mq, const Mat& mk, const Mat& mv)
    -> Attention {
    const Mat q = matmul(features, mq);
    const Mat k = matmul(context, mk);
    const Mat v = matmul(context, mv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(mq.cols));
    Attention out{Mat(q.rows, v.cols), Mat(q.rows, k.rows)};
    for (std::size_t i = 0; i < q.rows; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < k.rows; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < q.cols; ++c) {
                s += q(i, c) * k(j, c);
            }
            out.weights(i, j) = s * scale;
            mx = std::max(mx, out.weights(i, j));
        }
        double z = 0.0;
        for (std::size_t j = 0; j < k.rows; ++j) {
            out.weights(i, j) = std::exp(out.weights(i, j) - mx);
            z += out.weights(i, j);
        }
        for (std::size_t j = 0; j < k.rows; ++j) {
            out.weights(i, j) /= z;
        }
        for (std::size_t c = 0; c < v.cols; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < k.rows; ++j) {
                s += out.weights(i, j) * v(j, c);
            }
            out.output(i, c) = s;
        }
    }
    return out;
}

// Linear betas and alpha_bar via a Kahan-compensated log-space sum.
inline auto alpha_bar(int steps, double beta_start, double beta_end) -> Vec {
    Vec out(static_cast<std::size_t>(steps));
    double sum = 0.0, comp = 0.0;
    for (int t = 0; t < steps; ++t) {
        const double beta =
            steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(t) / (steps - 1);
        const double y = std::log1p(-beta) - comp;
        const double s = sum + y;
        comp = (s - sum) - y;
        sum = s;
        out[static_cast<std::size_t>(t)] = std::exp(sum);
    }
    return out;
}

inline auto forward_diffuse(const Vec& z0, const Vec& eps, double alpha_bar_t) -> Vec {
    Vec out(z0.size());
    for (std::size_t i = 0; i < z0.size(); ++i) {
        out[i] = std::sqrt(alpha_bar_t) * z0[i] + std::sqrt(1.0 - alpha_bar_t) * eps[i];
    }
    return out;
}

inline auto cross_entropy(const Vec& probs, int label) -> double { return -std::log(probs[static_cast<std::size_t>(label)]); }

// Summed CE of logits rows.
inline auto cross_entropy_logits(const Mat& logits, const std::vector<int>& labels) -> double {
    double total = 0.0;
    for (std::size_t r = 0; r < logits.rows; ++r) {
        double mx = -INFINITY;
        for (std::size_t c = 0; c < logits.cols; ++c) {
            mx = std::max(mx, logits(r, c));
        }
        double z = 0.0;
        for (std::size_t c = 0; c < logits.cols; ++c) {
            z += std::exp(logits(r, c) - mx);
        }
        total += -(logits(r, static_cast<std::size_t>(labels[r])) - mx - std::log(z));
    }
    return total;
}

// exp(mean_i sum_y p(y|x_i) log(p(y|x_i) / p(y))) per split, averaged.
inline auto inception_score(const Mat& p, int splits) -> double {
    double total = 0.0;
    const auto n = p.rows;
    for (int s = 0; s < splits; ++s) {
        const std::size_t b = n * static_cast<std::size_t>(s) / static_cast<std::size_t>(splits);
        const std::size_t e = n * static_cast<std::size_t>(s + 1) / static_cast<std::size_t>(splits);
        Vec marginal(p.cols, 0.0);
        for (std::size_t i = b; i < e; ++i) {
            for (std::size_t y = 0; y < p.cols; ++y) {
                marginal[y] += p(i, y);
            }
        }
        for (auto& m : marginal) {
            m /= static_cast<double>(e - b);
        }
        double kl_sum = 0.0;
        for (std::size_t i = b; i < e; ++i) {
            double kl = 0.0;
            for (std::size_t y = 0; y < p.cols; ++y) {
                if (p(i, y) > 0.0) {
                    kl += p(i, y) * (std::log(p(i, y)) - std::log(marginal[y]));
                }
            }
            kl_sum += kl;
        }
        total += std::exp(kl_sum / static_cast<double>(e - b));
    }
    return total / splits;
}

// Index of the nearest codebook row (lowest index on ties).
inline auto nearest(const double* x, const Mat& codebook) -> std::int64_t {
    std::int64_t best = 0;
    double best_d = INFINITY;
    for (std::size_t k = 0; k < codebook.rows; ++k) {
        const double d = sq_dist(x, &codebook.v[k * codebook.cols], codebook.cols);
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::int64_t>(k);
        }
    }
    return best;
}

// Fraction of rows whose generated vector is strictly nearer its own
// baseline than every other baseline.
inline auto rank1(const Mat& baselines, const Mat& generated) -> double {
    int hits = 0;
    for (std::size_t i = 0; i < generated.rows; ++i) {
        const double own = sq_dist(&generated.v[i * generated.cols], &baselines.v[i * baselines.cols], baselines.cols);
        bool ok = true;
        for (std::size_t j = 0; j < baselines.rows && ok; ++j) {
            if (j != i && sq_dist(&generated.v[i * generated.cols], &baselines.v[j * baselines.cols], baselines.cols) <= own) {
                ok = false;
            }
        }
        hits += ok ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(generated.rows);
}

inline auto rel_err(double a, double b) -> double {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace oracle
