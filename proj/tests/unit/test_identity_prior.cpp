#include <map>
#include <random>

#include "testing.hpp"
#include "icrdn/errors.hpp"
#include "icrdn/identity_prior.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace icrdn;

namespace {

auto to_tensor(const oracle::Mat& m) -> torch::Tensor {
    return torch::tensor(m.v, torch::kFloat64).reshape({static_cast<std::int64_t>(m.rows), static_cast<std::int64_t>(m.cols)});
}

}  // namespace

TEST_CASE("embed_identity shape, determinism and validation") {
    const auto config = preset_config("desk");
    torch::manual_seed(1);
    auto model = make_identity_encoder(config);
    const auto image = torch::rand({1, 64, 64});
    const auto a = embed_identity(model, image);
    const auto b = embed_identity(model, image);
    CHECK(a.sizes() == torch::IntArrayRef({128}));
    CHECK(torch::equal(a, b));
    CHECK(torch::isfinite(a).all().item<bool>());
    CHECK_THROWS_AS(embed_identity(model, torch::rand({1, 32, 32})), ValidationError);
    CHECK_THROWS_AS(embed_identity(model, torch::rand({3, 64, 64})), ValidationError);
}

TEST_CASE("triplet_loss closed forms") {
    const auto a = torch::zeros({3}, torch::kFloat64);
    const auto n = torch::tensor({2.0, 0.0, 0.0}, torch::kFloat64);
    CHECK(triplet_loss(a, a, n, 1.0).item<double>() == 0.0);
    CHECK(triplet_loss(a, n, a, 1.0).item<double>() == 5.0);
    CHECK_THROWS_AS(triplet_loss(a, torch::zeros({4}, torch::kFloat64), n, 1.0), ValidationError);
    CHECK_THROWS_AS(triplet_loss(a, a, n, -0.1), ValidationError);
}

TEST_CASE("triplet_loss matches the brute-force oracle") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t rows = 1 + trial % 6;
        const std::size_t d = trial < 100 ? 3 : 1 + trial % 9;
        const double margin = trial < 100 ? 0.3 : std::uniform_real_distribution<double>(0.0, 2.0)(rng);
        const auto a = oracle::random_mat(rows, d, rng), p = oracle::random_mat(rows, d, rng),
                   n = oracle::random_mat(rows, d, rng);
        const double expected = oracle::triplet_loss(a, p, n, margin);
        const double got = triplet_loss(to_tensor(a), to_tensor(p), to_tensor(n), margin).item<double>();
        if (expected == 0.0) {
            CHECK(got == 0.0);
        } else {
            CHECK(oracle::rel_err(got, expected) <= 1e-9);
        }
    }
}

TEST_CASE("triplet_loss properties") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = to_tensor(oracle::random_mat(10, 4, rng));
        const auto p = to_tensor(oracle::random_mat(10, 4, rng));
        const auto n = to_tensor(oracle::random_mat(10, 4, rng));
        const double loss = triplet_loss(a, p, n, 0.5).item<double>();
        CHECK(loss >= 0.0);
        const auto perm = torch::randperm(10, torch::kInt64);
        CHECK(triplet_loss(a.index_select(0, perm), p.index_select(0, perm), n.index_select(0, perm), 0.5)
                  .item<double>() == doctest::Approx(loss).epsilon(1e-12));
        // zero iff every triplet already satisfies the margin
        const bool satisfied = (((a - n).pow(2).sum(1) - (a - p).pow(2).sum(1)) >= 0.0).all().item<bool>();
        CHECK((triplet_loss(a, p, n, 0.0).item<double>() == 0.0) == satisfied);
    }
}

TEST_CASE("triplet_loss gradient matches central differences") {
    std::mt19937_64 rng(11);
    int checked = 0;
    while (checked < 100) {
        auto a = to_tensor(oracle::random_mat(1, 5, rng)).squeeze(0).requires_grad_(true);
        const auto p = to_tensor(oracle::random_mat(1, 5, rng)).squeeze(0);
        const auto n = to_tensor(oracle::random_mat(1, 5, rng)).squeeze(0);
        const double margin = 1.0;
        auto loss = triplet_loss(a, p, n, margin);
        if (std::abs(((a - p).pow(2).sum() - (a - n).pow(2).sum() + margin).item<double>()) < 1e-3) {
            continue;  // kink
        }
        loss.backward();
        const auto grad = a.grad().clone();
        const double h = 1e-6;
        for (int i = 0; i < 5; ++i) {
            auto plus = a.detach().clone();
            auto minus = a.detach().clone();
            plus[i] += h;
            minus[i] -= h;
            const double fd =
                (triplet_loss(plus, p, n, margin).item<double>() - triplet_loss(minus, p, n, margin).item<double>()) /
                (2 * h);
            const double an = grad[i].item<double>();
            CHECK(std::abs(an - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
        }
        ++checked;
    }
}

TEST_CASE("sample_triplets") {
    const auto records = generate_dataset(30, 0.2, 3, 32);
    SUBCASE("exact count and identity invariants") {
        const auto triplets = sample_triplets(records, 7000, 1);
        CHECK(triplets.size() == 7000);
        std::map<JointKey, int> anchors;
        for (const auto& t : triplets) {
            CHECK(t.anchor_key != t.negative_key);
            CHECK(t.anchor_key.subject_id != t.negative_key.subject_id);
            ++anchors[t.anchor_key];
        }
        CHECK(anchors.size() == records.size());
        for (const auto& [key, count] : anchors) {
            CHECK(count > 7000 / 60 / 2);
            CHECK(count < 7000 / 60 * 2);
        }
        const auto again = sample_triplets(records, 7000, 1);
        CHECK(again.front().anchor_key == triplets.front().anchor_key);
        CHECK(again.back().negative_key == triplets.back().negative_key);
    }
    SUBCASE("two joints force the negative") {
        std::vector<JointRecord> two{records[0], records[2]};
        for (const auto& t : sample_triplets(two, 10, 4)) {
            CHECK(t.negative_key == (t.anchor_key == two[0].key() ? two[1].key() : two[0].key()));
        }
    }
    SUBCASE("too few joints") {
        CHECK_THROWS_AS(sample_triplets({records[0]}, 5, 1), ValidationError);
        CHECK_THROWS_AS(sample_triplets({records[0], records[1]}, 5, 1), ValidationError);  // same subject
        CHECK(sample_triplets({records[0], records[1]}, 5, 1, true).size() == 5);
    }
}

TEST_CASE("verification_accuracy edge cases") {
    const auto config = testutil::tiny_config();
    const auto records = generate_dataset(6, 0.2, 3, 32);
    const auto triplets = sample_triplets(records, 40, 2);
    SUBCASE("constant encoder scores zero") {
        auto model = make_identity_encoder(config);
        torch::NoGradGuard no_grad;
        for (auto& p : model->parameters()) {
            p.zero_();
        }
        CHECK(verification_accuracy(model, triplets) == 0.0);
    }
    SUBCASE("positive equal to anchor scores one") {
        auto model = make_identity_encoder(config);
        auto same = triplets;
        for (auto& t : same) {
            t.positive = t.anchor;
        }
        CHECK(verification_accuracy(model, same) == 1.0);
    }
    SUBCASE("empty list") {
        auto model = make_identity_encoder(config);
        CHECK_THROWS_AS(verification_accuracy(model, {}), ValidationError);
    }
}

TEST_CASE("train_identity_prior reports and diverges loudly") {
    auto config = testutil::tiny_config();
    const auto splits = testutil::tiny_splits(config);
    const auto result = train_identity_prior(config, splits);
    CHECK(result.batch_size == config.identity_batch);
    CHECK(result.train_triplets == config.triplet_count_train);
    CHECK(result.eval_triplets == config.triplet_count_eval);
    CHECK(result.loss_curve.size() == static_cast<std::size_t>(config.identity_epochs));
    CHECK(std::isfinite(result.final_train_loss));
    CHECK(result.untrained_min <= result.untrained_accuracy);
    CHECK(result.untrained_accuracy <= result.untrained_max);
    const auto again = train_identity_prior(config, splits);
    CHECK(again.final_train_loss == result.final_train_loss);
    CHECK(again.verification_accuracy == result.verification_accuracy);

    config.identity_lr = 1e30;
    config.identity_epochs = 3;
    CHECK_THROWS_AS(train_identity_prior(config, splits), TrainingError);
}
