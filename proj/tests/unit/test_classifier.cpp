#include <cmath>
#include <random>

#include "testing.hpp"
#include "icrdn/classifier.hpp"
#include "icrdn/errors.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace icrdn;

TEST_CASE("two-stream features and grade probabilities") {
    const auto config = testutil::tiny_config();
    for (auto backbone : {Backbone::SmallCnn, Backbone::ResNet18}) {
        torch::manual_seed(1);
        auto model = make_classifier(config, backbone);
        const auto image = torch::rand({1, config.image_size, config.image_size});
        const auto p00 = extract_features(model, Branch::V00m, image);
        const auto p12 = extract_features(model, Branch::V12m, image);
        CHECK(p00.sizes() == torch::IntArrayRef({config.feature_dim}));
        CHECK(torch::equal(p00, extract_features(model, Branch::V00m, image)));
        const auto pred = predict_grade(model->head, p00, p12);
        double sum = 0.0;
        for (double p : pred.probs) {
            CHECK(p >= 0.0);
            sum += p;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        CHECK_THROWS_AS(extract_features(model, Branch::V00m, torch::rand({1, 8, 8})), ValidationError);
        CHECK_THROWS_AS(predict_grade(model->head, p00, p12.slice(0, 0, 2)), ValidationError);
    }
}

TEST_CASE("zeroed output layer gives uniform probabilities and grade 0") {
    torch::manual_seed(2);
    GradeHead head(4, 6, 0.5);
    {
        torch::NoGradGuard g;
        head->fc2->weight.zero_();
        head->fc2->bias.zero_();
    }
    const auto pred = predict_grade(head, torch::randn({4}), torch::randn({4}));
    for (double p : pred.probs) {
        CHECK(p == doctest::Approx(0.2));
    }
    CHECK(pred.grade == 0);
}

TEST_CASE("make_prediction picks the lowest index among maxima and is scale invariant") {
    CHECK(make_prediction(torch::tensor({0.1, 0.3, 0.3, 0.2, 0.1}, torch::kFloat64)).grade == 1);
    CHECK(make_prediction(torch::tensor({0.0, 0.0, 0.0, 0.0, 1.0}, torch::kFloat64)).grade == 4);
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = torch::rand({5}, torch::kFloat64);
        CHECK(make_prediction(p).grade == make_prediction(p * 7.5).grade);
        CHECK(make_prediction(p).grade == p.argmax().item<std::int64_t>());
    }
    CHECK_THROWS_AS(make_prediction(torch::ones({4})), ValidationError);
    CHECK_THROWS_AS(make_prediction(torch::tensor({-0.1, 0.3, 0.3, 0.3, 0.2})), ValidationError);
}

TEST_CASE("cross entropy closed forms and oracle") {
    GradePrediction uniform;
    uniform.probs.fill(0.2);
    CHECK(cross_entropy(uniform, 3) == doctest::Approx(std::log(5.0)));
    GradePrediction sure;
    sure.probs = {0.0, 0.0, 1.0, 0.0, 0.0};
    CHECK(cross_entropy(sure, 2) == 0.0);
    CHECK(std::isinf(cross_entropy(sure, 1)));
    CHECK_THROWS_AS(cross_entropy(uniform, 5), ValidationError);
    CHECK_THROWS_AS(cross_entropy(uniform, -1), ValidationError);

    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + trial % 9;
        const auto logits = oracle::random_mat(n, 5, rng, 3.0);
        std::vector<int> labels(n);
        std::vector<std::int64_t> labels64(n);
        for (std::size_t i = 0; i < n; ++i) {
            labels[i] = static_cast<int>(rng() % 5);
            labels64[i] = labels[i];
        }
        const auto t = torch::tensor(logits.v, torch::kFloat64).reshape({static_cast<std::int64_t>(n), 5});
        const double got = cross_entropy(t, torch::tensor(labels64)).item<double>();
        CHECK(oracle::rel_err(got, oracle::cross_entropy_logits(logits, labels)) < 1e-12);
        // per-row form through softmax probabilities
        const auto probs = torch::softmax(t[0], 0);
        const oracle::Vec pv(probs.data_ptr<double>(), probs.data_ptr<double>() + 5);
        CHECK(oracle::rel_err(cross_entropy(make_prediction(probs), labels[0]), oracle::cross_entropy(pv, labels[0])) <
              1e-12);
    }
    CHECK_THROWS_AS(cross_entropy(torch::zeros({2, 5}), torch::tensor({0, 7})), ValidationError);
    CHECK_THROWS_AS(cross_entropy(torch::zeros({2, 4}), torch::tensor({0, 1})), ValidationError);
}

TEST_CASE("grade head gradient matches finite differences") {
    torch::manual_seed(3);
    GradeHead head(3, 5, 0.5);
    head->to(torch::kFloat64);
    head->eval();
    const auto x = torch::randn({4, 6}, torch::kFloat64);
    const auto labels = torch::tensor({0, 2, 4, 1}, torch::kLong);
    head->zero_grad();
    cross_entropy(head->forward(x), labels).backward();
    for (auto& p : head->parameters()) {
        const auto flat = p.view(-1);
        const auto grad = p.grad().view(-1);
        for (std::int64_t i = 0; i < flat.numel(); ++i) {
            torch::NoGradGuard g;
            const double orig = flat[i].item<double>();
            const double h = 1e-4;
            flat[i] = orig + h;
            const double plus = cross_entropy(head->forward(x), labels).item<double>();
            flat[i] = orig - h;
            const double minus = cross_entropy(head->forward(x), labels).item<double>();
            flat[i] = orig;
            const double fd = (plus - minus) / (2 * h);
            CHECK(std::abs(fd - grad[i].item<double>()) <= 1e-4 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST_CASE("majority class accuracy") {
    std::vector<JointRecord> train(5), test(4);
    const int train_grades[] = {2, 2, 1, 1, 3};
    for (int i = 0; i < 5; ++i) {
        train[static_cast<std::size_t>(i)].kl_v12m = train_grades[i];
    }
    const int test_grades[] = {1, 1, 2, 0};
    for (int i = 0; i < 4; ++i) {
        test[static_cast<std::size_t>(i)].kl_v12m = test_grades[i];
    }
    // tie between 1 and 2 resolves to 1
    CHECK(majority_class_accuracy(train, test) == doctest::Approx(0.5));
}

TEST_CASE("train_and_evaluate") {
    auto config = testutil::tiny_config();
    config.classifier_epochs = 2;
    config.classifier_batch = 4;
    const auto splits = testutil::tiny_splits(config);

    SUBCASE("baseline-only mode is deterministic") {
        const auto a = train_and_evaluate(config, splits, {}, GradingMode::BaselineOnly, Backbone::SmallCnn);
        const auto b = train_and_evaluate(config, splits, {}, GradingMode::BaselineOnly, Backbone::SmallCnn);
        CHECK(a.loss_curve == b.loss_curve);
        CHECK(a.test_accuracy == b.test_accuracy);
        CHECK(a.loss_curve.size() == 2);
        CHECK(a.test_accuracy >= 0.0);
        CHECK(a.test_accuracy <= 1.0);
        CHECK(a.majority_fraction == doctest::Approx(majority_class_accuracy(splits.train, splits.test)));
    }
    SUBCASE("generated mode needs a follow-up for every joint") {
        JointImages followups;
        for (const auto& r : splits.train) {
            followups[r.key()] = r.image_v12m;
        }
        CHECK_THROWS_AS(train_and_evaluate(config, splits, followups, GradingMode::Generated, Backbone::SmallCnn),
                        DependencyError);
        for (const auto* set : {&splits.val, &splits.test}) {
            for (const auto& r : *set) {
                followups[r.key()] = r.image_v12m;
            }
        }
        const auto result = train_and_evaluate(config, splits, followups, GradingMode::Generated, Backbone::SmallCnn);
        CHECK(result.loss_curve.size() == 2);
    }
}

TEST_CASE("grade scorer") {
    auto config = testutil::tiny_config();
    const auto splits = testutil::tiny_splits(config);
    auto result = train_grade_scorer(config, splits);
    std::vector<Image> images;
    for (const auto& r : splits.test) {
        images.push_back(r.image_v12m);
    }
    const auto probs = scorer_probabilities(result.model, images);
    CHECK(probs.sizes() == torch::IntArrayRef({static_cast<std::int64_t>(images.size()), 5}));
    CHECK((probs.scalar_type() == torch::kFloat64));
    CHECK(torch::allclose(probs.sum(1), torch::ones({probs.size(0)}, torch::kFloat64)));
    const auto feats = scorer_features(result.model, images);
    CHECK(feats.size(0) == probs.size(0));
    CHECK(torch::equal(feats, scorer_features(result.model, images)));
}
