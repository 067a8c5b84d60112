// Exercises the shared library through its C interface only.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstring>
#include <filesystem>
#include <random>
#include <string>

#include "doctest.h"
#include "icrdn/icrdn.h"
#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

struct ConfigHandle {
    icrdn_config* ptr = nullptr;
    ~ConfigHandle() { icrdn_config_free(ptr); }
};

auto take(char* text) -> std::string {
    std::string s = text != nullptr ? text : "";
    icrdn_string_free(text);
    return s;
}

}  // namespace

TEST_CASE("status names and errors") {
    CHECK(std::string(icrdn_status_name(ICRDN_OK)) == "ok");
    CHECK(std::string(icrdn_status_name(ICRDN_ERR_DEPENDENCY)) == "dependency error");
    ConfigHandle c;
    CHECK(icrdn_config_parse("not_a_key = 3\n", &c.ptr) == ICRDN_ERR_CONFIG);
    CHECK(c.ptr == nullptr);
    CHECK(std::string(icrdn_last_error()).find("not_a_key") != std::string::npos);
    CHECK(icrdn_config_load("/nonexistent/x.cfg", &c.ptr) != ICRDN_OK);
    CHECK(icrdn_config_preset("nope", &c.ptr) == ICRDN_ERR_CONFIG);
    icrdn_stage stage{};
    CHECK(icrdn_parse_stage("eval", &stage) == ICRDN_OK);
    CHECK(stage == ICRDN_STAGE_EVAL);
    CHECK(icrdn_parse_stage("bogus", &stage) == ICRDN_ERR_CONFIG);
}

TEST_CASE("config handles") {
    ConfigHandle a, b;
    REQUIRE(icrdn_config_preset("desk", &a.ptr) == ICRDN_OK);
    char hash_a[17], hash_b[17];
    REQUIRE(icrdn_config_hash(a.ptr, hash_a, sizeof hash_a) == ICRDN_OK);
    CHECK(std::strlen(hash_a) == 16);
    CHECK(icrdn_config_hash(a.ptr, hash_b, 8) == ICRDN_ERR_VALIDATION);

    char* text = nullptr;
    REQUIRE(icrdn_config_serialize(a.ptr, &text) == ICRDN_OK);
    REQUIRE(icrdn_config_parse(take(text).c_str(), &b.ptr) == ICRDN_OK);
    REQUIRE(icrdn_config_hash(b.ptr, hash_b, sizeof hash_b) == ICRDN_OK);
    CHECK(std::string(hash_a) == hash_b);

    CHECK(icrdn_config_set(b.ptr, "rng_seed", "9") == ICRDN_OK);
    icrdn_config_hash(b.ptr, hash_b, sizeof hash_b);
    CHECK(std::string(hash_a) != hash_b);
    CHECK(icrdn_config_set(b.ptr, "beta_start", "0.5") == ICRDN_ERR_VALIDATION);
    CHECK(icrdn_config_set(b.ptr, "missing", "1") == ICRDN_ERR_CONFIG);
}

TEST_CASE("numerical kernels agree with the oracles") {
    std::mt19937_64 rng(12);
    SUBCASE("noise schedule") {
        std::vector<double> ab(50);
        REQUIRE(icrdn_noise_schedule(50, 1e-4, 0.02, ab.data()) == ICRDN_OK);
        const auto ref = oracle::alpha_bar(50, 1e-4, 0.02);
        for (std::size_t t = 0; t < 50; ++t) {
            CHECK(oracle::rel_err(ab[t], ref[t]) < 1e-12);
        }
        CHECK(icrdn_noise_schedule(50, 0.02, 1e-4, ab.data()) == ICRDN_ERR_VALIDATION);
    }
    SUBCASE("triplet loss") {
        const auto a = oracle::random_mat(9, 4, rng), p = oracle::random_mat(9, 4, rng), n = oracle::random_mat(9, 4, rng);
        double out = 0.0;
        REQUIRE(icrdn_triplet_loss(a.v.data(), p.v.data(), n.v.data(), 9, 4, 0.3, &out) == ICRDN_OK);
        CHECK(oracle::rel_err(out, oracle::triplet_loss(a, p, n, 0.3)) < 1e-12);
    }
    SUBCASE("cross entropy") {
        const double probs[5] = {0.1, 0.2, 0.3, 0.25, 0.15};
        double out = 0.0;
        REQUIRE(icrdn_cross_entropy(probs, 2, &out) == ICRDN_OK);
        CHECK(out == doctest::Approx(-std::log(0.3)));
        CHECK(icrdn_cross_entropy(probs, 5, &out) == ICRDN_ERR_VALIDATION);
    }
    SUBCASE("inception score") {
        oracle::Mat p(40, 5);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t i = 0; i < 40; ++i) {
            double s = 0.0;
            for (std::size_t y = 0; y < 5; ++y) {
                s += (p(i, y) = u(rng));
            }
            for (std::size_t y = 0; y < 5; ++y) {
                p(i, y) /= s;
            }
        }
        double out = 0.0;
        REQUIRE(icrdn_inception_score(p.v.data(), 40, 5, 4, &out) == ICRDN_OK);
        CHECK(oracle::rel_err(out, oracle::inception_score(p, 4)) < 1e-10);
        CHECK(icrdn_inception_score(p.v.data(), 40, 5, 41, &out) == ICRDN_ERR_VALIDATION);
    }
    SUBCASE("identity consistency") {
        const auto b = oracle::random_mat(12, 3, rng);
        auto g = b;
        std::normal_distribution<double> noise(0.0, 0.7);
        for (auto& x : g.v) {
            x += noise(rng);
        }
        double out = 0.0;
        REQUIRE(icrdn_identity_consistency(b.v.data(), g.v.data(), 12, 3, &out) == ICRDN_OK);
        CHECK(out == doctest::Approx(oracle::rank1(b, g)));
    }
}

TEST_CASE("runs a stage and reports through the C interface") {
    const auto root = fs::temp_directory_path() / "icrdn_c_api_runs";
    fs::remove_all(root);
    ConfigHandle c;
    REQUIRE(icrdn_config_load((fs::path(ICRDN_SOURCE_DIR) / "configs" / "smoke.cfg").c_str(), &c.ptr) == ICRDN_OK);
    char* report = nullptr;
    CHECK(icrdn_run_stage(c.ptr, ICRDN_STAGE_IDENTITY, 0, root.c_str(), 0, &report) == ICRDN_ERR_DEPENDENCY);
    REQUIRE(icrdn_run_stage(c.ptr, ICRDN_STAGE_DATA, 0, root.c_str(), 0, &report) == ICRDN_OK);
    CHECK(take(report).find("\"train_joints\"") != std::string::npos);

    char hash[17];
    icrdn_config_hash(c.ptr, hash, sizeof hash);
    char* metrics = nullptr;
    REQUIRE(icrdn_report(root.c_str(), hash, &metrics) == ICRDN_OK);
    CHECK(take(metrics).find("\"data.train_joints\"") != std::string::npos);
    CHECK(icrdn_report(root.c_str(), "0000000000000000", &metrics) == ICRDN_ERR_IO);
    fs::remove_all(root);
}
