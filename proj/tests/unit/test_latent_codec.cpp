#include <random>

#include "testing.hpp"
#include "icrdn/errors.hpp"
#include "icrdn/latent_codec.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace icrdn;

TEST_CASE("encode produces the downsampled latent shape") {
    const auto config = preset_config("desk");
    torch::manual_seed(0);
    auto codec = make_codec(config);
    const auto image = torch::rand({1, 64, 64});
    const auto z = encode(codec, image);
    CHECK(z.sizes() == torch::IntArrayRef({4, 16, 16}));
    CHECK(torch::equal(z, encode(codec, image)));
    CHECK_THROWS_AS(encode(codec, torch::rand({1, 60, 60})), ValidationError);
    CHECK_THROWS_AS(VqCodec(1, 66, 4, 4, 16, 16, 0.25), ValidationError);
}

TEST_CASE("decode round-trips shape for several sizes and stays finite") {
    for (int size : {32, 64, 128}) {
        torch::manual_seed(size);
        VqCodec codec(1, size, 4, 4, 16, 8, 0.25);
        const auto z = encode(codec, torch::rand({1, size, size}));
        const auto image = decode(codec, z);
        CHECK(image.sizes() == torch::IntArrayRef({1, size, size}));
        const auto zero = decode(codec, torch::zeros({4, size / 4, size / 4}));
        CHECK(torch::isfinite(zero).all().item<bool>());
        CHECK(zero.min().item<double>() >= 0.0);
        CHECK(zero.max().item<double>() <= 1.0);
        CHECK_THROWS_AS(decode(codec, torch::zeros({3, size / 4, size / 4})), ValidationError);
    }
}

TEST_CASE("quantize closed forms") {
    const auto codebook = torch::tensor({{0.0, 1.0}, {2.0, -1.0}, {0.5, 0.5}}, torch::kFloat64);
    const auto latent = codebook[1].reshape({2, 1, 1}).expand({2, 3, 4}).contiguous();
    const auto q = quantize(latent, codebook, 0.25);
    CHECK((q.indices == 1).all().item<bool>());
    CHECK(q.vq_loss.item<double>() == 0.0);
    CHECK(torch::equal(q.quantized, latent));

    const auto binary = torch::tensor({{0.0}, {1.0}}, torch::kFloat64);
    CHECK(quantize(torch::full({1, 1, 1}, 0.4, torch::kFloat64), binary, 0.25).indices.item<std::int64_t>() == 0);
    CHECK(quantize(torch::full({1, 1, 1}, 0.6, torch::kFloat64), binary, 0.25).indices.item<std::int64_t>() == 1);
    CHECK_THROWS_AS(quantize(torch::zeros({3, 2, 2}), codebook, 0.25), ValidationError);
}

TEST_CASE("quantize matches exhaustive nearest-neighbour search") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t channels = 1 + trial % 4;
        const auto book = oracle::random_mat(16, channels, rng);
        const auto codebook = torch::tensor(book.v, torch::kFloat64).reshape({16, static_cast<std::int64_t>(channels)});
        const auto latent = torch::randn({2, static_cast<std::int64_t>(channels), 3, 3}, torch::kFloat64);
        const auto q = quantize(latent, codebook, 0.25);
        const auto flat = latent.permute({0, 2, 3, 1}).reshape({-1, static_cast<std::int64_t>(channels)}).contiguous();
        const auto idx = q.indices.flatten();
        const double* data = flat.data_ptr<double>();
        for (std::int64_t i = 0; i < flat.size(0); ++i) {
            CHECK(idx[i].item<std::int64_t>() == oracle::nearest(data + i * static_cast<std::int64_t>(channels), book));
        }
        // every quantised vector is a codebook entry, and re-quantising is idempotent
        CHECK(torch::allclose(q.quantized.permute({0, 2, 3, 1}).reshape({-1, static_cast<std::int64_t>(channels)}),
                              codebook.index_select(0, idx), 0.0, 1e-12));
        CHECK(torch::equal(quantize(q.quantized, codebook, 0.25).indices, q.indices));
    }
}

TEST_CASE("gradients pass straight through the quantiser") {
    const auto codebook = torch::randn({8, 2}, torch::kFloat64);
    auto z = torch::randn({2, 4, 4}, torch::kFloat64).requires_grad_(true);
    const auto q = quantize(z, codebook, 0.25);
    const auto loss = q.quantized.pow(2).sum();
    loss.backward();
    CHECK(z.grad().abs().sum().item<double>() > 0.0);
    // forward value of the straight-through output is 2 e, the gradient of sum(e^2)
    CHECK(torch::allclose(z.grad(), 2.0 * q.quantized.detach()));
}

TEST_CASE("psnr") {
    const auto a = torch::zeros({1, 4, 4});
    CHECK(psnr(a, a + 0.1) == doctest::Approx(20.0).epsilon(1e-6));
    CHECK(psnr(a, a + 0.01) == doctest::Approx(40.0).epsilon(1e-6));
}

TEST_CASE("train_codec improves reconstruction and reports usage") {
    auto config = testutil::tiny_config();
    config.codec_epochs = 2;
    const auto splits = testutil::tiny_splits(config);
    int hooks = 0;
    auto result = train_codec(config, splits, [&](int epoch, VqCodec&) { CHECK(epoch == hooks++); });
    CHECK(hooks == 2);
    CHECK(result.loss_curve.size() == 2);
    CHECK(result.final.l1 < result.initial.l1);
    CHECK(result.final.codebook_usage > 0.0);
    CHECK(result.final.codebook_usage <= 1.0);

    // a one-pixel change moves the latent of the trained codec
    const auto image = splits.test.front().image_v00m;
    auto changed = image.clone();
    changed[0][16][16] = 1.0F - changed[0][16][16].item<float>();
    CHECK_FALSE(torch::equal(encode(result.codec, image), encode(result.codec, changed)));
}
