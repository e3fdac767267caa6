#include <doctest.h>

#include <cmath>

#include "focc/encoder.hpp"

using namespace focc;

namespace {

double max_abs(const Tensor &t) {
    double m = 0;
    for (double v : t.data()) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace

TEST_CASE("backbone produces the four pyramid scales on 64x64 input") {
    ParamRegistry reg;
    Rng rng(1);
    ImageEncoder enc(reg, "encoder.", toy_encoder_config(), rng);

    Tensor images = Tensor::uniform({2, 3, 64, 64}, 0.0, 1.0, rng);
    auto scales = enc.backbone(images, true);
    REQUIRE(scales.size() == 4);
    CHECK(scales[0].shape() == Shape{2, 8, 16, 16});
    CHECK(scales[1].shape() == Shape{2, 12, 8, 8});
    CHECK(scales[2].shape() == Shape{2, 34, 4, 4});
    CHECK(scales[3].shape() == Shape{2, 96, 2, 2});

    Tensor fused = enc.fpn_fuse(scales, true);
    CHECK(fused.shape() == Shape{2, 64, 4, 4});
    CHECK(enc.fused_channels() == 4 + 6 + 16 + 38);
}

TEST_CASE("indivisible image extents are rejected") {
    ParamRegistry reg;
    Rng rng(2);
    ImageEncoder enc(reg, "encoder.", toy_encoder_config(), rng);
    CHECK_THROWS_AS(enc.backbone(Tensor::zeros({1, 3, 60, 64}), true), ConfigError);
    CHECK_THROWS_AS(enc.backbone(Tensor::zeros({1, 3, 64, 48}), true), ConfigError);
    CHECK_THROWS_AS(enc.backbone(Tensor::zeros({1, 4, 64, 64}), true), ShapeError);
}

TEST_CASE("fused width tracks the neck widths for any config") {
    EncoderConfig cfg;
    cfg.backbone_widths = {4, 6, 8, 10};
    cfg.neck_widths = {2, 3, 5, 7};
    ParamRegistry reg;
    Rng rng(3);
    ImageEncoder enc(reg, "e.", cfg, rng);
    Tensor fused = enc.encode(Tensor::uniform({1, 3, 32, 32}, 0.0, 1.0, rng), true);
    CHECK(fused.shape() == Shape{1, 17, 2, 2});
}

TEST_CASE("zero image still yields deterministic nonzero features") {
    ParamRegistry reg;
    Rng rng(4);
    ImageEncoder enc(reg, "encoder.", toy_encoder_config(), rng);
    // one training pass to populate batch-norm running stats
    enc.encode(Tensor::uniform({2, 3, 64, 64}, 0.0, 1.0, rng), true);

    Tensor a = enc.encode(Tensor::zeros({2, 3, 64, 64}), false);
    Tensor b = enc.encode(Tensor::zeros({2, 3, 64, 64}), false);
    CHECK(max_abs(a) > 0); // conv biases survive the normalization in eval mode
    bool identical = true;
    for (int i = 0; i < a.numel(); ++i)
        identical = identical && a.data()[i] == b.data()[i];
    CHECK(identical);
}

TEST_CASE("frozen encoding needs loaded weights and never builds gradients") {
    ParamRegistry reg;
    Rng rng(5);
    ImageEncoder enc(reg, "encoder.", toy_encoder_config(), rng);
    Tensor images = Tensor::uniform({2, 3, 64, 64}, 0.0, 1.0, rng);
    enc.encode(images, true); // stand-in for pretraining

    CHECK_THROWS_AS(enc.encode_frozen(images), ConfigError);
    enc.mark_pretrained();

    uint64_t before = reg.checksum("encoder.");
    Tensor out = enc.encode_frozen(images);
    CHECK(out.shape() == Shape{2, 64, 4, 4});
    CHECK(!out.requires_grad()); // graph recording was off end to end
    CHECK(reg.checksum("encoder.") == before);

    Tensor again = enc.encode_frozen(images);
    bool identical = true;
    for (int i = 0; i < out.numel(); ++i)
        identical = identical && out.data()[i] == again.data()[i];
    CHECK(identical);
}

TEST_CASE("gradients flow to encoder weights in training mode") {
    ParamRegistry reg;
    Rng rng(6);
    ImageEncoder enc(reg, "encoder.", toy_encoder_config(), rng);
    Tensor images = Tensor::uniform({1, 3, 32, 32}, 0.0, 1.0, rng);
    Tensor loss = mean(mul(enc.encode(images, true), enc.encode(images, true)));
    // two encodes share weights; backward must reach every trainable param
    loss.backward();
    int with_grad = 0, total = 0;
    for (const auto &e : reg.trainable_with_prefix("encoder.")) {
        ++total;
        if (e.tensor.has_grad()) ++with_grad;
    }
    CHECK(total > 0);
    CHECK(with_grad == total);
}

TEST_CASE("full-scale preset fuses to 256 channels at 1/16 of 256x704") {
    ParamRegistry reg;
    Rng rng(7);
    ImageEncoder enc(reg, "encoder.", full_scale_encoder_config(), rng);
    NoGradGuard guard;
    Tensor fused = enc.encode(Tensor::zeros({1, 3, 256, 704}), true);
    CHECK(fused.shape() == Shape{1, 256, 16, 44});
    CHECK(enc.fused_channels() == 256);
}
