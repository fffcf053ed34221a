// UNet and garment-fusion behavior: the token-sequence fused attention
// against a naive concatenate-attend-crop reference, zero-initialised stem
// channels, the garment feature stack, attention capture, and the
// forward-pass counters.

#include <doctest.h>

#include "attn_reference.hpp"
#include "ootd/errors.hpp"
#include "ootd/ootdnet.hpp"
#include "ootd/rng.hpp"

using namespace ootd;

namespace {

UNetConfig denoiser_cfg() {
    UNetConfig c;
    c.in_ch = 8;
    c.out_ch = 4;
    c.base = 32;
    c.zero_init_in_ch = 4;
    return c;
}

UNetConfig garment_cfg() {
    UNetConfig c;
    c.in_ch = 4;
    c.out_ch = 4;
    c.base = 32;
    return c;
}

}  // namespace

TEST_CASE("fuse_concat places the body map left and the garment map right") {
    Tensor xn({2, 2, 3}), gn({2, 2, 3});
    for (size_t i = 0; i < xn.size(); ++i) xn.at(i) = (float)i;
    for (size_t i = 0; i < gn.size(); ++i) gn.at(i) = 100.0f + (float)i;
    Tensor both = fuse_concat(xn, gn);
    REQUIRE(both.shape() == Shape{2, 2, 6});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 3; ++x) {
                CHECK(both.at(c, y, x) == xn.at(c, y, x));
                CHECK(both.at(c, y, 3 + x) == gn.at(c, y, x));
            }
    CHECK_THROWS_AS(fuse_concat(xn, Tensor({2, 2, 4})), FusionError);
    CHECK_THROWS_AS(fuse_concat(xn, Tensor({3, 2, 3})), FusionError);
}

TEST_CASE("fused attention equals naive concat-attend-crop") {
    Rng root(2024);
    int shapes = 0;
    double worst = 0;
    const int cs[] = {2, 4, 6, 8};
    for (int c : cs)
        for (int h = 1; h <= 4; h += 3)
            for (int w = 2; w <= 4; w += 2) {
                Rng r = root.fork(shapes);
                int heads = (c % 4 == 0) ? 4 : 2;
                SelfAttnWeights wts = ref::random_attn_weights(c, heads, r.fork("w"));
                Tensor xn = normal<float>(r.fork("x"), {c, h, w});
                Tensor gn = normal<float>(r.fork("g"), {c, h, w});
                Tensor got = self_attention_fused(wts, xn, &gn);
                Tensor want = ref::fused_attention(wts, xn, gn);
                worst = std::max(worst, ref::max_abs_diff(got, want));
                ++shapes;
            }
    CHECK(shapes == 16);
    CHECK(worst <= 1e-5);
}

TEST_CASE("unfused attention equals the plain full-attention reference") {
    Rng r(77);
    SelfAttnWeights wts = ref::random_attn_weights(4, 2, r.fork("w"));
    Tensor xn = normal<float>(r.fork("x"), {4, 3, 3});
    const Tensor* no_garment = nullptr;
    Tensor got = self_attention_fused(wts, xn, no_garment);
    Tensor want = ref::full_attention(wts, xn);
    CHECK(ref::max_abs_diff(got, want) <= 1e-5);
}

TEST_CASE("attention rejects mismatched garment maps") {
    Rng r(5);
    SelfAttnWeights wts = ref::random_attn_weights(4, 2, r);
    Tensor xn = normal<float>(r.fork("x"), {4, 2, 2});
    Tensor bad = normal<float>(r.fork("b"), {4, 2, 3});
    CHECK_THROWS_AS(self_attention_fused(wts, xn, &bad), FusionError);
}

TEST_CASE("zero-initialised stem channels make the masked-person half inert") {
    ParamStore store;
    UNet net(store, "eps.", denoiser_cfg(), Rng(5));
    Rng r(9);
    Tensor noisy = normal<float>(r.fork("z"), {4, 8, 6});
    Tensor xm1 = normal<float>(r.fork("a"), {4, 8, 6});
    Tensor xm2 = normal<float>(r.fork("b"), {4, 8, 6});
    Tensor psi = normal<float>(r.fork("p"), {2, 64});

    auto pack = [](const Tensor& a, const Tensor& b) {
        Tensor z({8, 8, 6});
        for (size_t i = 0; i < a.size(); ++i) z.at(i) = a.at(i);
        for (size_t i = 0; i < b.size(); ++i) z.at(a.size() + i) = b.at(i);
        return z;
    };
    Tensor e1 = net.denoise(pack(xm1, noisy), 10, nullptr, psi);
    Tensor e2 = net.denoise(pack(xm2, noisy), 10, nullptr, psi);
    CHECK(e1.bitwise_equal(e2));

    // ...and the noisy half still matters.
    Tensor e3 = net.denoise(pack(xm1, xm2), 10, nullptr, psi);
    CHECK_FALSE(e1.bitwise_equal(e3));
}

TEST_CASE("garment pass exposes five feature maps with mirrored shapes") {
    ParamStore store;
    UNet net(store, "omega.", garment_cfg(), Rng(3));
    Tensor gz = normal<float>(Rng(4), {4, 8, 6});
    Tensor psi = normal<float>(Rng(6), {2, 64});
    GarmentFeatureStack fs = net.outfit_forward(gz, psi);
    REQUIRE(fs.feats.size() == 5);
    CHECK(fs.feats[0].shape() == Shape{32, 8, 6});
    CHECK(fs.feats[1].shape() == Shape{64, 4, 3});
    CHECK(fs.feats[2].shape() == Shape{64, 4, 3});
    CHECK(fs.feats[3].shape() == Shape{64, 4, 3});
    CHECK(fs.feats[4].shape() == Shape{32, 8, 6});

    // Same inputs, same stack.
    GarmentFeatureStack fs2 = net.outfit_forward(gz, psi);
    for (int i = 0; i < 5; ++i) CHECK(fs.feats[i].bitwise_equal(fs2.feats[i]));
}

TEST_CASE("denoising pass validates the feature stack") {
    ParamStore store;
    UNet omega(store, "omega.", garment_cfg(), Rng(3));
    UNet eps(store, "eps.", denoiser_cfg(), Rng(5));
    Rng r(8);
    Tensor gz = normal<float>(r.fork("g"), {4, 8, 6});
    Tensor psi = normal<float>(r.fork("p"), {2, 64});
    Tensor zin = normal<float>(r.fork("z"), {8, 8, 6});

    GarmentFeatureStack fs = omega.outfit_forward(gz, psi);

    GarmentFeatureStack wrong_len = fs;
    wrong_len.feats.pop_back();
    CHECK_THROWS_AS(eps.denoise(zin, 10, &wrong_len, psi), FusionError);

    GarmentFeatureStack wrong_shape = fs;
    std::swap(wrong_shape.feats[0], wrong_shape.feats[1]);
    CHECK_THROWS_AS(eps.denoise(zin, 10, &wrong_shape, psi), FusionError);

    Tensor ok = eps.denoise(zin, 10, &fs, psi);
    CHECK(ok.shape() == Shape{4, 8, 6});
    CHECK(ok.all_finite());

    // Fusion changes the prediction relative to the unfused pass.
    Tensor unfused = eps.denoise(zin, 10, nullptr, psi);
    CHECK_FALSE(ok.bitwise_equal(unfused));

    // Wrong psi width is rejected.
    CHECK_THROWS_AS(eps.denoise(zin, 10, &fs, Tensor({2, 32})), ShapeError);
}

TEST_CASE("forward counters track garment and denoising passes") {
    ParamStore store;
    UNet omega(store, "omega.", garment_cfg(), Rng(3));
    UNet eps(store, "eps.", denoiser_cfg(), Rng(5));
    Rng r(8);
    Tensor gz = normal<float>(r.fork("g"), {4, 8, 6});
    Tensor psi = normal<float>(r.fork("p"), {2, 64});
    Tensor zin = normal<float>(r.fork("z"), {8, 8, 6});

    reset_forward_counters();
    GarmentFeatureStack fs = omega.outfit_forward(gz, psi);
    CHECK(outfit_forward_count() == 1);
    CHECK(denoise_forward_count() == 0);
    eps.denoise(zin, 10, &fs, psi);
    eps.denoise(zin, 10, &fs, psi);
    CHECK(outfit_forward_count() == 1);
    CHECK(denoise_forward_count() == 2);
    reset_forward_counters();
    CHECK(outfit_forward_count() == 0);
}

TEST_CASE("attention capture separates body and garment mass") {
    ParamStore store;
    UNet omega(store, "omega.", garment_cfg(), Rng(3));
    UNet eps(store, "eps.", denoiser_cfg(), Rng(5));
    Rng r(8);
    Tensor gz = normal<float>(r.fork("g"), {4, 8, 6});
    Tensor psi = normal<float>(r.fork("p"), {2, 64});
    Tensor zin = normal<float>(r.fork("z"), {8, 8, 6});

    GarmentFeatureStack fs = omega.outfit_forward(gz, psi);
    AttnMaps fused = eps.capture_attention(zin, 10, &fs, psi);
    REQUIRE(fused.body_mass.size() == 5);
    REQUIRE(fused.garment_mass.size() == 5);
    CHECK(fused.body_mass[0].shape() == Shape{8, 6});
    CHECK(fused.body_mass[1].shape() == Shape{4, 3});
    for (int L = 0; L < 5; ++L) {
        double lo = 1e9, hi = -1e9;
        for (size_t i = 0; i < fused.body_mass[L].size(); ++i) {
            double total = fused.body_mass[L].at(i) + fused.garment_mass[L].at(i);
            lo = std::min(lo, total);
            hi = std::max(hi, total);
            CHECK(fused.garment_mass[L].at(i) > 0.0f);
        }
        CHECK(lo > 1.0 - 1e-4);
        CHECK(hi < 1.0 + 1e-4);
    }

    AttnMaps plain = eps.capture_attention(zin, 10, nullptr, psi);
    for (int L = 0; L < 5; ++L)
        for (size_t i = 0; i < plain.garment_mass[L].size(); ++i) {
            CHECK(plain.garment_mass[L].at(i) == 0.0f);
            CHECK(plain.body_mass[L].at(i) == doctest::Approx(1.0).epsilon(1e-4));
        }
}

TEST_CASE("per-layer fused attention inside the net matches the standalone op") {
    ParamStore store;
    UNet eps(store, "eps.", denoiser_cfg(), Rng(5));
    Rng r(12);
    Tensor xn = normal<float>(r.fork("x"), {32, 8, 6});
    Tensor gn = normal<float>(r.fork("g"), {32, 8, 6});
    Tensor got = eps.self_attention_fused_at(0, xn, &gn);
    Tensor want = self_attention_fused(eps.self_attn_weights(0), xn, &gn);
    CHECK(got.bitwise_equal(want));
    CHECK_THROWS_AS(eps.self_attention_fused_at(5, xn, &gn), FusionError);
}

TEST_CASE("same seed builds identical nets; different seeds differ") {
    ParamStore s1, s2, s3;
    UNet a(s1, "eps.", denoiser_cfg(), Rng(5));
    UNet b(s2, "eps.", denoiser_cfg(), Rng(5));
    UNet c(s3, "eps.", denoiser_cfg(), Rng(6));
    REQUIRE(s1.count() == s2.count());
    bool all_eq = true, any_diff = false;
    for (int i = 0; i < s1.count(); ++i) {
        all_eq = all_eq && s1.value(i).bitwise_equal(s2.value(i));
        any_diff = any_diff || !s1.value(i).bitwise_equal(s3.value(i));
    }
    CHECK(all_eq);
    CHECK(any_diff);
}
