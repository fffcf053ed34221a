// Dataset generator and image codec behavior: determinism, mask/masked-image
// invariants, on-disk round-tripping with hash verification, codec shapes and
// reconstruction pretraining.

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ootd/codec.hpp"
#include "ootd/errors.hpp"
#include "ootd/synthdata.hpp"

using namespace ootd;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* tag) {
    fs::path d = fs::temp_directory_path() / (std::string("ootd_test_") + tag);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

bool on_u8_grid(const Tensor& t) {
    for (size_t i = 0; i < t.size(); ++i) {
        float v = t.at(i) * 255.0f;
        if (std::abs(v - std::round(v)) > 1e-3f) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("gen_pair is deterministic and labeled") {
    SamplePair a = gen_pair(42, GarmentLabel::upperbody);
    SamplePair b = gen_pair(42, GarmentLabel::upperbody);
    CHECK(a.human.bitwise_equal(b.human));
    CHECK(a.garment.bitwise_equal(b.garment));
    CHECK(a.mask.bitwise_equal(b.mask));
    CHECK(a.masked_human.bitwise_equal(b.masked_human));
    CHECK(a.label == GarmentLabel::upperbody);

    SamplePair c = gen_pair(43, GarmentLabel::upperbody);
    CHECK_FALSE(a.human.bitwise_equal(c.human));
}

TEST_CASE("pair tensors have the documented shapes and value grid") {
    SamplePair p = gen_pair(7, GarmentLabel::dress);
    CHECK(p.human.shape() == Shape{3, 64, 48});
    CHECK(p.garment.shape() == Shape{3, 64, 48});
    CHECK(p.mask.shape() == Shape{1, 64, 48});
    CHECK(p.masked_human.shape() == Shape{3, 64, 48});
    CHECK(on_u8_grid(p.human));
    CHECK(on_u8_grid(p.garment));
    CHECK(on_u8_grid(p.masked_human));
    for (size_t i = 0; i < p.mask.size(); ++i)
        CHECK((p.mask.at(i) == 0.0f || p.mask.at(i) == 1.0f));
}

TEST_CASE("masked human equals human outside the mask and mid-gray inside") {
    for (GarmentLabel y : kLabels) {
        SamplePair p = gen_pair(11, y);
        int ones = 0;
        for (int yy = 0; yy < 64; ++yy)
            for (int xx = 0; xx < 48; ++xx) {
                bool inside = p.mask.at(0, yy, xx) == 1.0f;
                ones += inside;
                for (int c = 0; c < 3; ++c) {
                    float got = p.masked_human.at(c, yy, xx);
                    float want = inside ? kMaskGray : p.human.at(c, yy, xx);
                    CHECK(got == want);
                }
            }
        CHECK(ones > 0);
        CHECK(ones < 64 * 48);
    }
}

TEST_CASE("ground truth equals the dressed human") {
    SamplePair p = gen_pair(3, GarmentLabel::lowerbody);
    CHECK(p.outfitted.bitwise_equal(p.human));
}

TEST_CASE("garment swatch depends only on the garment parameter stream") {
    PairRecipe r1 = make_recipe(5, GarmentLabel::upperbody);
    PairRecipe r2 = r1;
    r2.body_cx += 3;
    r2.skin.r = 0.9f;
    r2.gy0 += 1;
    SamplePair a = render_pair(r1);
    SamplePair b = render_pair(r2);
    CHECK(a.garment.bitwise_equal(b.garment));
    CHECK_FALSE(a.human.bitwise_equal(b.human));
}

TEST_CASE("label names round-trip and reject junk") {
    for (GarmentLabel y : kLabels) CHECK(label_from_string(label_name(y)) == y);
    CHECK_THROWS_AS(label_from_string("hat"), InputError);
}

TEST_CASE("dataset write/read round-trips bitwise") {
    fs::path dir = fresh_dir("roundtrip");
    DatasetManifest m = write_dataset(dir.string(), 2, 99);
    CHECK(m.entries.size() == 6);

    Dataset ds = read_dataset(dir.string());
    REQUIRE(ds.pairs.size() == 6);
    CHECK(ds.manifest.seed == 99);
    for (size_t i = 0; i < ds.pairs.size(); ++i) {
        const ManifestEntry& e = ds.manifest.entries[i];
        uint64_t pair_seed =
            Rng(m.seed).fork(label_name(e.label)).fork(static_cast<uint64_t>(i % 2)).next_u64();
        SamplePair want = gen_pair(pair_seed, e.label);
        // ids follow <label>_<index-within-label>
        CHECK(ds.pairs[i].id == e.id);
        CHECK(ds.pairs[i].human.bitwise_equal(want.human));
        CHECK(ds.pairs[i].garment.bitwise_equal(want.garment));
        CHECK(ds.pairs[i].mask.bitwise_equal(want.mask));
        CHECK(ds.pairs[i].masked_human.bitwise_equal(want.masked_human));
        CHECK(ds.pairs[i].outfitted.bitwise_equal(want.outfitted));
    }
    fs::remove_all(dir);
}

TEST_CASE("read_dataset rejects tampered and missing files by id") {
    fs::path dir = fresh_dir("tamper");
    DatasetManifest m = write_dataset(dir.string(), 1, 5);
    const ManifestEntry& victim = m.entries.at(1);

    {
        fs::path f = dir / victim.human;
        std::fstream io(f, std::ios::in | std::ios::out | std::ios::binary);
        io.seekp(-1, std::ios::end);
        char c;
        io.seekg(-1, std::ios::end);
        io.get(c);
        io.seekp(-1, std::ios::end);
        io.put(static_cast<char>(c ^ 0x01));
    }
    try {
        read_dataset(dir.string());
        FAIL("expected CorruptionError");
    } catch (const CorruptionError& e) {
        CHECK(std::string(e.what()).find(victim.id) != std::string::npos);
    }

    fs::remove(dir / victim.human);
    CHECK_THROWS_AS(read_dataset(dir.string()), CorruptionError);
    fs::remove_all(dir);
}

TEST_CASE("codec maps 3x64x48 to a 4x8x6 latent and back") {
    ParamStore store;
    Codec codec(store, "codec", CodecConfig{}, Rng(1));
    SamplePair p = gen_pair(1, GarmentLabel::upperbody);

    Tensor z = codec.encode(p.human);
    CHECK(z.shape() == Shape{4, 8, 6});
    for (size_t i = 0; i < z.size(); ++i) {
        CHECK(z.at(i) >= -1.0f);
        CHECK(z.at(i) <= 1.0f);
    }

    Tensor rec = codec.decode(z);
    CHECK(rec.shape() == Shape{3, 64, 48});
    for (size_t i = 0; i < rec.size(); ++i) {
        CHECK(rec.at(i) >= 0.0f);
        CHECK(rec.at(i) <= 1.0f);
    }

    CHECK(codec.encode(p.human).bitwise_equal(z));
}

TEST_CASE("codec rejects wrong channel counts and non-multiple-of-8 sizes") {
    ParamStore store;
    Codec codec(store, "codec", CodecConfig{}, Rng(1));
    CHECK_THROWS_AS(codec.encode(Tensor({4, 64, 48})), ShapeError);
    CHECK_THROWS_AS(codec.encode(Tensor({3, 60, 48})), ShapeError);
    CHECK_THROWS_AS(codec.decode(Tensor({3, 8, 6})), ShapeError);
}

TEST_CASE("identity codec is a pixel-resolution pass-through") {
    ParamStore store;
    CodecConfig cfg;
    cfg.identity = true;
    Codec codec(store, "codec", cfg, Rng(1));
    SamplePair p = gen_pair(2, GarmentLabel::dress);

    Tensor z = codec.encode(p.human);
    CHECK(z.shape() == Shape{4, 64, 48});
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 48; ++x) {
            CHECK(z.at(3, y, x) == 0.0f);
            for (int c = 0; c < 3; ++c) CHECK(z.at(c, y, x) == p.human.at(c, y, x));
        }
    CHECK(codec.decode(z).bitwise_equal(p.human));
}

TEST_CASE("latent gain scales encode and cancels in the round trip") {
    ParamStore store;
    Codec codec(store, "codec", CodecConfig{}, Rng(4));
    SamplePair p = gen_pair(9, GarmentLabel::upperbody);

    Tensor z1 = codec.encode(p.human);
    Tensor out1 = codec.decode(z1);

    // A power-of-two gain keeps the scaling exact in float arithmetic.
    store.value(store.id_of("codec.latent_scale")).data()[0] = 4.0f;
    Tensor z4 = codec.encode(p.human);
    REQUIRE(z4.shape() == z1.shape());
    for (size_t i = 0; i < z1.size(); ++i) CHECK(z4.at(i) == 4.0f * z1.at(i));
    CHECK(codec.decode(z4).bitwise_equal(out1));
}

TEST_CASE("pretraining records a gain that makes corpus latents unit-RMS") {
    std::vector<Tensor> images;
    for (int i = 0; i < 3; ++i) images.push_back(gen_pair(60 + i, GarmentLabel::dress).human);
    PretrainedCodec pc = pretrain_codec(images, 10, Rng(8), CodecConfig{}, 2, 1e-3);

    ParamStore store = pc.store;
    Codec codec(store, "codec", pc.cfg, Rng(0));
    CHECK(store.value(store.id_of("codec.latent_scale")).data()[0] != 1.0f);
    double sq = 0;
    long n = 0;
    for (const Tensor& img : images) {
        Tensor z = codec.encode(img);
        for (size_t i = 0; i < z.size(); ++i) sq += (double)z.at(i) * z.at(i);
        n += (long)z.size();
    }
    CHECK(std::sqrt(sq / n) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("codec pretraining reduces reconstruction loss") {
    std::vector<Tensor> images;
    for (int i = 0; i < 4; ++i) images.push_back(gen_pair(20 + i, GarmentLabel::upperbody).human);

    PretrainedCodec pc = pretrain_codec(images, 40, Rng(3), CodecConfig{}, 4, 2e-3);
    CHECK(pc.frozen);
    REQUIRE(pc.curve.size() == 40);
    double head = 0, tail = 0;
    for (int i = 0; i < 5; ++i) {
        head += pc.curve[i].loss;
        tail += pc.curve[pc.curve.size() - 1 - i].loss;
    }
    CHECK(tail < head);

    // Identical seeds give identical curves.
    PretrainedCodec pc2 = pretrain_codec(images, 40, Rng(3), CodecConfig{}, 4, 2e-3);
    CHECK(pc2.curve.back().loss == pc.curve.back().loss);
}

TEST_CASE("psnr matches a hand-computed value") {
    Tensor a = Tensor::zeros({1, 2, 2});
    Tensor b = Tensor::full({1, 2, 2}, 0.1f);
    // mse = 0.01, psnr = 10*log10(1/0.01) = 20
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-4));
    CHECK(psnr(a, a) > 1e8);
}
