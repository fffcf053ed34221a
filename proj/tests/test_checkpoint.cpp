// Archive format round-trips, corruption detection, metadata scalar packing,
// and whole-assembly persistence (codec archives included).

#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "ootd/checkpoint.hpp"
#include "ootd/errors.hpp"
#include "ootd/pipeline.hpp"
#include "ootd/rng.hpp"

using namespace ootd;
namespace fs = std::filesystem;

namespace {

std::string tmp_file(const char* tag) {
    return (fs::temp_directory_path() / (std::string("ootd_ckpt_") + tag + ".bin")).string();
}

std::vector<ArchiveEntry> sample_entries() {
    std::vector<ArchiveEntry> e;
    e.push_back({"alpha", normal<float>(Rng(1), {3, 4})});
    e.push_back({"beta.w", normal<float>(Rng(2), {2, 2, 3, 3})});
    e.push_back({"gamma", Tensor::from_data({1}, {42.5f})});
    return e;
}

AssemblyConfig small_cfg() {
    AssemblyConfig c;
    c.codec_base = 4;
    c.unet_base = 8;
    c.temb_dim = 16;
    c.cond_dim = 16;
    c.cond_base = 4;
    c.T = 50;
    return c;
}

}  // namespace

TEST_CASE("archive bytes round-trip bitwise") {
    std::vector<ArchiveEntry> in = sample_entries();
    std::vector<std::uint8_t> bytes = archive_bytes(in);
    std::vector<ArchiveEntry> out = parse_archive(bytes.data(), bytes.size());
    REQUIRE(out.size() == in.size());
    for (size_t i = 0; i < in.size(); ++i) {
        CHECK(out[i].name == in[i].name);
        CHECK(out[i].value.shape() == in[i].value.shape());
        CHECK(out[i].value.bitwise_equal(in[i].value));
    }
}

TEST_CASE("archive files round-trip and identical content gives identical bytes") {
    std::string p1 = tmp_file("rt1"), p2 = tmp_file("rt2");
    save_archive(p1, sample_entries());
    save_archive(p2, sample_entries());
    std::vector<ArchiveEntry> a = load_archive(p1);
    CHECK(a.size() == 3);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("bad magic, truncation, flipped bytes, trailing garbage all fail loudly") {
    std::vector<std::uint8_t> good = archive_bytes(sample_entries());

    std::vector<std::uint8_t> bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(parse_archive(bad_magic.data(), bad_magic.size()), FormatError);

    for (size_t cut : {size_t(4), size_t(11), good.size() - 9, good.size() - 1})
        CHECK_THROWS_AS(parse_archive(good.data(), cut), CorruptionError);

    std::vector<std::uint8_t> flipped = good;
    flipped[good.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(parse_archive(flipped.data(), flipped.size()), CorruptionError);

    std::vector<std::uint8_t> padded = good;
    padded.push_back(0);
    CHECK_THROWS_AS(parse_archive(padded.data(), padded.size()), CorruptionError);

    // Version is checked before the checksum.
    std::vector<std::uint8_t> vbad = good;
    vbad[8] = 9;
    CHECK_THROWS_AS(parse_archive(vbad.data(), vbad.size()), FormatError);
}

TEST_CASE("duplicate names are rejected when mapped") {
    std::vector<ArchiveEntry> e;
    e.push_back({"x", Tensor::ones({1})});
    e.push_back({"x", Tensor::zeros({1})});
    CHECK_THROWS_AS(archive_map(e), FormatError);
}

TEST_CASE("metadata scalars survive the f32-tensor detour bit-exactly") {
    for (std::uint64_t v : {std::uint64_t(0), std::uint64_t(1), std::uint64_t(0xDEADBEEFCAFEBABE),
                            std::uint64_t(-1)})
        CHECK(unpack_u64(pack_u64(v)) == v);
    for (double d : {0.0, 5e-5, -3.25, 1e300, 0.1})
        CHECK(unpack_f64(pack_f64(d)) == d);
}

TEST_CASE("assembly save/load restores every parameter and the config") {
    std::string path = tmp_file("asm");
    AssemblyConfig cfg = small_cfg();
    ModelAssembly a(cfg, 99);

    std::vector<ArchiveEntry> extras;
    extras.push_back({"meta.run.iter", pack_u64(123)});
    save_assembly(a, path, extras);

    LoadedAssembly la = load_assembly(path);
    CHECK(la.assembly->cfg.unet_base == 8);
    CHECK(la.assembly->cfg.T == 50);
    CHECK(la.assembly->cfg.cond_dim == 16);
    REQUIRE(la.extras.count("meta.run.iter") == 1);
    CHECK(unpack_u64(la.extras.at("meta.run.iter")) == 123);

    REQUIRE(la.assembly->model_store.count() == a.model_store.count());
    REQUIRE(la.assembly->codec_store.count() == a.codec_store.count());
    for (int i = 0; i < a.model_store.count(); ++i) {
        CHECK(la.assembly->model_store.name(i) == a.model_store.name(i));
        CHECK(la.assembly->model_store.value(i).bitwise_equal(a.model_store.value(i)));
    }
    for (int i = 0; i < a.codec_store.count(); ++i)
        CHECK(la.assembly->codec_store.value(i).bitwise_equal(a.codec_store.value(i)));

    // The restored assembly behaves identically.
    Rng r(4);
    Tensor gz = normal<float>(r.fork("g"), {4, 4, 4});
    Tensor psi = normal<float>(r.fork("p"), {2, 16});
    GarmentFeatureStack f1 = a.omega->outfit_forward(gz, psi);
    GarmentFeatureStack f2 = la.assembly->omega->outfit_forward(gz, psi);
    for (int i = 0; i < 5; ++i) CHECK(f1.feats[i].bitwise_equal(f2.feats[i]));
    fs::remove(path);
}

TEST_CASE("loading a truncated assembly file reports corruption") {
    std::string path = tmp_file("trunc");
    ModelAssembly a(small_cfg(), 1);
    save_assembly(a, path);
    auto size = fs::file_size(path);
    fs::resize_file(path, size - 17);
    CHECK_THROWS_AS(load_assembly(path), CorruptionError);
    fs::remove(path);
    CHECK_THROWS_AS(load_assembly(path), IoError);
}

TEST_CASE("codec archives carry weights and configuration") {
    std::string path = tmp_file("codec");
    ParamStore store;
    CodecConfig cfg;
    cfg.base = 4;
    Codec codec(store, "codec", cfg, Rng(11));
    save_codec_archive(path, store, cfg);

    LoadedCodec lc = load_codec_archive(path);
    CHECK(lc.cfg.base == 4);
    CHECK(lc.cfg.latent_ch == 4);
    CHECK_FALSE(lc.cfg.identity);
    REQUIRE(lc.store.count() == store.count());
    for (int i = 0; i < store.count(); ++i)
        CHECK(lc.store.value(i).bitwise_equal(store.value(i)));
    fs::remove(path);
}

TEST_CASE("adopt_codec swaps weights in and validates the layout") {
    ModelAssembly a(small_cfg(), 5);
    ParamStore other;
    Codec codec(other, "codec", CodecConfig{4, 4, false}, Rng(77));
    adopt_codec(a, other);
    for (int i = 0; i < other.count(); ++i)
        CHECK(a.codec_store.value(i).bitwise_equal(other.value(i)));

    ParamStore wrong;
    Codec big(wrong, "codec", CodecConfig{8, 4, false}, Rng(1));
    CHECK_THROWS_AS(adopt_codec(a, wrong), FormatError);
}
