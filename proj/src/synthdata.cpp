#include "ootd/synthdata.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ootd/errors.hpp"
#include "ootd/image_io.hpp"
#include "ootd/io_util.hpp"
#include "ootd/rng.hpp"

namespace ootd {

namespace fs = std::filesystem;
using nlohmann::json;

const char* label_name(GarmentLabel y) {
    switch (y) {
        case GarmentLabel::upperbody: return "upperbody";
        case GarmentLabel::lowerbody: return "lowerbody";
        case GarmentLabel::dress: return "dress";
    }
    return "?";
}

GarmentLabel label_from_string(const std::string& s) {
    for (GarmentLabel y : kLabels)
        if (s == label_name(y)) return y;
    throw InputError("unknown garment label: '" + s + "' (expected upperbody|lowerbody|dress)");
}

void snap_to_u8_grid(Tensor& img) {
    for (size_t i = 0; i < img.size(); ++i)
        img.at(i) = static_cast<float>(quantize_u8(img.at(i))) / 255.0f;
}

namespace {

constexpr float kTau = 6.2831853071795864769f;

// One random color on the k/255 grid, each channel in its own [lo, hi] band.
Rgb draw_color_in(Rng& r, int lo_r, int hi_r, int lo_g, int hi_g, int lo_b, int hi_b) {
    auto ch = [&r](int lo, int hi) {
        int q = lo + static_cast<int>(r.next_unit() * (hi - lo + 1));
        if (q > hi) q = hi;
        return static_cast<float>(q) / 255.0f;
    };
    Rgb c;
    c.r = ch(lo_r, hi_r);
    c.g = ch(lo_g, hi_g);
    c.b = ch(lo_b, hi_b);
    return c;
}

float l1_dist(const Rgb& a, const Rgb& b) {
    return std::abs(a.r - b.r) + std::abs(a.g - b.g) + std::abs(a.b - b.b);
}

float frand(Rng& r, float lo, float hi) {
    return lo + static_cast<float>(r.next_unit()) * (hi - lo);
}

int irand(Rng& r, int lo, int hi) {  // inclusive
    int v = lo + static_cast<int>(r.next_unit() * (hi - lo + 1));
    return v > hi ? hi : v;
}

float mixf(float a, float b, float f) { return a + f * (b - a); }

}  // namespace

Rgb pattern_rgb(const PairRecipe& rec, float u, float v) {
    float f = 0.5f;
    switch (rec.pattern) {
        case PatternKind::stripes: {
            float w = (u * std::cos(rec.theta) + v * std::sin(rec.theta)) / rec.period;
            f = 0.5f + 0.5f * std::sin(kTau * w + rec.phase_u);
            break;
        }
        case PatternKind::checker: {
            f = 0.5f + 0.5f * std::sin(kTau * u / rec.period + rec.phase_u) *
                           std::sin(kTau * v / rec.period + rec.phase_v);
            break;
        }
        case PatternKind::dots: {
            float du = 0.5f + 0.5f * std::cos(kTau * u / rec.period + rec.phase_u);
            float dv = 0.5f + 0.5f * std::cos(kTau * v / rec.period + rec.phase_v);
            f = du * dv;
            break;
        }
    }
    Rgb out;
    out.r = mixf(rec.color_a.r, rec.color_b.r, f);
    out.g = mixf(rec.color_a.g, rec.color_b.g, f);
    out.b = mixf(rec.color_a.b, rec.color_b.b, f);
    return out;
}

PairRecipe make_recipe(uint64_t seed, GarmentLabel label, int H, int W) {
    if (H < 32 || W < 32 || H % 8 != 0 || W % 8 != 0)
        throw ShapeError("generator expects H,W >= 32 and divisible by 8, got " +
                         std::to_string(H) + "x" + std::to_string(W));
    PairRecipe rec;
    rec.seed = seed;
    rec.label = label;
    rec.H = H;
    rec.W = W;

    // Garment stream: independent of body randomization so the same seed
    // renders the same swatch under any pairing.
    Rng rg = Rng(seed).fork("garment");
    rec.pattern = static_cast<PatternKind>(irand(rg, 0, 2));
    // Mid-range pattern colors: the pair stays >= 0.6 apart in l1 so garments
    // are clearly distinguishable, but steps against the light background and
    // the white swatch border stay moderate, keeping the garment boundary
    // representable by the 8x-downsampling codec.
    rec.color_a = draw_color_in(rg, 64, 191, 64, 191, 64, 191);
    rec.color_b = draw_color_in(rg, 64, 191, 64, 191, 64, 191);
    for (int tries = 0; l1_dist(rec.color_a, rec.color_b) < 0.6f && tries < 64; ++tries)
        rec.color_b = draw_color_in(rg, 64, 191, 64, 191, 64, 191);
    // Pattern scale stays above the 8x latent grid's Nyquist period (16 px at
    // W=48) so the frozen codec can represent the texture without aliasing.
    // Checker and dot patterns are sine products whose diagonal component runs
    // sqrt(2)x faster than the axis period, hence the higher floor.
    rec.period = frand(rg, 0.48f * W, 0.75f * W);
    rec.theta = frand(rg, 0.0f, 3.14159265f);
    rec.phase_u = frand(rg, 0.0f, kTau);
    rec.phase_v = frand(rg, 0.0f, kTau);

    Rng rb = Rng(seed).fork("body");
    rec.bg = draw_color_in(rb, 205, 245, 205, 245, 205, 245);
    rec.skin = draw_color_in(rb, 180, 230, 140, 180, 110, 150);
    rec.body_w = irand(rb, static_cast<int>(0.38 * W), static_cast<int>(0.54 * W));
    rec.body_cx = W / 2 + irand(rb, -W / 12, W / 12);
    rec.head_r = irand(rb, static_cast<int>(0.0625 * H), static_cast<int>(0.094 * H));
    rec.head_cy = rec.head_r + 2 + irand(rb, 0, static_cast<int>(0.047 * H));
    int neck = rec.head_cy + rec.head_r + 1;

    switch (label) {
        case GarmentLabel::upperbody:
            rec.gy0 = neck + 1;
            rec.gy1 = rec.gy0 + irand(rb, static_cast<int>(0.28 * H), static_cast<int>(0.375 * H));
            break;
        case GarmentLabel::lowerbody:
            rec.gy0 = irand(rb, static_cast<int>(0.53 * H), static_cast<int>(0.59 * H));
            rec.gy1 = H - 3 - irand(rb, 0, static_cast<int>(0.047 * H));
            break;
        case GarmentLabel::dress:
            rec.gy0 = neck + 1;
            rec.gy1 = H - 5 - irand(rb, 0, static_cast<int>(0.047 * H));
            break;
    }
    rec.gx0 = rec.body_cx - rec.body_w / 2 - 1;
    rec.gx1 = rec.body_cx + rec.body_w / 2 + 1;
    if (rec.gx0 < 1) rec.gx0 = 1;
    if (rec.gx1 > W - 1) rec.gx1 = W - 1;
    if (rec.gy1 > H - 1) rec.gy1 = H - 1;

    // Keep the mapped pattern at or above swatch scale: shrinking it would push
    // the on-body texture back below the latent grid's Nyquist period.
    rec.aff_scale = frand(rb, 1.0f, 1.6f);
    rec.aff_tx = 0.5f * static_cast<float>(rec.gx0 + rec.gx1) + frand(rb, -0.2f * W, 0.2f * W);
    rec.aff_ty = 0.5f * static_cast<float>(rec.gy0 + rec.gy1) + frand(rb, -0.2f * H, 0.2f * H);
    return rec;
}

namespace {

void put_px(Tensor& img, int y, int x, const Rgb& c) {
    img.at(img.off3(0, y, x)) = c.r;
    img.at(img.off3(1, y, x)) = c.g;
    img.at(img.off3(2, y, x)) = c.b;
}

Tensor render_garment_swatch(const PairRecipe& rec) {
    Tensor img({3, rec.H, rec.W});
    int mx = rec.W * 3 / 20, my = rec.H * 3 / 20;  // white border
    for (int y = 0; y < rec.H; ++y) {
        for (int x = 0; x < rec.W; ++x) {
            bool inside = x >= mx && x < rec.W - mx && y >= my && y < rec.H - my;
            if (!inside) {
                put_px(img, y, x, Rgb{1.0f, 1.0f, 1.0f});
            } else {
                // Identity garment-space coords, centered on the swatch.
                float u = static_cast<float>(x) - 0.5f * rec.W;
                float v = static_cast<float>(y) - 0.5f * rec.H;
                put_px(img, y, x, pattern_rgb(rec, u, v));
            }
        }
    }
    snap_to_u8_grid(img);
    return img;
}

Tensor render_human(const PairRecipe& rec) {
    Tensor img({3, rec.H, rec.W});
    int bx0 = rec.body_cx - rec.body_w / 2, bx1 = rec.body_cx + rec.body_w / 2;
    int neck = rec.head_cy + rec.head_r + 1;
    for (int y = 0; y < rec.H; ++y) {
        for (int x = 0; x < rec.W; ++x) {
            Rgb c = rec.bg;
            // skin body column below the head, up to the bottom margin
            if (x >= bx0 && x < bx1 && y >= neck && y < rec.H - 2) c = rec.skin;
            // head disc
            int dx = x - rec.body_cx, dy = y - rec.head_cy;
            if (dx * dx + dy * dy <= rec.head_r * rec.head_r) c = rec.skin;
            // garment region, pattern mapped by the recipe's scale+translate
            if (x >= rec.gx0 && x < rec.gx1 && y >= rec.gy0 && y < rec.gy1) {
                float u = (static_cast<float>(x) - rec.aff_tx) / rec.aff_scale;
                float v = (static_cast<float>(y) - rec.aff_ty) / rec.aff_scale;
                c = pattern_rgb(rec, u, v);
            }
            put_px(img, y, x, c);
        }
    }
    snap_to_u8_grid(img);
    return img;
}

}  // namespace

SamplePair render_pair(const PairRecipe& rec) {
    SamplePair p;
    p.label = rec.label;
    p.human = render_human(rec);
    p.garment = render_garment_swatch(rec);
    p.mask = Tensor({1, rec.H, rec.W});
    for (int y = rec.gy0; y < rec.gy1; ++y)
        for (int x = rec.gx0; x < rec.gx1; ++x) p.mask.at(p.mask.off3(0, y, x)) = 1.0f;
    p.masked_human = p.human.clone();
    for (int y = rec.gy0; y < rec.gy1; ++y)
        for (int x = rec.gx0; x < rec.gx1; ++x)
            for (int c = 0; c < 3; ++c)
                p.masked_human.at(p.masked_human.off3(c, y, x)) = kMaskGray;
    p.outfitted = p.human;  // ground truth by construction
    return p;
}

SamplePair gen_pair(uint64_t seed, GarmentLabel label, int H, int W) {
    return render_pair(make_recipe(seed, label, H, W));
}

namespace {

struct FileSet {
    std::string human, garment, masked, gt, mask;
};

FileSet file_set(const std::string& id) {
    FileSet f;
    f.human = "imgs/" + id + "_human.ppm";
    f.garment = "imgs/" + id + "_garment.ppm";
    f.masked = "imgs/" + id + "_masked.ppm";
    f.gt = "imgs/" + id + "_gt.ppm";
    f.mask = "imgs/" + id + "_mask.pgm";
    return f;
}

std::string hash_of(const std::string& dir, const std::string& rel) {
    return hex_u64(fnv1a64_file(dir + "/" + rel));
}

}  // namespace

DatasetManifest write_dataset(const std::string& dir, int n_per_label, uint64_t seed, int H,
                              int W) {
    if (n_per_label <= 0) throw InputError("n_per_label must be positive");
    fs::create_directories(dir + "/imgs");

    DatasetManifest man;
    man.version = 1;
    man.width = W;
    man.height = H;
    man.seed = seed;

    for (GarmentLabel y : kLabels) {
        Rng stream = Rng(seed).fork(label_name(y));
        for (int i = 0; i < n_per_label; ++i) {
            uint64_t pair_seed = stream.fork(static_cast<uint64_t>(i)).next_u64();
            SamplePair p = gen_pair(pair_seed, y, H, W);
            ManifestEntry e;
            e.id = std::string(label_name(y)) + "_" + std::to_string(i);
            e.label = y;
            FileSet f = file_set(e.id);
            write_ppm(dir + "/" + f.human, p.human);
            write_ppm(dir + "/" + f.garment, p.garment);
            write_ppm(dir + "/" + f.masked, p.masked_human);
            write_ppm(dir + "/" + f.gt, p.outfitted);
            write_pgm(dir + "/" + f.mask, p.mask);
            e.human = f.human;
            e.garment = f.garment;
            e.masked = f.masked;
            e.gt = f.gt;
            e.mask = f.mask;
            e.human_hash = hash_of(dir, f.human);
            e.garment_hash = hash_of(dir, f.garment);
            e.masked_hash = hash_of(dir, f.masked);
            e.gt_hash = hash_of(dir, f.gt);
            e.mask_hash = hash_of(dir, f.mask);
            man.entries.push_back(std::move(e));
        }
    }

    json j;
    j["version"] = man.version;
    j["width"] = man.width;
    j["height"] = man.height;
    j["seed"] = man.seed;
    j["samples"] = json::array();
    for (const ManifestEntry& e : man.entries) {
        json s;
        s["id"] = e.id;
        s["label"] = label_name(e.label);
        s["files"] = {{"human", e.human},
                      {"garment", e.garment},
                      {"masked", e.masked},
                      {"gt", e.gt},
                      {"mask", e.mask}};
        s["hashes"] = {{"human", e.human_hash},
                       {"garment", e.garment_hash},
                       {"masked", e.masked_hash},
                       {"gt", e.gt_hash},
                       {"mask", e.mask_hash}};
        j["samples"].push_back(std::move(s));
    }
    write_file_atomic(dir + "/manifest.json", j.dump(2) + "\n");
    return man;
}

namespace {

Tensor load_checked(const std::string& dir, const std::string& rel, const std::string& want_hash,
                    const std::string& id, bool gray) {
    std::string path = dir + "/" + rel;
    if (!fs::exists(path))
        throw CorruptionError("dataset entry '" + id + "': missing file " + rel);
    std::string got = hex_u64(fnv1a64_file(path));
    if (got != want_hash)
        throw CorruptionError("dataset entry '" + id + "': hash mismatch for " + rel +
                              " (manifest " + want_hash + ", file " + got + ")");
    return gray ? read_pgm(path) : read_ppm(path);
}

}  // namespace

Dataset read_dataset(const std::string& dir) {
    std::string mpath = dir + "/manifest.json";
    if (!fs::exists(mpath)) throw IoError("no manifest.json in " + dir);
    json j;
    try {
        std::ifstream f(mpath);
        f >> j;
    } catch (const std::exception& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
    }
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw FormatError("manifest.json: unsupported version");

    Dataset ds;
    ds.manifest.version = 1;
    ds.manifest.width = j.at("width").get<int>();
    ds.manifest.height = j.at("height").get<int>();
    ds.manifest.seed = j.at("seed").get<uint64_t>();

    for (const json& s : j.at("samples")) {
        ManifestEntry e;
        e.id = s.at("id").get<std::string>();
        e.label = label_from_string(s.at("label").get<std::string>());
        const json& files = s.at("files");
        const json& hashes = s.at("hashes");
        e.human = files.at("human").get<std::string>();
        e.garment = files.at("garment").get<std::string>();
        e.masked = files.at("masked").get<std::string>();
        e.gt = files.at("gt").get<std::string>();
        e.mask = files.at("mask").get<std::string>();
        e.human_hash = hashes.at("human").get<std::string>();
        e.garment_hash = hashes.at("garment").get<std::string>();
        e.masked_hash = hashes.at("masked").get<std::string>();
        e.gt_hash = hashes.at("gt").get<std::string>();
        e.mask_hash = hashes.at("mask").get<std::string>();

        SamplePair p;
        p.id = e.id;
        p.label = e.label;
        p.human = load_checked(dir, e.human, e.human_hash, e.id, false);
        p.garment = load_checked(dir, e.garment, e.garment_hash, e.id, false);
        p.masked_human = load_checked(dir, e.masked, e.masked_hash, e.id, false);
        p.outfitted = load_checked(dir, e.gt, e.gt_hash, e.id, false);
        p.mask = load_checked(dir, e.mask, e.mask_hash, e.id, true);
        for (const Tensor* t : {&p.human, &p.garment, &p.masked_human, &p.outfitted})
            if (t->dim(1) != ds.manifest.height || t->dim(2) != ds.manifest.width)
                throw CorruptionError("dataset entry '" + e.id + "': image dims disagree with manifest");
        ds.manifest.entries.push_back(std::move(e));
        ds.pairs.push_back(std::move(p));
    }
    return ds;
}

}  // namespace ootd
