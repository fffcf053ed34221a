#pragma once

// Procedural paired try-on data: a "human" canvas wearing a patterned
// garment, the flat garment swatch, the outfit-region mask, the masked
// human, and the label. The generator records every random parameter in a
// recipe so tests can re-render any region and compare bitwise.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ootd/tensor.hpp"

namespace ootd {

enum class GarmentLabel { upperbody = 0, lowerbody = 1, dress = 2 };
inline constexpr std::array<GarmentLabel, 3> kLabels = {
    GarmentLabel::upperbody, GarmentLabel::lowerbody, GarmentLabel::dress};

const char* label_name(GarmentLabel y);
GarmentLabel label_from_string(const std::string& s);

// All stored images are quantized to the k/255 grid, so the 8-bit files on
// disk round-trip bitwise. Mid-gray on that grid:
inline constexpr float kMaskGray = 128.0f / 255.0f;

enum class PatternKind { stripes = 0, checker = 1, dots = 2 };

struct Rgb {
    float r = 0, g = 0, b = 0;
};

// Every random decision of gen_pair, drawn up front. Garment parameters come
// from a stream forked independently of the body stream, so the same seed
// yields the same swatch regardless of body randomization (unpaired
// protocol support).
struct PairRecipe {
    uint64_t seed = 0;
    GarmentLabel label = GarmentLabel::upperbody;
    int H = 64, W = 48;
    // garment pattern
    PatternKind pattern = PatternKind::stripes;
    Rgb color_a, color_b;
    float period = 8.0f;
    float theta = 0.0f;   // stripe direction
    float phase_u = 0.0f, phase_v = 0.0f;
    // body
    Rgb bg, skin;
    int body_cx = 0, body_w = 0;
    int head_cy = 0, head_r = 0;
    int gx0 = 0, gy0 = 0, gx1 = 0, gy1 = 0;  // garment region [x0,x1) x [y0,y1)
    // flat-swatch -> body mapping: u = (x - tx)/s, v = (y - ty)/s
    float aff_scale = 1.0f, aff_tx = 0.0f, aff_ty = 0.0f;
};

struct SamplePair {
    std::string id;
    GarmentLabel label = GarmentLabel::upperbody;
    Tensor human;         // 3xHxW, the person already wearing the garment
    Tensor garment;       // 3xHxW flat swatch on white
    Tensor mask;          // 1xHxW in {0,1}
    Tensor masked_human;  // human outside mask, kMaskGray inside
    Tensor outfitted;     // ground truth; equals human by construction
};

PairRecipe make_recipe(uint64_t seed, GarmentLabel label, int H = 64, int W = 48);
// Pattern color at garment-space coordinates (u,v); unquantized.
Rgb pattern_rgb(const PairRecipe& rec, float u, float v);
SamplePair render_pair(const PairRecipe& rec);
SamplePair gen_pair(uint64_t seed, GarmentLabel label, int H = 64, int W = 48);

// Quantize every value to the nearest k/255 (what rendering applies last).
void snap_to_u8_grid(Tensor& img);

struct ManifestEntry {
    std::string id;
    GarmentLabel label = GarmentLabel::upperbody;
    // file paths relative to the dataset dir, keyed human/garment/masked/gt/mask
    std::string human, garment, masked, gt, mask;
    // FNV-1a 64 content hashes, hex
    std::string human_hash, garment_hash, masked_hash, gt_hash, mask_hash;
};

struct DatasetManifest {
    int version = 1;
    int width = 48, height = 64;
    uint64_t seed = 0;
    std::vector<ManifestEntry> entries;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<SamplePair> pairs;
};

// Writes n_per_label pairs per label plus manifest.json; returns the
// manifest. Layout: manifest.json, imgs/<id>_{human,garment,masked,gt}.ppm,
// imgs/<id>_mask.pgm.
DatasetManifest write_dataset(const std::string& dir, int n_per_label, uint64_t seed, int H = 64,
                              int W = 48);
// Loads and verifies every file against the manifest hashes.
Dataset read_dataset(const std::string& dir);

}  // namespace ootd
