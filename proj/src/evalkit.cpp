#include "ootd/evalkit.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ootd/errors.hpp"
#include "ootd/image_io.hpp"

namespace ootd {

namespace {
constexpr int kWin = 7;
constexpr double kC1 = 0.01 * 0.01;  // (K1*L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;
}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "ssim");
    if (a.rank() != 3) throw ShapeError("ssim: expected [c x H x W]");
    const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
    if (H < kWin || W < kWin) throw ShapeError("ssim: image smaller than the 7x7 window");
    const double inv_n = 1.0 / (kWin * kWin);
    double total = 0.0;
    long count = 0;
    for (int c = 0; c < C; ++c) {
        for (int y0 = 0; y0 + kWin <= H; ++y0) {
            for (int x0 = 0; x0 + kWin <= W; ++x0) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int dy = 0; dy < kWin; ++dy)
                    for (int dx = 0; dx < kWin; ++dx) {
                        double va = a.at(c, y0 + dy, x0 + dx);
                        double vb = b.at(c, y0 + dy, x0 + dx);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                double mu_a = sa * inv_n, mu_b = sb * inv_n;
                double var_a = saa * inv_n - mu_a * mu_a;
                double var_b = sbb * inv_n - mu_b * mu_b;
                double cov = sab * inv_n - mu_a * mu_b;
                double num = (2 * mu_a * mu_b + kC1) * (2 * cov + kC2);
                double den = (mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2);
                total += num / den;
                ++count;
            }
        }
    }
    return total / (double)count;
}

double masked_fidelity(const Tensor& result, const Tensor& gt, const Tensor& mask) {
    check_same_shape(result, gt, "masked_fidelity");
    if (result.rank() != 3) throw ShapeError("masked_fidelity: expected [c x H x W]");
    if (mask.rank() != 3 || mask.dim(0) != 1 || mask.dim(1) != result.dim(1) ||
        mask.dim(2) != result.dim(2))
        throw ShapeError("masked_fidelity: mask must be [1 x H x W] matching the images");
    const int C = result.dim(0), H = result.dim(1), W = result.dim(2);
    double acc = 0;
    long n = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (mask.at(0, y, x) == 0.0f) continue;
            for (int c = 0; c < C; ++c) {
                double d = (double)result.at(c, y, x) - (double)gt.at(c, y, x);
                acc += d * d;
                ++n;
            }
        }
    if (n == 0) throw InputError("masked_fidelity: mask selects no pixels");
    return acc / (double)n;
}

namespace {

AblationRow eval_row(const ModelAssembly& model, bool dropout_enabled, double s_g,
                     const Dataset& eval_set, std::uint64_t seed) {
    AblationRow row;
    row.dropout_enabled = dropout_enabled;
    row.s_g = s_g;
    row.n = (int)eval_set.pairs.size();
    Rng pair_seeds = Rng(seed).fork("pair");
    double mse_sum = 0, ssim_sum = 0;
    for (size_t i = 0; i < eval_set.pairs.size(); ++i) {
        const SamplePair& p = eval_set.pairs[i];
        SampleRequest req;
        req.masked_human = p.masked_human;
        req.garment = p.garment;
        req.label = p.label;
        req.cfg.guidance = s_g;
        req.cfg.seed = pair_seeds.fork((std::uint64_t)i).next_u64();
        Tensor out = run_sampler(model, req);
        mse_sum += masked_fidelity(out, p.outfitted, p.mask);
        ssim_sum += ssim(out, p.outfitted);
    }
    row.masked_mse = mse_sum / (double)row.n;
    row.ssim = ssim_sum / (double)row.n;
    return row;
}

}  // namespace

std::vector<AblationRow> ablation_run(const ModelAssembly& with_dropout,
                                      const ModelAssembly& without_dropout,
                                      const Dataset& eval_set,
                                      const std::vector<double>& s_grid, std::uint64_t seed) {
    if (eval_set.pairs.empty()) throw InputError("ablation: empty eval set");
    std::vector<AblationRow> rows;
    rows.push_back(eval_row(without_dropout, false, 1.0, eval_set, seed));
    for (double s : s_grid) rows.push_back(eval_row(with_dropout, true, s, eval_set, seed));
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "dropout,s_g,masked_mse,ssim,n\n";
    char buf[160];
    for (const AblationRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.2f,%.8f,%.8f,%d\n", r.dropout_enabled ? 1 : 0,
                      r.s_g, r.masked_mse, r.ssim, r.n);
        out += buf;
    }
    return out;
}

namespace {

// The three reported sampler steps: first, middle, last (1-based).
std::vector<int> report_steps(int steps) {
    std::vector<int> v{1};
    int mid = (steps + 1) / 2;
    if (mid > 1) v.push_back(mid);
    if (steps > mid) v.push_back(steps);
    return v;
}

// Runs the conditional branch bookkeeping needed to capture attention at the
// chosen steps, and hands each step's maps to `sink`.
void capture_at_steps(const ModelAssembly& a, const SamplePair& pair, const SampleConfig& cfg,
                      const std::function<void(int step, const AttnMaps&)>& sink) {
    Tensor xm_z = a.codec->encode(pair.masked_human);
    Tensor gz = a.codec->encode(pair.garment);
    Tensor psi = a.cond->make_psi(pair.garment, pair.label);
    GarmentFeatureStack feats_c = a.omega->outfit_forward(gz, psi);
    GarmentFeatureStack feats_u = a.omega->outfit_forward(Tensor::zeros(gz.shape()), psi);
    std::vector<int> steps = report_steps(cfg.sampler_steps);
    auto pre_step = [&](int index, int t, const Tensor& z) {
        for (int s : steps)
            if (s == index) {
                Tensor zin = detail::concat_latent_channels(xm_z, z);
                sink(index, a.eps->capture_attention(zin, t, &feats_c, psi));
            }
    };
    ddim_sample<float>(*a.eps, a.sched, xm_z, feats_c, &feats_u, psi, psi, cfg, nullptr,
                       pre_step);
}

Tensor normalize_to_u8(const Tensor& map) {
    Tensor out(map.shape());
    float mx = 0;
    for (size_t i = 0; i < map.size(); ++i) mx = std::max(mx, map.at(i));
    const float scale = mx > 0 ? 1.0f / mx : 0.0f;
    for (size_t i = 0; i < map.size(); ++i) out.at(i) = map.at(i) * scale;
    return out;
}

}  // namespace

std::vector<std::string> dump_attention_maps(const ModelAssembly& a, const SamplePair& pair,
                                             const SampleConfig& cfg,
                                             const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> written;
    capture_at_steps(a, pair, cfg, [&](int step, const AttnMaps& maps) {
        for (int L = 0; L < kAttnLayers; ++L) {
            auto write_map = [&](const Tensor& m, const char* half) {
                Tensor norm = normalize_to_u8(m);
                Tensor img = norm.reshaped({1, m.dim(0), m.dim(1)});
                std::string path = out_dir + "/attn_L" + std::to_string(L) + "_T" +
                                   std::to_string(step) + "_" + half + ".pgm";
                write_pgm(path, img);
                written.push_back(path);
            };
            write_map(maps.body_mass[L], "body");
            write_map(maps.garment_mass[L], "garment");
        }
    });
    return written;
}

AttnAttraction attention_attraction(const ModelAssembly& a, const SamplePair& pair,
                                    const SampleConfig& cfg, int layer) {
    if (layer < 0 || layer >= kAttnLayers) throw RangeError("attention_attraction: bad layer");
    double masked_sum = 0, unmasked_sum = 0;
    long masked_n = 0, unmasked_n = 0;
    capture_at_steps(a, pair, cfg, [&](int, const AttnMaps& maps) {
        const Tensor& gm = maps.garment_mass[layer];
        const int h = gm.dim(0), w = gm.dim(1);
        const int H = pair.mask.dim(1), W = pair.mask.dim(2);
        const int by = H / h, bx = W / w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double cover = 0;
                for (int dy = 0; dy < by; ++dy)
                    for (int dx = 0; dx < bx; ++dx) cover += pair.mask.at(0, y * by + dy, x * bx + dx);
                cover /= (double)(by * bx);
                if (cover >= 0.5) {
                    masked_sum += gm.at(y, x);
                    ++masked_n;
                } else {
                    unmasked_sum += gm.at(y, x);
                    ++unmasked_n;
                }
            }
    });
    AttnAttraction out;
    out.masked_mean = masked_n ? masked_sum / (double)masked_n : 0.0;
    out.unmasked_mean = unmasked_n ? unmasked_sum / (double)unmasked_n : 0.0;
    return out;
}

}  // namespace ootd
