// Command-line front end: dataset generation, codec pretraining, model
// training, guided sampling, the guidance/dropout ablation grid, and
// attention-map inspection. Exit codes: 0 success, 1 runtime error, 2 usage
// error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ootd/checkpoint.hpp"
#include "ootd/errors.hpp"
#include "ootd/evalkit.hpp"
#include "ootd/image_io.hpp"
#include "ootd/io_util.hpp"
#include "ootd/pipeline.hpp"
#include "ootd/synthdata.hpp"
#include "ootd/trainer.hpp"

using nlohmann::json;

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void print_config(const json& j) { std::cout << "resolved config: " << j.dump() << "\n"; }

void write_meta(const std::string& dir, json j) {
    ootd::write_file_atomic(dir + "/meta.json", j.dump(2) + "\n");
}

const ootd::SamplePair& find_pair(const ootd::Dataset& ds, const std::string& id) {
    for (const ootd::SamplePair& p : ds.pairs)
        if (p.id == id) return p;
    throw ootd::InputError("no pair with id '" + id + "' in the dataset");
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
    std::string out;
    int n = 16;
    std::uint64_t seed = 1;
    int height = 64, width = 48;
};

int run_gen_data(const GenDataArgs& a) {
    json cfg{{"command", "gen-data"}, {"out", a.out},       {"n_per_label", a.n},
             {"seed", a.seed},        {"height", a.height}, {"width", a.width}};
    print_config(cfg);
    ootd::DatasetManifest m = ootd::write_dataset(a.out, a.n, a.seed, a.height, a.width);
    std::cout << "wrote " << m.entries.size() << " pairs to " << a.out << "\n";
    return 0;
}

// ----------------------------------------------------------- pretrain-codec

struct PretrainArgs {
    std::string data, out;
    int steps = 600;
    std::uint64_t seed = 7;
    int batch = 8;
    double lr = 2e-3;
    int base = 16;
};

int run_pretrain_codec(const PretrainArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    json cfg{{"command", "pretrain-codec"}, {"data", a.data}, {"out", a.out},
             {"steps", a.steps},            {"seed", a.seed}, {"batch", a.batch},
             {"lr", a.lr},                  {"base", a.base}};
    print_config(cfg);
    ootd::Dataset ds = ootd::read_dataset(a.data);
    std::vector<ootd::Tensor> images;
    for (const ootd::SamplePair& p : ds.pairs) {
        images.push_back(p.human);
        images.push_back(p.garment);
        images.push_back(p.masked_human);
    }
    ootd::CodecConfig cc;
    cc.base = a.base;
    ootd::PretrainedCodec pc =
        ootd::pretrain_codec(images, a.steps, ootd::Rng(a.seed), cc, a.batch, a.lr);

    std::filesystem::create_directories(a.out);
    const std::string ckpt = a.out + "/codec.bin";
    ootd::save_codec_archive(ckpt, pc.store, pc.cfg);

    std::string csv = "iter,loss,seconds\n";
    char buf[96];
    for (const ootd::CodecMetricRow& r : pc.curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.8f,%.3f\n", r.iter, r.loss, r.seconds);
        csv += buf;
    }
    ootd::write_file_atomic(a.out + "/codec_metrics.csv", csv);

    ootd::Codec codec(pc.store, "codec", pc.cfg, ootd::Rng(0));
    double psnr_sum = 0;
    int n_eval = std::min<int>(32, (int)images.size());
    for (int i = 0; i < n_eval; ++i)
        psnr_sum += ootd::psnr(codec.decode(codec.encode(images[(size_t)i])), images[(size_t)i]);
    const double mean_psnr = psnr_sum / n_eval;
    std::cout << "codec reconstruction PSNR over " << n_eval << " images: " << mean_psnr
              << " dB\n";

    json meta = cfg;
    meta["psnr_db"] = mean_psnr;
    meta["checkpoint"] = ckpt;
    meta["checkpoint_fnv1a64"] = ootd::hex_u64(ootd::fnv1a64_file(ckpt));
    meta["wall_seconds"] = seconds_since(t0);
    write_meta(a.out, meta);
    return 0;
}

// ------------------------------------------------------------- codec-eval

struct CodecEvalArgs {
    std::string codec, data;
    int max_pairs = 0;
};

int run_codec_eval(const CodecEvalArgs& a) {
    json cfg{{"command", "codec-eval"}, {"codec", a.codec}, {"data", a.data},
             {"max_pairs", a.max_pairs}};
    print_config(cfg);
    ootd::LoadedCodec lc = ootd::load_codec_archive(a.codec);
    ootd::Codec codec(lc.store, "codec", lc.cfg, ootd::Rng(0));
    ootd::Dataset ds = ootd::read_dataset(a.data);
    size_t n = ds.pairs.size();
    if (a.max_pairs > 0) n = std::min(n, (size_t)a.max_pairs);

    struct Agg {
        double psnr = 0, ssim = 0;
        // Squared error split by whether the source pixel sits on a color
        // discontinuity (any neighbor differing by > 0.15 in some channel).
        // Flat pixels are further split by proximity to the image border,
        // where conv padding breaks shift invariance.
        double se_edge = 0, se_flat = 0, se_ring = 0;
        long n_edge = 0, n_flat = 0, n_ring = 0;
        int count = 0;
    };
    std::map<std::string, Agg> agg;
    double z_abs = 0;
    long z_n = 0, z_sat90 = 0, z_sat99 = 0;
    for (size_t i = 0; i < n; ++i) {
        const ootd::SamplePair& p = ds.pairs[i];
        auto add = [&](const char* tag, const ootd::Tensor& img) {
            ootd::Tensor z = codec.encode(img);
            for (size_t k = 0; k < z.size(); ++k) {
                float a = std::abs(z.at(k));
                z_abs += a;
                ++z_n;
                if (a > 0.9f) ++z_sat90;
                if (a > 0.99f) ++z_sat99;
            }
            ootd::Tensor rt = codec.decode(z);
            Agg& g = agg[tag];
            g.psnr += ootd::psnr(rt, img);
            g.ssim += ootd::ssim(rt, img);
            ++g.count;
            const int H = img.dim(1), W = img.dim(2);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    bool edge = false;
                    for (int c = 0; c < 3 && !edge; ++c) {
                        float v = img.at(c, y, x);
                        if (x + 1 < W && std::abs(img.at(c, y, x + 1) - v) > 0.15f) edge = true;
                        if (y + 1 < H && std::abs(img.at(c, y + 1, x) - v) > 0.15f) edge = true;
                        if (x > 0 && std::abs(img.at(c, y, x - 1) - v) > 0.15f) edge = true;
                        if (y > 0 && std::abs(img.at(c, y - 1, x) - v) > 0.15f) edge = true;
                    }
                    double se = 0;
                    for (int c = 0; c < 3; ++c) {
                        double d = (double)rt.at(c, y, x) - img.at(c, y, x);
                        se += d * d;
                    }
                    bool ring = y < 4 || x < 4 || y >= H - 4 || x >= W - 4;
                    if (edge) {
                        g.se_edge += se;
                        ++g.n_edge;
                    } else if (ring) {
                        g.se_ring += se;
                        ++g.n_ring;
                    } else {
                        g.se_flat += se;
                        ++g.n_flat;
                    }
                }
        };
        add("human", p.human);
        add("garment", p.garment);
        add("masked_human", p.masked_human);
    }
    double tp = 0, ts = 0;
    int tc = 0;
    for (const auto& [tag, g] : agg) {
        double mse_e = g.n_edge ? g.se_edge / (3.0 * g.n_edge) : 0.0;
        double mse_f = g.n_flat ? g.se_flat / (3.0 * g.n_flat) : 0.0;
        double mse_r = g.n_ring ? g.se_ring / (3.0 * g.n_ring) : 0.0;
        long n_all = g.n_edge + g.n_flat + g.n_ring;
        double se_all = g.se_edge + g.se_flat + g.se_ring + 1e-30;
        std::printf(
            "%-13s psnr %6.2f dB  ssim %.4f  (n=%d)  edge-mse %.5f (%.0f%% px, %.0f%% of err)  "
            "flat-mse %.5f  border-mse %.5f\n",
            tag.c_str(), g.psnr / g.count, g.ssim / g.count, g.count, mse_e,
            100.0 * g.n_edge / n_all, 100.0 * g.se_edge / se_all, mse_f, mse_r);
        tp += g.psnr;
        ts += g.ssim;
        tc += g.count;
    }
    std::printf("%-13s psnr %6.2f dB  ssim %.4f  (n=%d)\n", "overall", tp / tc, ts / tc, tc);
    std::printf("latents: mean|z| %.3f  |z|>0.9: %.1f%%  |z|>0.99: %.1f%%\n", z_abs / z_n,
                100.0 * z_sat90 / z_n, 100.0 * z_sat99 / z_n);
    return 0;
}

// ----------------------------------------------------------------- train

struct TrainArgs {
    std::string data, out, codec, resume;
    bool identity_codec = false;
    int iters = 8000;
    bool iters_set = false;
    int batch = 8;
    double lr = 5e-5;
    double dropout = 0.10;
    std::uint64_t seed = 11;
    int ckpt_every = 2000;
    bool drop_psi = false;
    int eval_every = 0;
    double target_ssim = 0.0;
    int eval_steps = 20;
    double eval_sg = 1.5;
    int eval_max_pairs = 0;
    int unet_base = 32;
    int T = 1000;
    int codec_steps = 600;
    int log_every = 50;
};

int run_train(const TrainArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    json cfg{{"command", "train"},
             {"data", a.data},
             {"out", a.out},
             {"codec", a.codec},
             {"resume", a.resume},
             {"identity_codec", a.identity_codec},
             {"iterations", a.iters},
             {"batch", a.batch},
             {"lr", a.lr},
             {"dropout", a.dropout},
             {"seed", a.seed},
             {"ckpt_every", a.ckpt_every},
             {"drop_psi_with_garment", a.drop_psi},
             {"eval_every", a.eval_every},
             {"target_ssim", a.target_ssim},
             {"unet_base", a.unet_base},
             {"T", a.T}};
    print_config(cfg);
    ootd::Dataset ds = ootd::read_dataset(a.data);
    std::filesystem::create_directories(a.out);

    std::unique_ptr<ootd::ModelAssembly> assembly;
    std::unique_ptr<ootd::Trainer> trainer;
    if (!a.resume.empty()) {
        ootd::ResumedTrainer rt =
            ootd::resume_trainer(a.resume, ds, a.out, a.iters_set ? a.iters : 0);
        assembly = std::move(rt.assembly);
        trainer = std::move(rt.trainer);
        std::cout << "resumed at iteration " << trainer->iteration() << "\n";
    } else {
        ootd::AssemblyConfig ac;
        ac.unet_base = a.unet_base;
        ac.T = a.T;
        if (!a.codec.empty()) {
            ootd::LoadedCodec lc = ootd::load_codec_archive(a.codec);
            ac.codec_base = lc.cfg.base;
            ac.latent_ch = lc.cfg.latent_ch;
            ac.identity_codec = lc.cfg.identity;
            assembly = std::make_unique<ootd::ModelAssembly>(ac, a.seed);
            ootd::adopt_codec(*assembly, lc.store);
        } else if (a.identity_codec) {
            ac.identity_codec = true;
            assembly = std::make_unique<ootd::ModelAssembly>(ac, a.seed);
        } else {
            std::cout << "no --codec given; pretraining one (" << a.codec_steps << " steps)\n";
            std::vector<ootd::Tensor> images;
            for (const ootd::SamplePair& p : ds.pairs) {
                images.push_back(p.human);
                images.push_back(p.garment);
                images.push_back(p.masked_human);
            }
            ootd::CodecConfig cc;
            cc.base = ac.codec_base;
            ootd::PretrainedCodec pc = ootd::pretrain_codec(
                images, a.codec_steps, ootd::Rng(a.seed ^ 0x9e3779b97f4a7c15ULL), cc);
            assembly = std::make_unique<ootd::ModelAssembly>(ac, a.seed);
            ootd::adopt_codec(*assembly, pc.store);
            ootd::save_codec_archive(a.out + "/codec.bin", pc.store, pc.cfg);
        }
        ootd::TrainConfig tc;
        tc.learning_rate = a.lr;
        tc.dropout = a.dropout;
        tc.batch = a.batch;
        tc.iterations = a.iters;
        tc.seed = a.seed;
        tc.ckpt_every = a.ckpt_every;
        tc.out_dir = a.out;
        tc.drop_psi_with_garment = a.drop_psi;
        tc.eval_every = a.eval_every;
        tc.target_ssim = a.target_ssim;
        tc.eval_steps = a.eval_steps;
        tc.eval_guidance = a.eval_sg;
        tc.eval_max_pairs = a.eval_max_pairs;
        trainer = std::make_unique<ootd::Trainer>(*assembly, ds, tc);
    }

    trainer->run([&](const ootd::TrainMetricRow& r) {
        if (a.log_every > 0 && (r.iter % a.log_every == 0 || r.iter == 1))
            std::printf("iter %6d  loss %.6f  %.1fs\n", r.iter, r.loss, r.seconds);
    });

    const std::string final_ckpt = a.out + "/ckpt_final.bin";
    json meta = cfg;
    meta["stopped_at_iteration"] = trainer->iteration();
    meta["checkpoint"] = final_ckpt;
    meta["checkpoint_fnv1a64"] = ootd::hex_u64(ootd::fnv1a64_file(final_ckpt));
    meta["wall_seconds"] = seconds_since(t0);
    write_meta(a.out, meta);
    std::cout << "final checkpoint: " << final_ckpt << "\n";
    return 0;
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
    std::string ckpt, data, out;
    std::string id, human_id, garment_id;
    double sg = 1.5;
    int steps = 20;
    std::uint64_t seed = 0;
    bool skip_fusion_uncond = false;
    bool drop_psi = false;
};

int run_sample(const SampleArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string human_id = a.id.empty() ? a.human_id : a.id;
    std::string garment_id = a.id.empty() ? a.garment_id : a.id;
    json cfg{{"command", "sample"},   {"ckpt", a.ckpt},
             {"data", a.data},        {"out", a.out},
             {"human_id", human_id},  {"garment_id", garment_id},
             {"s_g", a.sg},           {"steps", a.steps},
             {"seed", a.seed},        {"skip_fusion_uncond", a.skip_fusion_uncond},
             {"drop_psi", a.drop_psi}};
    print_config(cfg);

    ootd::Dataset ds = ootd::read_dataset(a.data);
    const ootd::SamplePair& human_pair = find_pair(ds, human_id);
    const ootd::SamplePair& garment_pair = find_pair(ds, garment_id);
    ootd::LoadedAssembly la = ootd::load_assembly(a.ckpt);

    ootd::SampleRequest req;
    req.masked_human = human_pair.masked_human;
    req.garment = garment_pair.garment;
    req.label = garment_pair.label;
    req.cfg.guidance = a.sg;
    req.cfg.sampler_steps = a.steps;
    req.cfg.seed = a.seed;
    req.drop_psi_with_garment = a.drop_psi;
    req.skip_fusion_uncond = a.skip_fusion_uncond;

    ootd::DdimStats stats;
    ootd::Tensor result = ootd::run_sampler(*la.assembly, req, &stats);

    std::filesystem::create_directories(a.out);
    const std::string img_path = a.out + "/result.ppm";
    ootd::write_ppm(img_path, result);

    json meta = cfg;
    meta["result"] = img_path;
    meta["checkpoint_fnv1a64"] = ootd::hex_u64(ootd::fnv1a64_file(a.ckpt));
    meta["garment_net_calls"] = stats.outfit_calls;
    meta["denoise_calls"] = stats.denoise_calls;
    meta["wall_seconds"] = seconds_since(t0);
    write_meta(a.out, meta);
    std::cout << "wrote " << img_path << "\n";
    return 0;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
    std::string ckpt_dropout, ckpt_nodropout, data, out;
    std::uint64_t seed = 0;
    std::vector<double> grid{1.0, 1.5, 2.0, 2.5, 3.0, 5.0};
};

int run_ablate(const AblateArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    json cfg{{"command", "ablate"},
             {"ckpt_dropout", a.ckpt_dropout},
             {"ckpt_nodropout", a.ckpt_nodropout},
             {"data", a.data},
             {"out", a.out},
             {"seed", a.seed},
             {"s_grid", a.grid}};
    print_config(cfg);
    ootd::Dataset ds = ootd::read_dataset(a.data);
    ootd::LoadedAssembly with_drop = ootd::load_assembly(a.ckpt_dropout);
    ootd::LoadedAssembly no_drop = ootd::load_assembly(a.ckpt_nodropout);
    std::vector<ootd::AblationRow> rows =
        ootd::ablation_run(*with_drop.assembly, *no_drop.assembly, ds, a.grid, a.seed);
    const std::string csv = ootd::ablation_csv(rows);
    std::filesystem::create_directories(a.out);
    ootd::write_file_atomic(a.out + "/ablation.csv", csv);
    std::cout << csv;

    json meta = cfg;
    meta["csv"] = a.out + "/ablation.csv";
    meta["ckpt_dropout_fnv1a64"] = ootd::hex_u64(ootd::fnv1a64_file(a.ckpt_dropout));
    meta["ckpt_nodropout_fnv1a64"] = ootd::hex_u64(ootd::fnv1a64_file(a.ckpt_nodropout));
    meta["wall_seconds"] = seconds_since(t0);
    write_meta(a.out, meta);
    return 0;
}

// ------------------------------------------------------------ inspect-attn

struct InspectArgs {
    std::string ckpt, data, out, id;
    double sg = 1.5;
    int steps = 20;
    std::uint64_t seed = 0;
};

int run_inspect_attn(const InspectArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    json cfg{{"command", "inspect-attn"}, {"ckpt", a.ckpt}, {"data", a.data},
             {"out", a.out},              {"id", a.id},     {"s_g", a.sg},
             {"steps", a.steps},          {"seed", a.seed}};
    print_config(cfg);
    ootd::Dataset ds = ootd::read_dataset(a.data);
    const ootd::SamplePair& pair = a.id.empty() ? ds.pairs.at(0) : find_pair(ds, a.id);
    ootd::LoadedAssembly la = ootd::load_assembly(a.ckpt);

    ootd::SampleConfig sc;
    sc.guidance = a.sg;
    sc.sampler_steps = a.steps;
    sc.seed = a.seed;
    std::vector<std::string> files =
        ootd::dump_attention_maps(*la.assembly, pair, sc, a.out);
    ootd::AttnAttraction attr = ootd::attention_attraction(*la.assembly, pair, sc);
    std::cout << "wrote " << files.size() << " attention maps\n";
    std::cout << "bottleneck garment attention mass: masked-region queries "
              << attr.masked_mean << ", elsewhere " << attr.unmasked_mean << "\n";

    json meta = cfg;
    meta["pair_id"] = pair.id;
    meta["files"] = files;
    meta["checkpoint_fnv1a64"] = ootd::hex_u64(ootd::fnv1a64_file(a.ckpt));
    meta["masked_garment_mass"] = attr.masked_mean;
    meta["unmasked_garment_mass"] = attr.unmasked_mean;
    meta["wall_seconds"] = seconds_since(t0);
    write_meta(a.out, meta);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Latent-diffusion virtual try-on: garment-fused denoising at desk scale"};
    app.require_subcommand(1);

    GenDataArgs gd;
    CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic try-on dataset");
    gen->add_option("--out", gd.out, "Output dataset directory")->required();
    gen->add_option("--n", gd.n, "Pairs per garment category")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    gen->add_option("--seed", gd.seed, "Generator seed")->capture_default_str();
    gen->add_option("--height", gd.height, "Image height")->check(CLI::PositiveNumber)->capture_default_str();
    gen->add_option("--width", gd.width, "Image width")->check(CLI::PositiveNumber)->capture_default_str();

    PretrainArgs pt;
    CLI::App* pre = app.add_subcommand("pretrain-codec", "Pretrain the image codec");
    pre->add_option("--data", pt.data, "Dataset directory")->required();
    pre->add_option("--out", pt.out, "Output directory")->required();
    pre->add_option("--steps", pt.steps, "Optimization steps")->check(CLI::PositiveNumber)->capture_default_str();
    pre->add_option("--seed", pt.seed, "Init/shuffle seed")->capture_default_str();
    pre->add_option("--batch", pt.batch, "Batch size")->check(CLI::PositiveNumber)->capture_default_str();
    pre->add_option("--lr", pt.lr, "Learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    pre->add_option("--base", pt.base, "First-stage width")->check(CLI::PositiveNumber)->capture_default_str();

    CodecEvalArgs ce;
    CLI::App* cev = app.add_subcommand("codec-eval", "Round-trip quality of a codec archive");
    cev->add_option("--codec", ce.codec, "Codec archive")->required();
    cev->add_option("--data", ce.data, "Dataset directory")->required();
    cev->add_option("--max-pairs", ce.max_pairs, "Cap on evaluated pairs (0: all)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();

    TrainArgs tr;
    CLI::App* trn = app.add_subcommand("train", "Train the try-on model");
    trn->add_option("--data", tr.data, "Dataset directory")->required();
    trn->add_option("--out", tr.out, "Output directory")->required();
    trn->add_option("--codec", tr.codec, "Pretrained codec archive");
    trn->add_flag("--identity-codec", tr.identity_codec,
                  "Debug: pixel-resolution pass-through codec");
    CLI::Option* iters_opt =
        trn->add_option("--iters", tr.iters, "Iteration budget")->check(CLI::PositiveNumber)->capture_default_str();
    trn->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber)->capture_default_str();
    trn->add_option("--lr", tr.lr, "Learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    trn->add_option("--dropout", tr.dropout, "Garment dropout probability")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    trn->add_option("--seed", tr.seed, "Training seed")->capture_default_str();
    trn->add_option("--ckpt-every", tr.ckpt_every, "Checkpoint interval (0: only final)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    trn->add_option("--resume", tr.resume, "Resume from a checkpoint");
    trn->add_flag("--drop-psi-with-garment", tr.drop_psi,
                  "Dropped samples also zero the conditioning tokens");
    trn->add_option("--eval-every", tr.eval_every, "Early-stop eval interval (0: off)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    trn->add_option("--target-ssim", tr.target_ssim, "Early-stop SSIM target (0: off)")
        ->capture_default_str();
    trn->add_option("--eval-steps", tr.eval_steps, "Sampler steps for the early-stop eval")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    trn->add_option("--eval-sg", tr.eval_sg, "Guidance for the early-stop eval")
        ->check(CLI::Range(1.0, 1000.0))
        ->capture_default_str();
    trn->add_option("--eval-max-pairs", tr.eval_max_pairs, "Cap on eval pairs (0: all)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    trn->add_option("--unet-base", tr.unet_base, "UNet level-one width")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    trn->add_option("--T", tr.T, "Diffusion step count")->check(CLI::PositiveNumber)->capture_default_str();
    trn->add_option("--codec-steps", tr.codec_steps, "Inline codec pretrain steps")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    trn->add_option("--log-every", tr.log_every, "Progress print interval")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();

    SampleArgs sm;
    CLI::App* smp = app.add_subcommand("sample", "Generate a try-on image");
    smp->add_option("--ckpt", sm.ckpt, "Model checkpoint")->required();
    smp->add_option("--data", sm.data, "Dataset directory")->required();
    smp->add_option("--out", sm.out, "Output directory")->required();
    CLI::Option* id_opt = smp->add_option("--id", sm.id, "Pair id (paired reconstruction)");
    CLI::Option* hid_opt = smp->add_option("--human-id", sm.human_id, "Person source pair id");
    CLI::Option* gid_opt = smp->add_option("--garment-id", sm.garment_id, "Garment source pair id");
    id_opt->excludes(hid_opt)->excludes(gid_opt);
    hid_opt->needs(gid_opt);
    gid_opt->needs(hid_opt);
    smp->add_option("--sg", sm.sg, "Guidance scale (>= 1)")
        ->check(CLI::Range(1.0, 1000.0))
        ->capture_default_str();
    smp->add_option("--steps", sm.steps, "Sampler steps")->check(CLI::PositiveNumber)->capture_default_str();
    smp->add_option("--seed", sm.seed, "Sampler seed")->capture_default_str();
    smp->add_flag("--skip-fusion-uncond", sm.skip_fusion_uncond,
                  "Unconditional branch skips garment fusion (diagnostic)");
    smp->add_flag("--drop-psi", sm.drop_psi,
                  "Unconditional branch zeroes the conditioning tokens (diagnostic)");

    AblateArgs ab;
    CLI::App* abl = app.add_subcommand("ablate", "Guidance-scale/dropout ablation grid");
    abl->add_option("--ckpt-dropout", ab.ckpt_dropout, "Checkpoint trained with dropout")->required();
    abl->add_option("--ckpt-nodropout", ab.ckpt_nodropout, "Checkpoint trained without dropout")->required();
    abl->add_option("--data", ab.data, "Eval dataset directory")->required();
    abl->add_option("--out", ab.out, "Output directory")->required();
    abl->add_option("--seed", ab.seed, "Shared sampler seed")->capture_default_str();
    abl->add_option("--sg-grid", ab.grid, "Guidance scales for the dropout model")
        ->check(CLI::Range(1.0, 1000.0))
        ->capture_default_str();

    InspectArgs in_;
    CLI::App* ins = app.add_subcommand("inspect-attn", "Dump attention-mass heatmaps");
    ins->add_option("--ckpt", in_.ckpt, "Model checkpoint")->required();
    ins->add_option("--data", in_.data, "Dataset directory")->required();
    ins->add_option("--out", in_.out, "Output directory")->required();
    ins->add_option("--id", in_.id, "Pair id (default: first pair)");
    ins->add_option("--sg", in_.sg, "Guidance scale")->check(CLI::Range(1.0, 1000.0))->capture_default_str();
    ins->add_option("--steps", in_.steps, "Sampler steps")->check(CLI::PositiveNumber)->capture_default_str();
    ins->add_option("--seed", in_.seed, "Sampler seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    tr.iters_set = iters_opt->count() > 0;

    try {
        if (*gen) return run_gen_data(gd);
        if (*pre) return run_pretrain_codec(pt);
        if (*cev) return run_codec_eval(ce);
        if (*trn) return run_train(tr);
        if (*smp) return run_sample(sm);
        if (*abl) return run_ablate(ab);
        if (*ins) return run_inspect_attn(in_);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
