#include "ootd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ootd/errors.hpp"
#include "ootd/evalkit.hpp"
#include "ootd/io_util.hpp"
#include "ootd/ops.hpp"

namespace ootd {

void TrainConfig::validate() const {
    if (!(learning_rate > 0)) throw RangeError("train config: learning_rate must be > 0");
    if (dropout < 0.0 || dropout > 1.0)
        throw RangeError("train config: dropout must be in [0,1]");
    if (batch < 1) throw RangeError("train config: batch must be >= 1");
    if (iterations < 0) throw RangeError("train config: iterations must be >= 0");
}

Tensor apply_outfitting_dropout(Rng& rng, const Tensor& gz, double p, bool* dropped) {
    if (p < 0.0 || p > 1.0) throw RangeError("outfitting dropout: p must be in [0,1]");
    const bool d = rng.next_unit() < p;
    if (dropped) *dropped = d;
    return d ? Tensor::zeros(gz.shape()) : gz.clone();
}

Trainer::Trainer(ModelAssembly& assembly, const Dataset& dataset, TrainConfig cfg)
    : a_(assembly),
      ds_(dataset),
      cfg_(std::move(cfg)),
      opt_(assembly.model_store,
           AdamWConfig{cfg_.learning_rate, cfg_.beta1, cfg_.beta2, 1e-8, cfg_.weight_decay}),
      root_(cfg_.seed) {
    cfg_.validate();
    if (ds_.pairs.empty()) throw InputError("trainer: empty dataset");
    x_z_.reserve(ds_.pairs.size());
    xm_z_.reserve(ds_.pairs.size());
    g_z_.reserve(ds_.pairs.size());
    for (const SamplePair& p : ds_.pairs) {
        x_z_.push_back(a_.codec->encode(p.outfitted));
        xm_z_.push_back(a_.codec->encode(p.masked_human));
        g_z_.push_back(a_.codec->encode(p.garment));
    }
}

double Trainer::sample_loss(int pair_index, int iter, int slot, std::vector<Tensor>& grads) {
    const SamplePair& pair = ds_.pairs[(size_t)pair_index];
    const auto it = (std::uint64_t)iter;
    const auto sl = (std::uint64_t)slot;

    const int T = a_.sched.T;
    const int tstep =
        1 + (int)(root_.fork("tstep").fork(it).fork(sl).next_u64() % (std::uint64_t)T);
    Tensor eps_true =
        normal<float>(root_.fork("noise").fork(it).fork(sl), x_z_[(size_t)pair_index].shape());
    Tensor z_noisy = add_noise(a_.sched, x_z_[(size_t)pair_index], eps_true, tstep);

    Rng drop_rng = root_.fork("drop").fork(it).fork(sl);
    bool dropped = false;
    Tensor gz_used =
        apply_outfitting_dropout(drop_rng, g_z_[(size_t)pair_index], cfg_.dropout, &dropped);

    Tape tape;
    BoundParams bp(tape, a_.model_store, /*trainable=*/true);
    Var psi;
    if (dropped && cfg_.drop_psi_with_garment)
        psi = tape.constant(Tensor::zeros({2, a_.cfg.cond_dim}));
    else
        psi = a_.cond->make_psi_g(tape, bp, tape.constant(pair.garment.clone()), pair.label);

    auto garment_pass = a_.omega->forward_g(tape, bp, tape.constant(gz_used),
                                            a_.omega->config().fixed_t, nullptr, psi, nullptr,
                                            /*features_only=*/true);
    Tensor zin = detail::concat_latent_channels(xm_z_[(size_t)pair_index], z_noisy);
    auto denoise_pass = a_.eps->forward_g(tape, bp, tape.constant(std::move(zin)), tstep,
                                          &garment_pass.sa_inputs, psi);
    Var loss = mse_loss(tape, denoise_pass.out, tape.constant(std::move(eps_true)));
    const double loss_value = (double)tape.value(loss).at((size_t)0);
    tape.backward(loss);
    tape.for_each_param_grad([&](int pid, const Tensor& g) {
        Tensor& acc = grads[(size_t)pid];
        if (!acc.defined()) {
            acc = g.clone();
        } else {
            for (size_t i = 0; i < acc.size(); ++i) acc.at(i) += g.at(i);
        }
    });
    return loss_value;
}

double Trainer::train_iteration() {
    const int iter = iter_;
    Rng batch_rng = root_.fork("batch").fork((std::uint64_t)iter);
    std::vector<Tensor> grads((size_t)a_.model_store.count());
    double loss_sum = 0.0;
    for (int slot = 0; slot < cfg_.batch; ++slot) {
        const int idx = (int)(batch_rng.next_u64() % (std::uint64_t)ds_.pairs.size());
        loss_sum += sample_loss(idx, iter, slot, grads);
    }
    const double loss_mean = loss_sum / (double)cfg_.batch;
    if (!std::isfinite(loss_mean))
        throw TrainingError("non-finite loss at iteration " + std::to_string(iter + 1));
    const float inv_batch = 1.0f / (float)cfg_.batch;
    for (Tensor& g : grads)
        if (g.defined())
            for (size_t i = 0; i < g.size(); ++i) g.at(i) *= inv_batch;
    opt_.step(a_.model_store, grads);
    ++iter_;
    return loss_mean;
}

double Trainer::eval_train_ssim() const {
    const int n = (cfg_.eval_max_pairs > 0)
                      ? std::min<int>(cfg_.eval_max_pairs, (int)ds_.pairs.size())
                      : (int)ds_.pairs.size();
    Rng seeds = root_.fork("eval");
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const SamplePair& p = ds_.pairs[(size_t)i];
        SampleRequest req;
        req.masked_human = p.masked_human;
        req.garment = p.garment;
        req.label = p.label;
        req.cfg.sampler_steps = cfg_.eval_steps;
        req.cfg.guidance = cfg_.eval_guidance;
        req.cfg.seed = seeds.fork((std::uint64_t)i).next_u64();
        acc += ssim(run_sampler(a_, req), p.outfitted);
    }
    return acc / (double)n;
}

void Trainer::run(const std::function<void(const TrainMetricRow&)>& progress) {
    if (cfg_.out_dir.empty()) throw InputError("trainer: out_dir is required for run()");
    std::filesystem::create_directories(cfg_.out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return elapsed_before_ +
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    while (iter_ < cfg_.iterations) {
        const double loss = train_iteration();
        TrainMetricRow row{iter_, loss, elapsed()};
        metrics_.push_back(row);
        if (progress) progress(row);
        const bool last = iter_ >= cfg_.iterations;
        if (!last && cfg_.ckpt_every > 0 && iter_ % cfg_.ckpt_every == 0) {
            char name[64];
            std::snprintf(name, sizeof(name), "/ckpt_%06d.bin", iter_);
            save_checkpoint(cfg_.out_dir + name);
            write_metrics(cfg_.out_dir + "/metrics.csv");
        }
        if (!last && cfg_.eval_every > 0 && cfg_.target_ssim > 0.0 &&
            iter_ % cfg_.eval_every == 0) {
            if (eval_train_ssim() >= cfg_.target_ssim) break;
        }
    }
    save_checkpoint(cfg_.out_dir + "/ckpt_final.bin");
    write_metrics(cfg_.out_dir + "/metrics.csv");
}

void Trainer::save_checkpoint(const std::string& path) const {
    std::vector<ArchiveEntry> extras;
    AdamW& opt = const_cast<AdamW&>(opt_);
    for (int i = 0; i < a_.model_store.count(); ++i) {
        const std::string& pname = a_.model_store.name(i);
        extras.push_back({"opt.m." + pname, opt.moment1(i).clone()});
        extras.push_back({"opt.v." + pname, opt.moment2(i).clone()});
    }
    auto u = [&](const char* k, std::uint64_t v) { extras.push_back({k, pack_u64(v)}); };
    auto f = [&](const char* k, double v) { extras.push_back({k, pack_f64(v)}); };
    u("meta.run.iter", (std::uint64_t)iter_);
    u("meta.run.opt_step", (std::uint64_t)opt_.step_count());
    u("meta.run.seed", cfg_.seed);
    f("meta.run.lr", cfg_.learning_rate);
    f("meta.run.dropout", cfg_.dropout);
    f("meta.run.beta1", cfg_.beta1);
    f("meta.run.beta2", cfg_.beta2);
    f("meta.run.wd", cfg_.weight_decay);
    u("meta.run.batch", (std::uint64_t)cfg_.batch);
    u("meta.run.iterations", (std::uint64_t)cfg_.iterations);
    u("meta.run.ckpt_every", (std::uint64_t)cfg_.ckpt_every);
    u("meta.run.drop_psi", cfg_.drop_psi_with_garment ? 1 : 0);
    u("meta.run.eval_every", (std::uint64_t)cfg_.eval_every);
    f("meta.run.target_ssim", cfg_.target_ssim);
    f("meta.run.eval_guidance", cfg_.eval_guidance);
    u("meta.run.eval_steps", (std::uint64_t)cfg_.eval_steps);
    u("meta.run.eval_max_pairs", (std::uint64_t)cfg_.eval_max_pairs);
    save_assembly(a_, path, extras);
}

void Trainer::write_metrics(const std::string& path) const {
    std::string csv = "iter,loss,seconds\n";
    char buf[96];
    for (const TrainMetricRow& r : metrics_) {
        std::snprintf(buf, sizeof(buf), "%d,%.8f,%.3f\n", r.iter, r.loss, r.seconds);
        csv += buf;
    }
    write_file_atomic(path, csv);
}

ResumedTrainer resume_trainer(const std::string& ckpt_path, const Dataset& dataset,
                              const std::string& out_dir, int iterations_override) {
    LoadedAssembly loaded = load_assembly(ckpt_path);
    auto& x = loaded.extras;
    auto want = [&](const std::string& k) -> const Tensor& {
        auto it = x.find(k);
        if (it == x.end()) throw FormatError("checkpoint: missing " + k);
        return it->second;
    };
    TrainConfig cfg;
    cfg.seed = unpack_u64(want("meta.run.seed"));
    cfg.learning_rate = unpack_f64(want("meta.run.lr"));
    cfg.dropout = unpack_f64(want("meta.run.dropout"));
    cfg.beta1 = unpack_f64(want("meta.run.beta1"));
    cfg.beta2 = unpack_f64(want("meta.run.beta2"));
    cfg.weight_decay = unpack_f64(want("meta.run.wd"));
    cfg.batch = (int)unpack_u64(want("meta.run.batch"));
    cfg.iterations = (int)unpack_u64(want("meta.run.iterations"));
    cfg.ckpt_every = (int)unpack_u64(want("meta.run.ckpt_every"));
    cfg.drop_psi_with_garment = unpack_u64(want("meta.run.drop_psi")) != 0;
    cfg.eval_every = (int)unpack_u64(want("meta.run.eval_every"));
    cfg.target_ssim = unpack_f64(want("meta.run.target_ssim"));
    cfg.eval_guidance = unpack_f64(want("meta.run.eval_guidance"));
    cfg.eval_steps = (int)unpack_u64(want("meta.run.eval_steps"));
    cfg.eval_max_pairs = (int)unpack_u64(want("meta.run.eval_max_pairs"));
    cfg.out_dir = out_dir;
    if (iterations_override > 0) cfg.iterations = iterations_override;

    ResumedTrainer out;
    out.assembly = std::move(loaded.assembly);
    out.trainer = std::make_unique<Trainer>(*out.assembly, dataset, cfg);
    AdamW& opt = out.trainer->optimizer();
    for (int i = 0; i < out.assembly->model_store.count(); ++i) {
        const std::string& pname = out.assembly->model_store.name(i);
        opt.moment1(i) = want("opt.m." + pname).clone();
        opt.moment2(i) = want("opt.v." + pname).clone();
    }
    opt.set_step_count((long)unpack_u64(want("meta.run.opt_step")));
    out.trainer->set_iteration((int)unpack_u64(want("meta.run.iter")));
    return out;
}

}  // namespace ootd
