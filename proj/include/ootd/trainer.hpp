#pragma once

// Joint training of the garment net, the denoising net, and the condition
// encoder. The codec is frozen: image latents are computed once up front and
// the optimizer only sees the model store.
//
// Every random draw is a pure function of (seed, stream label, iteration,
// batch slot), so a run resumed from a checkpoint replays the exact
// trajectory of the uninterrupted run, bit for bit.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ootd/diffusion.hpp"
#include "ootd/optim.hpp"
#include "ootd/pipeline.hpp"
#include "ootd/synthdata.hpp"

namespace ootd {

struct TrainConfig {
    double learning_rate = 5e-5;
    double dropout = 0.10;  // per-sample garment-drop probability
    int batch = 8;
    int iterations = 8000;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-2;
    int ckpt_every = 2000;        // 0 = only the final checkpoint
    std::string out_dir;          // metrics + checkpoints land here
    bool drop_psi_with_garment = false;  // dropped samples also zero psi

    // Optional early stop: every eval_every iterations, sample the training
    // pairs and stop once mean SSIM against ground truth reaches target_ssim.
    int eval_every = 0;
    double target_ssim = 0.0;
    double eval_guidance = 1.5;
    int eval_steps = 20;
    int eval_max_pairs = 0;  // 0 = all pairs

    void validate() const;
};

struct TrainMetricRow {
    int iter = 0;
    double loss = 0.0;
    double seconds = 0.0;
};

// With probability p, replaces the garment latent with the all-zero latent.
// Consumes exactly one draw regardless of p. `dropped`, when given, reports
// which way the draw went.
Tensor apply_outfitting_dropout(Rng& rng, const Tensor& gz, double p, bool* dropped = nullptr);

class Trainer {
public:
    Trainer(ModelAssembly& assembly, const Dataset& dataset, TrainConfig cfg);

    // One optimizer step over a freshly drawn batch; returns the batch loss.
    double train_iteration();

    // Full loop: train to cfg.iterations (honoring the early-stop policy),
    // writing metrics and periodic + final checkpoints under cfg.out_dir.
    // progress, when set, is called after every iteration.
    void run(const std::function<void(const TrainMetricRow&)>& progress = {});

    int iteration() const { return iter_; }
    void set_iteration(int i) { iter_ = i; }
    const TrainConfig& config() const { return cfg_; }
    const std::vector<TrainMetricRow>& metrics() const { return metrics_; }
    AdamW& optimizer() { return opt_; }

    // Mean SSIM of guided samples against ground truth over the training
    // pairs (the early-stop criterion, also useful standalone).
    double eval_train_ssim() const;

    void save_checkpoint(const std::string& path) const;
    void write_metrics(const std::string& path) const;

private:
    double sample_loss(int pair_index, int iter, int slot, std::vector<Tensor>& grads);

    ModelAssembly& a_;
    const Dataset& ds_;
    TrainConfig cfg_;
    AdamW opt_;
    Rng root_;
    int iter_ = 0;
    std::vector<TrainMetricRow> metrics_;
    double elapsed_before_ = 0.0;  // wall time accounted to previous segments

    // Latents cached through the frozen codec, aligned with ds_.pairs.
    std::vector<Tensor> x_z_, xm_z_, g_z_;
};

// Rebuild an assembly + trainer from a checkpoint written by save_checkpoint.
// The dataset must be the one the run was started with. out_dir (and the
// iteration budget, if >0) may be overridden for the resumed segment.
struct ResumedTrainer {
    std::unique_ptr<ModelAssembly> assembly;
    std::unique_ptr<Trainer> trainer;
};
ResumedTrainer resume_trainer(const std::string& ckpt_path, const Dataset& dataset,
                              const std::string& out_dir, int iterations_override = 0);

}  // namespace ootd
