#pragma once

// Metrics and experiment harnesses: SSIM, masked-region fidelity, the
// guidance-scale/dropout ablation grid, and attention-map dumps.

#include <cstdint>
#include <string>
#include <vector>

#include "ootd/pipeline.hpp"
#include "ootd/synthdata.hpp"
#include "ootd/tensor.hpp"

namespace ootd {

// Mean SSIM over channels, 7x7 uniform window (valid positions only),
// K1=0.01, K2=0.03, dynamic range 1.0.
double ssim(const Tensor& a, const Tensor& b);

// Mean squared error restricted to mask=1 pixels (all channels).
double masked_fidelity(const Tensor& result, const Tensor& gt, const Tensor& mask);

struct AblationRow {
    bool dropout_enabled = false;
    double s_g = 1.0;
    double masked_mse = 0.0;  // perceptual-distance stand-in
    double ssim = 0.0;
    int n = 0;
};

// Evaluate the no-dropout model at s_g=1 plus the dropout model across the
// guidance grid, on the paired eval set. Per-pair sampler seeds derive only
// from (seed, pair index), so every row sees identical noise.
std::vector<AblationRow> ablation_run(const ModelAssembly& with_dropout,
                                      const ModelAssembly& without_dropout,
                                      const Dataset& eval_set,
                                      const std::vector<double>& s_grid, std::uint64_t seed);

std::string ablation_csv(const std::vector<AblationRow>& rows);

// Write per-layer body/garment attention-mass heatmaps at sampler steps
// {1, mid, last}; each map normalized to [0,255]. Returns the written paths.
std::vector<std::string> dump_attention_maps(const ModelAssembly& a, const SamplePair& pair,
                                             const SampleConfig& cfg, const std::string& out_dir);

// Garment-half attention mass at one layer, averaged over the same three
// steps, split by whether the query position lies in the masked region.
struct AttnAttraction {
    double masked_mean = 0.0;
    double unmasked_mean = 0.0;
};
AttnAttraction attention_attraction(const ModelAssembly& a, const SamplePair& pair,
                                    const SampleConfig& cfg, int layer = 2);

}  // namespace ootd
