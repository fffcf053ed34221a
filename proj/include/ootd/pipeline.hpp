#pragma once

// Full model assembly: codec + condition encoder + the two UNets + schedule,
// with checkpoint save/load and the guided sampling entry point.
//
// Parameters live in two stores: the codec's (frozen once pretrained) and the
// jointly trained model store (condition encoder, garment UNet, denoising
// UNet). The optimizer only ever sees the model store, which is what keeps
// the codec bit-identical across a training run.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ootd/checkpoint.hpp"
#include "ootd/codec.hpp"
#include "ootd/condenc.hpp"
#include "ootd/diffusion.hpp"
#include "ootd/ootdnet.hpp"
#include "ootd/synthdata.hpp"

namespace ootd {

struct AssemblyConfig {
    int codec_base = 16;
    bool identity_codec = false;
    int unet_base = 32;
    int temb_dim = 64;
    int heads = 4;
    int cond_dim = 64;
    int cond_base = 16;
    int groups = 8;
    int latent_ch = 4;
    int T = 1000;
};

struct ModelAssembly {
    ModelAssembly(const AssemblyConfig& c, std::uint64_t seed);
    ModelAssembly(const ModelAssembly&) = delete;
    ModelAssembly& operator=(const ModelAssembly&) = delete;

    AssemblyConfig cfg;
    ParamStore codec_store;  // "codec.*"
    ParamStore model_store;  // "cond.*", "omega.*", "eps.*"
    std::optional<Codec> codec;
    std::optional<CondEnc> cond;
    std::optional<UNet> omega;  // garment feature net (runs once per branch)
    std::optional<UNet> eps;    // denoising net
    NoiseSchedule sched;
};

// Replace the assembly's codec weights with a pretrained store (same layout).
void adopt_codec(ModelAssembly& a, const ParamStore& pretrained);

// Standalone codec archives (the pretraining artifact).
void save_codec_archive(const std::string& path, const ParamStore& store,
                        const CodecConfig& cfg);
struct LoadedCodec {
    ParamStore store;
    CodecConfig cfg;
};
LoadedCodec load_codec_archive(const std::string& path);

// Archive the whole assembly plus caller extras ("opt.*", "meta.run.*", ...).
void save_assembly(const ModelAssembly& a, const std::string& path,
                   const std::vector<ArchiveEntry>& extras = {});

struct LoadedAssembly {
    std::unique_ptr<ModelAssembly> assembly;
    std::map<std::string, Tensor> extras;
};
LoadedAssembly load_assembly(const std::string& path);

struct SampleRequest {
    Tensor masked_human;  // [3 x H x W]
    Tensor garment;       // [3 x H x W]
    GarmentLabel label = GarmentLabel::upperbody;
    SampleConfig cfg;
    bool drop_psi_with_garment = false;  // unconditional branch zeroes psi too
    bool skip_fusion_uncond = false;     // unconditional branch skips fusion entirely
};

// Encode inputs, run the garment net once per branch, walk the DDIM
// trajectory, decode. Returns the generated RGB image in [0,1].
Tensor run_sampler(const ModelAssembly& a, const SampleRequest& req, DdimStats* stats = nullptr,
                   const std::function<void(int, int, const Tensor&)>& pre_step = {});

}  // namespace ootd
