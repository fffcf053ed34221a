#include "ootd/pipeline.hpp"

#include "ootd/errors.hpp"

namespace ootd {

namespace {

UNetConfig unet_cfg(const AssemblyConfig& c, bool denoiser) {
    UNetConfig u;
    u.in_ch = denoiser ? 2 * c.latent_ch : c.latent_ch;
    u.out_ch = c.latent_ch;
    u.base = c.unet_base;
    u.temb_dim = c.temb_dim;
    u.heads = c.heads;
    u.cond_dim = c.cond_dim;
    u.groups = c.groups;
    u.fixed_t = 0;
    // The denoiser's stem starts blind to the masked-person channels (they
    // occupy the leading half of its input).
    u.zero_init_in_ch = denoiser ? c.latent_ch : 0;
    return u;
}

void put_meta_u64(std::vector<ArchiveEntry>& out, const std::string& name, std::uint64_t v) {
    out.push_back({name, pack_u64(v)});
}

std::uint64_t get_meta_u64(const std::map<std::string, Tensor>& m, const std::string& name) {
    auto it = m.find(name);
    if (it == m.end()) throw FormatError("checkpoint: missing " + name);
    return unpack_u64(it->second);
}

}  // namespace

ModelAssembly::ModelAssembly(const AssemblyConfig& c, std::uint64_t seed) : cfg(c) {
    Rng root(seed);
    CodecConfig cc;
    cc.base = c.codec_base;
    cc.latent_ch = c.latent_ch;
    cc.identity = c.identity_codec;
    codec.emplace(codec_store, "codec", cc, root.fork("codec"));
    CondEncConfig ec;
    ec.dim = c.cond_dim;
    ec.base = c.cond_base;
    cond.emplace(model_store, "cond.", ec, root.fork("cond"));
    omega.emplace(model_store, "omega.", unet_cfg(c, false), root.fork("omega"));
    eps.emplace(model_store, "eps.", unet_cfg(c, true), root.fork("eps"));
    sched = NoiseSchedule::linear(c.T);
}

void adopt_codec(ModelAssembly& a, const ParamStore& pretrained) {
    if (pretrained.count() != a.codec_store.count())
        throw FormatError("codec adoption: parameter count mismatch");
    for (int i = 0; i < a.codec_store.count(); ++i) {
        const std::string& name = a.codec_store.name(i);
        int src = pretrained.id_of(name);
        if (!pretrained.value(src).same_shape(a.codec_store.value(i)))
            throw FormatError("codec adoption: shape mismatch for " + name);
        a.codec_store.value(i) = pretrained.value(src).clone();
    }
}

void save_codec_archive(const std::string& path, const ParamStore& store,
                        const CodecConfig& cfg) {
    std::vector<ArchiveEntry> entries;
    put_meta_u64(entries, "meta.codec.base", (std::uint64_t)cfg.base);
    put_meta_u64(entries, "meta.codec.latent_ch", (std::uint64_t)cfg.latent_ch);
    put_meta_u64(entries, "meta.codec.identity", cfg.identity ? 1 : 0);
    for (int i = 0; i < store.count(); ++i)
        entries.push_back({store.name(i), store.value(i).clone()});
    save_archive(path, entries);
}

LoadedCodec load_codec_archive(const std::string& path) {
    std::vector<ArchiveEntry> entries = load_archive(path);
    std::map<std::string, Tensor> m = archive_map(entries);
    LoadedCodec out;
    out.cfg.base = (int)get_meta_u64(m, "meta.codec.base");
    out.cfg.latent_ch = (int)get_meta_u64(m, "meta.codec.latent_ch");
    out.cfg.identity = get_meta_u64(m, "meta.codec.identity") != 0;
    for (const ArchiveEntry& e : entries)
        if (e.name.rfind("meta.", 0) != 0) out.store.add(e.name, e.value.clone());
    return out;
}

void save_assembly(const ModelAssembly& a, const std::string& path,
                   const std::vector<ArchiveEntry>& extras) {
    std::vector<ArchiveEntry> entries;
    const AssemblyConfig& c = a.cfg;
    put_meta_u64(entries, "meta.cfg.codec_base", (std::uint64_t)c.codec_base);
    put_meta_u64(entries, "meta.cfg.identity_codec", c.identity_codec ? 1 : 0);
    put_meta_u64(entries, "meta.cfg.unet_base", (std::uint64_t)c.unet_base);
    put_meta_u64(entries, "meta.cfg.temb_dim", (std::uint64_t)c.temb_dim);
    put_meta_u64(entries, "meta.cfg.heads", (std::uint64_t)c.heads);
    put_meta_u64(entries, "meta.cfg.cond_dim", (std::uint64_t)c.cond_dim);
    put_meta_u64(entries, "meta.cfg.cond_base", (std::uint64_t)c.cond_base);
    put_meta_u64(entries, "meta.cfg.groups", (std::uint64_t)c.groups);
    put_meta_u64(entries, "meta.cfg.latent_ch", (std::uint64_t)c.latent_ch);
    put_meta_u64(entries, "meta.cfg.T", (std::uint64_t)c.T);
    for (int i = 0; i < a.codec_store.count(); ++i)
        entries.push_back({a.codec_store.name(i), a.codec_store.value(i).clone()});
    for (int i = 0; i < a.model_store.count(); ++i)
        entries.push_back({a.model_store.name(i), a.model_store.value(i).clone()});
    for (const ArchiveEntry& e : extras) entries.push_back({e.name, e.value.clone()});
    save_archive(path, entries);
}

LoadedAssembly load_assembly(const std::string& path) {
    std::vector<ArchiveEntry> entries = load_archive(path);
    std::map<std::string, Tensor> m = archive_map(entries);
    AssemblyConfig c;
    c.codec_base = (int)get_meta_u64(m, "meta.cfg.codec_base");
    c.identity_codec = get_meta_u64(m, "meta.cfg.identity_codec") != 0;
    c.unet_base = (int)get_meta_u64(m, "meta.cfg.unet_base");
    c.temb_dim = (int)get_meta_u64(m, "meta.cfg.temb_dim");
    c.heads = (int)get_meta_u64(m, "meta.cfg.heads");
    c.cond_dim = (int)get_meta_u64(m, "meta.cfg.cond_dim");
    c.cond_base = (int)get_meta_u64(m, "meta.cfg.cond_base");
    c.groups = (int)get_meta_u64(m, "meta.cfg.groups");
    c.latent_ch = (int)get_meta_u64(m, "meta.cfg.latent_ch");
    c.T = (int)get_meta_u64(m, "meta.cfg.T");

    LoadedAssembly out;
    out.assembly = std::make_unique<ModelAssembly>(c, /*seed=*/0);
    auto fill = [&](ParamStore& store) {
        for (int i = 0; i < store.count(); ++i) {
            auto it = m.find(store.name(i));
            if (it == m.end()) throw FormatError("checkpoint: missing tensor " + store.name(i));
            if (!it->second.same_shape(store.value(i)))
                throw FormatError("checkpoint: shape mismatch for " + store.name(i));
            store.value(i) = it->second.clone();
            m.erase(it);
        }
    };
    fill(out.assembly->codec_store);
    fill(out.assembly->model_store);
    for (auto it = m.begin(); it != m.end();) {
        if (it->first.rfind("meta.cfg.", 0) == 0)
            it = m.erase(it);
        else
            ++it;
    }
    out.extras = std::move(m);
    return out;
}

Tensor run_sampler(const ModelAssembly& a, const SampleRequest& req, DdimStats* stats,
                   const std::function<void(int, int, const Tensor&)>& pre_step) {
    Tensor xm_z = a.codec->encode(req.masked_human);
    Tensor gz = a.codec->encode(req.garment);
    Tensor psi = a.cond->make_psi(req.garment, req.label);
    GarmentFeatureStack feats_c = a.omega->outfit_forward(gz, psi);
    long omega_calls = 1;

    Tensor psi_u = req.drop_psi_with_garment ? Tensor::zeros(psi.shape()) : psi;
    const bool both = req.cfg.guidance > 1.0 || req.cfg.force_both_branches;
    std::optional<GarmentFeatureStack> feats_u;
    if (both && !req.skip_fusion_uncond) {
        feats_u = a.omega->outfit_forward(Tensor::zeros(gz.shape()), psi_u);
        ++omega_calls;
    }
    if (stats) stats->outfit_calls = omega_calls;

    Tensor z0 = ddim_sample<float>(*a.eps, a.sched, xm_z, feats_c,
                                   feats_u ? &*feats_u : nullptr, psi, psi_u, req.cfg, stats,
                                   pre_step);
    return a.codec->decode(z0);
}

}  // namespace ootd
