#pragma once

// The two UNets of the try-on model.
//
// Both nets share one topology: conv stem, two encoder levels, a bottleneck,
// and a mirrored decoder, with a transformer block (self-attention +
// cross-attention to the garment tokens + feed-forward) at five places.
// The garment net runs once on the clean garment latent at a fixed timestep
// and exposes the feature map that enters each of its five self-attention
// layers. The denoising net consumes that stack: at each self-attention layer
// the garment features are appended to the key/value token sequence, queries
// are computed for the body tokens only, and the attended body tokens
// continue through the block. This is numerically the width-concat +
// first-half-crop formulation; the token form avoids materialising the
// doubled map (the equivalence is pinned by tests against a naive
// concatenate-attend-crop reference).

#include <atomic>
#include <optional>
#include <string>
#include <vector>

#include "ootd/errors.hpp"
#include "ootd/ops.hpp"
#include "ootd/params.hpp"
#include "ootd/rng.hpp"

namespace ootd {

inline constexpr int kAttnLayers = 5;

struct UNetConfig {
    int in_ch = 8;            // 8 for the denoising net, 4 for the garment net
    int out_ch = 4;
    int base = 32;            // level-one width; level two uses 2*base
    int temb_dim = 64;
    int heads = 4;
    int cond_dim = 64;        // psi token dimensionality
    int groups = 8;           // group-norm groups
    int fixed_t = 0;          // timestep used by the garment pass
    int zero_init_in_ch = 0;  // leading input channels whose stem weights start at zero
};

// Instrumentation: how many garment / denoising passes ran (value-level API).
long outfit_forward_count();
long denoise_forward_count();
void reset_forward_counters();
namespace detail {
extern std::atomic<long> g_outfit_calls;
extern std::atomic<long> g_denoise_calls;
}  // namespace detail

// Per-layer garment features (the inputs to the garment net's self-attention
// layers), as plain tensors.
template <class R>
struct GarmentFeatureStackT {
    std::vector<TensorT<R>> feats;
};
using GarmentFeatureStack = GarmentFeatureStackT<float>;

// Attention-mass maps per self-attention layer: for every query position,
// the total softmax weight spent on body-half vs garment-half keys.
template <class R>
struct AttnMapsT {
    std::vector<TensorT<R>> body_mass;     // [h x w] per layer
    std::vector<TensorT<R>> garment_mass;  // [h x w] per layer (zero when unfused)
};
using AttnMaps = AttnMapsT<float>;

// Weights of one self-attention layer as plain tensors (for the standalone op).
template <class R>
struct SelfAttnWeightsT {
    TensorT<R> ln_g, ln_b;
    TensorT<R> wq, bq, wk, bk, wv, bv, wo, bo;
    int heads = 4;
};
using SelfAttnWeights = SelfAttnWeightsT<float>;

namespace detail {
template <class R>
struct AttnLayerVars {
    VarT<R> ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo;
};

// Shared core: pre-norm self-attention over [body; garment] token rows with
// queries restricted to the body rows. Returns the attended body tokens
// (before the residual add). g_tokens == nullptr gives plain self-attention.
template <class R>
VarT<R> self_attention_core_g(TapeT<R>& t, const AttnLayerVars<R>& w, int heads,
                              VarT<R> x_tokens, const VarT<R>* g_tokens, int layer_index,
                              AttnCaptureT<R>* capture) {
    const TensorT<R>& xv = t.value(x_tokens);
    if (xv.rank() != 2) throw FusionError(layer_index, "expected body tokens [N x C]");
    VarT<R> seq = x_tokens;
    if (g_tokens) {
        const TensorT<R>& gv = t.value(*g_tokens);
        if (gv.rank() != 2 || gv.dim(0) != xv.dim(0) || gv.dim(1) != xv.dim(1))
            throw FusionError(layer_index, "garment token shape " + gv.shape_str() +
                                               " does not match body tokens " + xv.shape_str());
        seq = concat_rows(t, x_tokens, *g_tokens);
    }
    VarT<R> normed = layer_norm(t, seq, w.ln_g, w.ln_b);
    VarT<R> q_in = g_tokens ? crop_rows(t, normed, 0, xv.dim(0)) : normed;
    return mha(t, q_in, normed, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo, heads, capture);
}
}  // namespace detail

// Width-concatenation of two feature maps: out[:, :, 0:w] = xn, out[:, :, w:2w] = gn.
template <class R>
TensorT<R> fuse_concat(const TensorT<R>& xn, const TensorT<R>& gn, int layer_index = 0) {
    if (xn.rank() != 3 || gn.rank() != 3 || xn.dim(0) != gn.dim(0) || xn.dim(1) != gn.dim(1) ||
        xn.dim(2) != gn.dim(2))
        throw FusionError(layer_index, "cannot concatenate " + xn.shape_str() + " with " +
                                           gn.shape_str());
    const int c = xn.dim(0), h = xn.dim(1), w = xn.dim(2);
    TensorT<R> out({c, h, 2 * w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                out.at(ci, y, x) = xn.at(ci, y, x);
                out.at(ci, y, w + x) = gn.at(ci, y, x);
            }
    return out;
}

// Standalone fused self-attention: attention runs over the combined body +
// garment token set; the attended body half is returned as [c x h x w].
// Without gn this is plain self-attention over xn's tokens.
template <class R>
TensorT<R> self_attention_fused(const SelfAttnWeightsT<R>& w, const TensorT<R>& xn,
                                const TensorT<R>* gn = nullptr, int layer_index = 0,
                                AttnCaptureT<R>* capture = nullptr) {
    if (xn.rank() != 3) throw FusionError(layer_index, "expected feature map [c x h x w]");
    if (gn && (gn->rank() != 3 || gn->dim(0) != xn.dim(0) || gn->dim(1) != xn.dim(1) ||
               gn->dim(2) != xn.dim(2)))
        throw FusionError(layer_index, "garment map " + gn->shape_str() +
                                           " does not match body map " + xn.shape_str());
    TapeT<R> t(false);
    detail::AttnLayerVars<R> v{
        t.constant(w.ln_g.clone()), t.constant(w.ln_b.clone()), t.constant(w.wq.clone()),
        t.constant(w.bq.clone()),   t.constant(w.wk.clone()),   t.constant(w.bk.clone()),
        t.constant(w.wv.clone()),   t.constant(w.bv.clone()),   t.constant(w.wo.clone()),
        t.constant(w.bo.clone())};
    VarT<R> x_tok = chw_to_tokens(t, t.constant(xn.clone()));
    std::optional<VarT<R>> g_tok;
    if (gn) g_tok = chw_to_tokens(t, t.constant(gn->clone()));
    VarT<R> out = detail::self_attention_core_g(t, v, w.heads, x_tok,
                                                g_tok ? &*g_tok : nullptr, layer_index, capture);
    VarT<R> back = tokens_to_chw(t, out, xn.dim(1), xn.dim(2));
    return t.value(back).clone();
}

template <class R>
class UNetT {
public:
    struct ForwardOut {
        VarT<R> out;
        std::vector<VarT<R>> sa_inputs;  // feature map entering each self-attention layer
    };

    UNetT(ParamStoreT<R>& store, std::string prefix, UNetConfig cfg, Rng init)
        : cfg_(cfg), store_(&store), prefix_(std::move(prefix)) {
        const int b = cfg.base, b2 = 2 * cfg.base, D = cfg.temb_dim;
        bool fresh_stem = get_or_add("in.w", [&] {
            return init_conv_weight<R>(init.fork("in"), b, cfg.in_ch, 3, 3);
        });
        get_or_add("in.b", [&] { return TensorT<R>::zeros({b}); });
        if (fresh_stem && cfg.zero_init_in_ch > 0) zero_stem_slice();
        get_or_add("temb.w1", [&] { return init_linear_weight<R>(init.fork("temb1"), D, D); });
        get_or_add("temb.b1", [&] { return TensorT<R>::zeros({D}); });
        get_or_add("temb.w2", [&] { return init_linear_weight<R>(init.fork("temb2"), D, D); });
        get_or_add("temb.b2", [&] { return TensorT<R>::zeros({D}); });
        add_res("enc1.res.", b, b, init.fork("enc1res"));
        add_tf("enc1.tf.", b, init.fork("enc1tf"));
        get_or_add("down.w", [&] { return init_conv_weight<R>(init.fork("down"), b2, b, 3, 3); });
        get_or_add("down.b", [&] { return TensorT<R>::zeros({b2}); });
        add_res("enc2.res.", b2, b2, init.fork("enc2res"));
        add_tf("enc2.tf.", b2, init.fork("enc2tf"));
        add_res("mid.res1.", b2, b2, init.fork("midres1"));
        add_tf("mid.tf.", b2, init.fork("midtf"));
        add_res("mid.res2.", b2, b2, init.fork("midres2"));
        add_res("dec2.res.", 2 * b2, b2, init.fork("dec2res"));
        add_tf("dec2.tf.", b2, init.fork("dec2tf"));
        get_or_add("up.w", [&] { return init_convt_weight<R>(init.fork("up"), b2, b, 4, 4); });
        get_or_add("up.b", [&] { return TensorT<R>::zeros({b}); });
        add_res("dec1.res.", 2 * b, b, init.fork("dec1res"));
        add_tf("dec1.tf.", b, init.fork("dec1tf"));
        get_or_add("out.gn.g", [&] { return TensorT<R>::ones({b}); });
        get_or_add("out.gn.b", [&] { return TensorT<R>::zeros({b}); });
        get_or_add("out.w", [&] {
            TensorT<R> w = init_conv_weight<R>(init.fork("out"), cfg.out_ch, b, 3, 3);
            for (size_t i = 0; i < w.size(); ++i) w.at(i) = R(0.2) * w.at(i);
            return w;
        });
        get_or_add("out.b", [&] { return TensorT<R>::zeros({cfg.out_ch}); });
    }

    const UNetConfig& config() const { return cfg_; }
    int attention_layers() const { return kAttnLayers; }

    // Graph-building forward. garment_feats, when given, must hold one feature
    // map per self-attention layer; they extend the key/value sequence of the
    // matching layer. captures, when given, receives one attention map per
    // layer. features_only stops the pass as soon as the last self-attention
    // input is recorded (all a garment pass is for); out then holds that map.
    ForwardOut forward_g(TapeT<R>& t, const BoundParamsT<R>& p, VarT<R> zin, int timestep,
                         const std::vector<VarT<R>>* garment_feats, VarT<R> psi,
                         std::vector<AttnCaptureT<R>>* captures = nullptr,
                         bool features_only = false) const {
        const TensorT<R>& zv = t.value(zin);
        if (zv.rank() != 3 || zv.dim(0) != cfg_.in_ch)
            throw ShapeError("unet: expected input [" + std::to_string(cfg_.in_ch) +
                             " x h x w], got " + zv.shape_str());
        if (zv.dim(1) % 2 != 0 || zv.dim(2) % 2 != 0)
            throw ShapeError("unet: spatial dims must be even, got " + zv.shape_str());
        const TensorT<R>& pv = t.value(psi);
        if (pv.rank() != 2 || pv.dim(1) != cfg_.cond_dim)
            throw ShapeError("unet: expected psi [n x " + std::to_string(cfg_.cond_dim) +
                             "], got " + pv.shape_str());
        if (garment_feats && (int)garment_feats->size() != kAttnLayers)
            throw FusionError(0, "garment feature stack has " +
                                     std::to_string(garment_feats->size()) + " entries, expected " +
                                     std::to_string(kAttnLayers));
        if (captures) {
            captures->clear();
            captures->resize(kAttnLayers);
        }

        ForwardOut fo;
        VarT<R> temb = t.constant(timestep_embedding<R>(timestep, cfg_.temb_dim));
        temb = linear(t, temb, P(p, "temb.w1"), P(p, "temb.b1"));
        temb = silu(t, temb);
        temb = linear(t, temb, P(p, "temb.w2"), P(p, "temb.b2"));

        VarT<R> x = conv2d(t, zin, P(p, "in.w"), P(p, "in.b"), 1, 1);
        x = res_g(t, p, "enc1.res.", x, temb);
        x = tf_g(t, p, "enc1.tf.", x, garment_feats, psi, 0, captures, fo.sa_inputs);
        VarT<R> skip1 = x;
        x = conv2d(t, x, P(p, "down.w"), P(p, "down.b"), 2, 1);
        x = res_g(t, p, "enc2.res.", x, temb);
        x = tf_g(t, p, "enc2.tf.", x, garment_feats, psi, 1, captures, fo.sa_inputs);
        VarT<R> skip2 = x;
        x = res_g(t, p, "mid.res1.", x, temb);
        x = tf_g(t, p, "mid.tf.", x, garment_feats, psi, 2, captures, fo.sa_inputs);
        x = res_g(t, p, "mid.res2.", x, temb);
        x = concat_channels(t, x, skip2);
        x = res_g(t, p, "dec2.res.", x, temb);
        x = tf_g(t, p, "dec2.tf.", x, garment_feats, psi, 3, captures, fo.sa_inputs);
        x = conv_transpose2d(t, x, P(p, "up.w"), P(p, "up.b"), 2, 1);
        x = concat_channels(t, x, skip1);
        x = res_g(t, p, "dec1.res.", x, temb);
        if (features_only) {
            fo.sa_inputs.push_back(x);
            fo.out = x;
            return fo;
        }
        x = tf_g(t, p, "dec1.tf.", x, garment_feats, psi, 4, captures, fo.sa_inputs);
        x = group_norm(t, x, P(p, "out.gn.g"), P(p, "out.gn.b"), cfg_.groups);
        x = silu(t, x);
        fo.out = conv2d(t, x, P(p, "out.w"), P(p, "out.b"), 1, 1);
        return fo;
    }

    // Value-level garment pass: run once on the clean garment latent at the
    // fixed timestep and keep the feature maps feeding each self-attention.
    GarmentFeatureStackT<R> outfit_forward(const TensorT<R>& gz, const TensorT<R>& psi) const {
        detail::g_outfit_calls.fetch_add(1, std::memory_order_relaxed);
        TapeT<R> t(false);
        BoundParamsT<R> p(t, *store_, /*trainable=*/false);
        ForwardOut fo = forward_g(t, p, t.constant(gz.clone()), cfg_.fixed_t, nullptr,
                                  t.constant(psi.clone()), nullptr, /*features_only=*/true);
        GarmentFeatureStackT<R> stack;
        for (VarT<R> v : fo.sa_inputs) stack.feats.push_back(t.value(v).clone());
        return stack;
    }

    // Value-level denoising pass.
    TensorT<R> denoise(const TensorT<R>& zin, int timestep, const GarmentFeatureStackT<R>* feats,
                       const TensorT<R>& psi) const {
        detail::g_denoise_calls.fetch_add(1, std::memory_order_relaxed);
        TapeT<R> t(false);
        BoundParamsT<R> p(t, *store_, /*trainable=*/false);
        std::vector<VarT<R>> fv;
        if (feats)
            for (const TensorT<R>& f : feats->feats) fv.push_back(t.constant(f.clone()));
        ForwardOut fo = forward_g(t, p, t.constant(zin.clone()), timestep,
                                  feats ? &fv : nullptr, t.constant(psi.clone()));
        return t.value(fo.out).clone();
    }

    // Run a denoising pass and report, per self-attention layer, how much
    // softmax mass each query spends on the body vs garment key halves.
    AttnMapsT<R> capture_attention(const TensorT<R>& zin, int timestep,
                                   const GarmentFeatureStackT<R>* feats,
                                   const TensorT<R>& psi) const {
        TapeT<R> t(false);
        BoundParamsT<R> p(t, *store_, /*trainable=*/false);
        std::vector<VarT<R>> fv;
        if (feats)
            for (const TensorT<R>& f : feats->feats) fv.push_back(t.constant(f.clone()));
        std::vector<AttnCaptureT<R>> caps;
        ForwardOut fo = forward_g(t, p, t.constant(zin.clone()), timestep,
                                  feats ? &fv : nullptr, t.constant(psi.clone()), &caps);
        AttnMapsT<R> maps;
        for (int L = 0; L < kAttnLayers; ++L) {
            const TensorT<R>& sa = t.value(fo.sa_inputs[L]);
            const int h = sa.dim(1), w = sa.dim(2), n = h * w;
            const TensorT<R>& probs = caps[L].probs;
            TensorT<R> body({h, w}), garment = TensorT<R>::zeros({h, w});
            const bool fused = probs.dim(1) == 2 * n;
            for (int q = 0; q < n; ++q) {
                double bm = 0, gm = 0;
                for (int k = 0; k < n; ++k) bm += (double)probs.at(q, k);
                if (fused)
                    for (int k = n; k < 2 * n; ++k) gm += (double)probs.at(q, k);
                body.at(q) = (R)bm;
                garment.at(q) = (R)gm;
            }
            maps.body_mass.push_back(std::move(body));
            maps.garment_mass.push_back(std::move(garment));
        }
        return maps;
    }

    // Fused self-attention of one layer with this net's weights (value-level).
    TensorT<R> self_attention_fused_at(int layer, const TensorT<R>& xn,
                                       const TensorT<R>* gn = nullptr) const {
        return ootd::self_attention_fused(self_attn_weights(layer), xn, gn, layer);
    }

    SelfAttnWeightsT<R> self_attn_weights(int layer) const {
        if (layer < 0 || layer >= kAttnLayers)
            throw FusionError(layer, "no such self-attention layer");
        const std::string b = prefix_ + tf_name(layer);
        auto V = [&](const char* n) { return store_->value(store_->id_of(b + n)).clone(); };
        SelfAttnWeightsT<R> w{V("ln1.g"), V("ln1.b"), V("sa.wq"), V("sa.bq"), V("sa.wk"),
                              V("sa.bk"), V("sa.wv"), V("sa.bv"), V("sa.wo"), V("sa.bo"),
                              cfg_.heads};
        return w;
    }

    std::vector<int> param_ids() const {
        std::vector<int> ids;
        for (int i = 0; i < store_->count(); ++i)
            if (store_->name(i).rfind(prefix_, 0) == 0) ids.push_back(i);
        return ids;
    }

    const std::string& prefix() const { return prefix_; }

private:
    static const char* tf_name(int layer) {
        static const char* names[kAttnLayers] = {"enc1.tf.", "enc2.tf.", "mid.tf.", "dec2.tf.",
                                                 "dec1.tf."};
        return names[layer];
    }

    VarT<R> P(const BoundParamsT<R>& p, const std::string& n) const {
        return p.var(store_->id_of(prefix_ + n));
    }

    template <class F>
    bool get_or_add(const std::string& name, F make) {
        std::string full = prefix_ + name;
        if (store_->has(full)) return false;
        store_->add(full, make());
        return true;
    }

    void zero_stem_slice() {
        TensorT<R>& w = store_->value(store_->id_of(prefix_ + "in.w"));
        const int oc = w.dim(0), ic = w.dim(1), kh = w.dim(2), kw = w.dim(3);
        const int z = std::min(cfg_.zero_init_in_ch, ic);
        for (int o = 0; o < oc; ++o)
            for (int i = 0; i < z; ++i)
                for (int y = 0; y < kh; ++y)
                    for (int x = 0; x < kw; ++x) w.at(((o * ic + i) * kh + y) * kw + x) = R(0);
    }

    void add_res(const std::string& base, int cin, int cout, Rng r) {
        const int D = cfg_.temb_dim;
        get_or_add(base + "gn1.g", [&] { return TensorT<R>::ones({cin}); });
        get_or_add(base + "gn1.b", [&] { return TensorT<R>::zeros({cin}); });
        get_or_add(base + "conv1.w", [&] { return init_conv_weight<R>(r.fork("c1"), cout, cin, 3, 3); });
        get_or_add(base + "conv1.b", [&] { return TensorT<R>::zeros({cout}); });
        get_or_add(base + "temb.w", [&] { return init_linear_weight<R>(r.fork("tp"), cout, D); });
        get_or_add(base + "temb.b", [&] { return TensorT<R>::zeros({cout}); });
        get_or_add(base + "gn2.g", [&] { return TensorT<R>::ones({cout}); });
        get_or_add(base + "gn2.b", [&] { return TensorT<R>::zeros({cout}); });
        get_or_add(base + "conv2.w", [&] {
            TensorT<R> w = init_conv_weight<R>(r.fork("c2"), cout, cout, 3, 3);
            for (size_t i = 0; i < w.size(); ++i) w.at(i) = R(0.2) * w.at(i);
            return w;
        });
        get_or_add(base + "conv2.b", [&] { return TensorT<R>::zeros({cout}); });
        if (cin != cout) {
            get_or_add(base + "skip.w", [&] { return init_conv_weight<R>(r.fork("sk"), cout, cin, 1, 1); });
            get_or_add(base + "skip.b", [&] { return TensorT<R>::zeros({cout}); });
        }
    }

    void add_tf(const std::string& base, int c, Rng r) {
        const int dc = cfg_.cond_dim;
        auto lin = [&](const char* tag, int rows, int cols, R gain) {
            TensorT<R> w = init_linear_weight<R>(r.fork(tag), rows, cols);
            if (gain != R(1))
                for (size_t i = 0; i < w.size(); ++i) w.at(i) = gain * w.at(i);
            return w;
        };
        get_or_add(base + "ln1.g", [&] { return TensorT<R>::ones({c}); });
        get_or_add(base + "ln1.b", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "sa.wq", [&] { return lin("sawq", c, c, R(1)); });
        get_or_add(base + "sa.bq", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "sa.wk", [&] { return lin("sawk", c, c, R(1)); });
        get_or_add(base + "sa.bk", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "sa.wv", [&] { return lin("sawv", c, c, R(1)); });
        get_or_add(base + "sa.bv", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "sa.wo", [&] { return lin("sawo", c, c, R(0.2)); });
        get_or_add(base + "sa.bo", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "ln2.g", [&] { return TensorT<R>::ones({c}); });
        get_or_add(base + "ln2.b", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "ca.wq", [&] { return lin("cawq", c, c, R(1)); });
        get_or_add(base + "ca.bq", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "ca.wk", [&] { return lin("cawk", c, dc, R(1)); });
        get_or_add(base + "ca.bk", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "ca.wv", [&] { return lin("cawv", c, dc, R(1)); });
        get_or_add(base + "ca.bv", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "ca.wo", [&] { return lin("cawo", c, c, R(0.2)); });
        get_or_add(base + "ca.bo", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "ln3.g", [&] { return TensorT<R>::ones({c}); });
        get_or_add(base + "ln3.b", [&] { return TensorT<R>::zeros({c}); });
        get_or_add(base + "ff1.w", [&] { return lin("ff1", 2 * c, c, R(1)); });
        get_or_add(base + "ff1.b", [&] { return TensorT<R>::zeros({2 * c}); });
        get_or_add(base + "ff2.w", [&] { return lin("ff2", c, 2 * c, R(0.2)); });
        get_or_add(base + "ff2.b", [&] { return TensorT<R>::zeros({c}); });
    }

    VarT<R> res_g(TapeT<R>& t, const BoundParamsT<R>& p, const std::string& base, VarT<R> x,
                  VarT<R> temb) const {
        auto B = [&](const char* n) { return P(p, base + n); };
        const TensorT<R>& xv = t.value(x);
        const int cin = xv.dim(0);
        VarT<R> h = group_norm(t, x, B("gn1.g"), B("gn1.b"), cfg_.groups);
        h = silu(t, h);
        h = conv2d(t, h, B("conv1.w"), B("conv1.b"), 1, 1);
        VarT<R> tb = linear(t, temb, B("temb.w"), B("temb.b"));
        h = add_channel_bias(t, h, as_vec(t, tb));
        h = group_norm(t, h, B("gn2.g"), B("gn2.b"), cfg_.groups);
        h = silu(t, h);
        h = conv2d(t, h, B("conv2.w"), B("conv2.b"), 1, 1);
        VarT<R> skip = x;
        const int cout = t.value(h).dim(0);
        if (cin != cout) skip = conv2d(t, x, B("skip.w"), B("skip.b"), 1, 0);
        return add(t, skip, h);
    }

    VarT<R> tf_g(TapeT<R>& t, const BoundParamsT<R>& p, const std::string& base, VarT<R> x,
                 const std::vector<VarT<R>>* garment_feats, VarT<R> psi, int layer,
                 std::vector<AttnCaptureT<R>>* captures, std::vector<VarT<R>>& sa_inputs) const {
        auto B = [&](const char* n) { return P(p, base + n); };
        sa_inputs.push_back(x);
        const TensorT<R>& xv = t.value(x);
        const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
        VarT<R> x_tok = chw_to_tokens(t, x);
        std::optional<VarT<R>> g_tok;
        if (garment_feats) {
            const TensorT<R>& gv = t.value((*garment_feats)[layer]);
            if (gv.rank() != 3 || gv.dim(0) != c || gv.dim(1) != h || gv.dim(2) != w)
                throw FusionError(layer, "garment feature " + gv.shape_str() +
                                             " does not match body feature " + xv.shape_str());
            g_tok = chw_to_tokens(t, (*garment_feats)[layer]);
        }
        detail::AttnLayerVars<R> av{B("ln1.g"), B("ln1.b"), B("sa.wq"), B("sa.bq"), B("sa.wk"),
                                    B("sa.bk"), B("sa.wv"), B("sa.bv"), B("sa.wo"), B("sa.bo")};
        AttnCaptureT<R>* cap = captures ? &(*captures)[layer] : nullptr;
        VarT<R> attn = detail::self_attention_core_g(t, av, cfg_.heads, x_tok,
                                                     g_tok ? &*g_tok : nullptr, layer, cap);
        x_tok = add(t, x_tok, attn);
        VarT<R> qn = layer_norm(t, x_tok, B("ln2.g"), B("ln2.b"));
        VarT<R> ca = mha(t, qn, psi, B("ca.wq"), B("ca.bq"), B("ca.wk"), B("ca.bk"), B("ca.wv"),
                         B("ca.bv"), B("ca.wo"), B("ca.bo"), cfg_.heads);
        x_tok = add(t, x_tok, ca);
        VarT<R> f = layer_norm(t, x_tok, B("ln3.g"), B("ln3.b"));
        f = linear(t, f, B("ff1.w"), B("ff1.b"));
        f = silu(t, f);
        f = linear(t, f, B("ff2.w"), B("ff2.b"));
        x_tok = add(t, x_tok, f);
        return tokens_to_chw(t, x_tok, h, w);
    }

    UNetConfig cfg_;
    ParamStoreT<R>* store_;
    std::string prefix_;
};

using UNet = UNetT<float>;

}  // namespace ootd
