#pragma once

// Tiny deterministic autoencoder standing in for the latent-diffusion VAE:
// 3 stride-2 conv stages (each followed by a residual stride-1 conv) down to
// a 4-channel latent at 1/8 resolution, and a mirrored upsampling path back.
// Each decoder stage is nearest-neighbor x2 + 3x3 conv — a stride-2 transposed
// conv with phase-tied taps — so constant regions decode exactly constant for
// any weights instead of asking training to equalize the four phase sums.
// No posterior sampling; encode is a pure function. A debug identity mode
// carries the RGB image through as a pixel-resolution "latent" with a zero
// 4th channel.

#include <map>
#include <string>
#include <vector>

#include "ootd/ops.hpp"
#include "ootd/params.hpp"
#include "ootd/rng.hpp"
#include "ootd/tape.hpp"
#include "ootd/tensor.hpp"

namespace ootd {

struct CodecConfig {
    int base = 16;          // first-stage width; doubled per stage
    int latent_ch = 4;
    bool identity = false;  // debug: pixel-resolution pass-through
};

template <class R>
class CodecT {
public:
    CodecT(ParamStoreT<R>& store, std::string prefix, CodecConfig cfg, Rng init_rng)
        : store_(&store), cfg_(cfg) {
        auto par = [&](const std::string& name, auto make) {
            std::string full = prefix + "." + name;
            return store.has(full) ? store.id_of(full) : store.add(full, make());
        };
        int b = cfg.base;
        auto conv = [&](const std::string& n, int oc, int ic, int k) {
            w_[n] = par(n + ".w", [&] { return init_conv_weight<R>(init_rng.fork(n), oc, ic, k, k); });
            w_[n + "_b"] = par(n + ".b", [&] { return TensorT<R>({oc}); });
        };
        // Residual convs start at zero so every residual stage begins as the
        // identity; the stack's initial function stays shallow and well-scaled.
        auto rconv = [&](const std::string& n, int c) {
            w_[n] = par(n + ".w", [&] { return TensorT<R>({c, c, 3, 3}); });
            w_[n + "_b"] = par(n + ".b", [&] { return TensorT<R>({c}); });
        };
        // Recorded latent gain: set after pretraining so diffusion sees
        // unit-variance latents. encode multiplies by it, decode divides, so
        // the round trip is exact for any value and reconstruction training
        // puts no gradient pressure on it.
        w_["latent_scale"] = par("latent_scale", [] { return TensorT<R>::ones({1}); });
        conv("enc0", b, 3, 3);
        conv("enc1", b, b, 3);
        rconv("enc1b", b);
        conv("enc2", 2 * b, b, 3);
        rconv("enc2b", 2 * b);
        conv("enc3", 4 * b, 2 * b, 3);
        rconv("enc3b", 4 * b);
        conv("enc_head", cfg.latent_ch, 4 * b, 3);
        conv("dec_tail", 4 * b, cfg.latent_ch, 3);
        rconv("dec_tail2", 4 * b);
        conv("dec3", 2 * b, 4 * b, 3);
        rconv("dec3b", 2 * b);
        conv("dec2", b, 2 * b, 3);
        rconv("dec2b", b);
        conv("dec1", b, b, 3);
        rconv("dec1b", b);
        conv("dec_out", 3, b, 3);
    }

    const CodecConfig& config() const { return cfg_; }
    ParamStoreT<R>& store() const { return *store_; }

    // Differentiable graphs (img/z already on the tape).
    VarT<R> encode_g(TapeT<R>& t, const BoundParamsT<R>& p, VarT<R> img) const {
        check_image(t.value(img));
        if (cfg_.identity) return identity_encode(t, img);
        // Full-resolution stem lets the encoder smooth before each stride-2
        // stage; residual stride-1 convs keep the deeper stack trainable.
        VarT<R> h = silu(t, conv2d(t, img, p[w("enc0")], p[w("enc0_b")], 1, 1));
        h = silu(t, conv2d(t, h, p[w("enc1")], p[w("enc1_b")], 2, 1));
        h = res(t, p, h, "enc1b");
        h = silu(t, conv2d(t, h, p[w("enc2")], p[w("enc2_b")], 2, 1));
        h = res(t, p, h, "enc2b");
        h = silu(t, conv2d(t, h, p[w("enc3")], p[w("enc3_b")], 2, 1));
        h = res(t, p, h, "enc3b");
        VarT<R> z = tanh_op(t, conv2d(t, h, p[w("enc_head")], p[w("enc_head_b")], 1, 1));
        return mul_scalar(t, z, p[w("latent_scale")]);
    }

    // Raw decoder output (unclamped), so reconstruction training keeps its
    // gradient; the value-level decode() clamps to [0,1].
    VarT<R> decode_g(TapeT<R>& t, const BoundParamsT<R>& p, VarT<R> z) const {
        check_latent(t.value(z));
        if (cfg_.identity) return identity_decode(t, z);
        VarT<R> zu = div_scalar(t, z, p[w("latent_scale")]);
        VarT<R> h = silu(t, conv2d(t, zu, p[w("dec_tail")], p[w("dec_tail_b")], 1, 1));
        h = res(t, p, h, "dec_tail2");
        h = silu(t, conv2d(t, upsample_nearest2(t, h), p[w("dec3")], p[w("dec3_b")], 1, 1));
        h = res(t, p, h, "dec3b");
        h = silu(t, conv2d(t, upsample_nearest2(t, h), p[w("dec2")], p[w("dec2_b")], 1, 1));
        h = res(t, p, h, "dec2b");
        h = silu(t, conv2d(t, upsample_nearest2(t, h), p[w("dec1")], p[w("dec1_b")], 1, 1));
        h = res(t, p, h, "dec1b");
        return conv2d(t, h, p[w("dec_out")], p[w("dec_out_b")], 1, 1);
    }

    TensorT<R> encode(const TensorT<R>& img) const {
        TapeT<R> t(false);
        BoundParamsT<R> p(t, *store_, false);
        return t.value(encode_g(t, p, t.constant(img)));
    }

    TensorT<R> decode(const TensorT<R>& z) const {
        TapeT<R> t(false);
        BoundParamsT<R> p(t, *store_, false);
        TensorT<R> out = t.value(decode_g(t, p, t.constant(z))).clone();
        for (size_t i = 0; i < out.size(); ++i) {
            R v = out.data()[i];
            out.data()[i] = v < R(0) ? R(0) : (v > R(1) ? R(1) : v);
        }
        return out;
    }

private:
    int w(const std::string& n) const { return w_.at(n); }

    // Shape-preserving conv with a residual connection: h + SiLU(conv(h)).
    VarT<R> res(TapeT<R>& t, const BoundParamsT<R>& p, VarT<R> h, const std::string& n) const {
        return add(t, h, silu(t, conv2d(t, h, p[w(n)], p[w(n + "_b")], 1, 1)));
    }

    void check_image(const TensorT<R>& img) const {
        if (img.rank() != 3 || img.dim(0) != 3)
            throw ShapeError("codec: expected 3xHxW image, got " + shape_str(img.shape()));
        if (!cfg_.identity && (img.dim(1) % 8 != 0 || img.dim(2) % 8 != 0))
            throw ShapeError("codec: H and W must be divisible by 8, got " +
                             shape_str(img.shape()));
    }
    void check_latent(const TensorT<R>& z) const {
        if (z.rank() != 3 || z.dim(0) != cfg_.latent_ch)
            throw ShapeError("codec: expected " + std::to_string(cfg_.latent_ch) +
                             "xhxw latent, got " + shape_str(z.shape()));
    }

    VarT<R> identity_encode(TapeT<R>& t, VarT<R> img) const {
        const TensorT<R>& v = t.value(img);
        VarT<R> zero = t.constant(TensorT<R>({1, v.dim(1), v.dim(2)}));
        return concat_channels(t, img, zero);
    }
    VarT<R> identity_decode(TapeT<R>& t, VarT<R> z) const { return crop_channels(t, z, 0, 3); }

    ParamStoreT<R>* store_;
    CodecConfig cfg_;
    std::map<std::string, int> w_;
};

using Codec = CodecT<float>;

struct CodecMetricRow {
    int iter = 0;
    double loss = 0.0;
    double seconds = 0.0;
};

struct PretrainedCodec {
    ParamStore store;
    CodecConfig cfg;
    bool frozen = true;
    std::vector<CodecMetricRow> curve;
};

// Reconstruction-MSE pretraining; returns frozen weights and the loss curve.
PretrainedCodec pretrain_codec(const std::vector<Tensor>& images, int steps, Rng rng,
                               CodecConfig cfg = {}, int batch = 8, double lr = 2e-3);

// 10*log10(1 / MSE), the metric the pretraining target is stated in.
double psnr(const Tensor& a, const Tensor& b);

}  // namespace ootd
