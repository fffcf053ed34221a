#pragma once

// Independent double-precision reference for fused self-attention, written
// with plain loops against the documented math rather than the production
// ops. The reference path materialises the width-concatenated map, runs full
// attention over every token of it (queries included for the garment half),
// and crops the body half afterward. Token order follows the row-major
// flatten of the concatenated map, which interleaves body and garment rows —
// attention with no positional signal is permutation-equivariant, so this
// must agree with the production sequence-concat path to float accuracy.

#include <cmath>
#include <vector>

#include "ootd/ootdnet.hpp"
#include "ootd/tensor.hpp"

namespace ref {

// y = LN(x) * gamma + beta per row; population variance, eps 1e-5.
inline std::vector<std::vector<double>> layer_norm(const std::vector<std::vector<double>>& x,
                                                   const ootd::Tensor& g,
                                                   const ootd::Tensor& b) {
    std::vector<std::vector<double>> y(x.size());
    const size_t n = x.empty() ? 0 : x[0].size();
    for (size_t r = 0; r < x.size(); ++r) {
        double mu = 0;
        for (double v : x[r]) mu += v;
        mu /= (double)n;
        double var = 0;
        for (double v : x[r]) var += (v - mu) * (v - mu);
        var /= (double)n;
        double rs = 1.0 / std::sqrt(var + 1e-5);
        y[r].resize(n);
        for (size_t i = 0; i < n; ++i)
            y[r][i] = (x[r][i] - mu) * rs * (double)g.at(i) + (double)b.at(i);
    }
    return y;
}

// y = x W^T + b, W [out x in].
inline std::vector<std::vector<double>> project(const std::vector<std::vector<double>>& x,
                                                const ootd::Tensor& w, const ootd::Tensor& b) {
    const int out = w.dim(0), in = w.dim(1);
    std::vector<std::vector<double>> y(x.size(), std::vector<double>(out));
    for (size_t r = 0; r < x.size(); ++r)
        for (int o = 0; o < out; ++o) {
            double s = (double)b.at(o);
            for (int i = 0; i < in; ++i) s += x[r][(size_t)i] * (double)w.at(o, i);
            y[r][(size_t)o] = s;
        }
    return y;
}

// Full multi-head self-attention over every token of a [c x h x w] map.
inline ootd::Tensor full_attention(const ootd::SelfAttnWeights& wts, const ootd::Tensor& map) {
    const int c = map.dim(0), h = map.dim(1), w = map.dim(2), M = h * w;
    std::vector<std::vector<double>> tok((size_t)M, std::vector<double>((size_t)c));
    for (int p = 0; p < M; ++p)
        for (int ci = 0; ci < c; ++ci) tok[(size_t)p][(size_t)ci] = (double)map.at(ci, p / w, p % w);

    auto normed = layer_norm(tok, wts.ln_g, wts.ln_b);
    auto Q = project(normed, wts.wq, wts.bq);
    auto K = project(normed, wts.wk, wts.bk);
    auto V = project(normed, wts.wv, wts.bv);

    const int heads = wts.heads, dh = c / heads;
    const double scale = 1.0 / std::sqrt((double)dh);
    std::vector<std::vector<double>> O((size_t)M, std::vector<double>((size_t)c, 0.0));
    for (int hd = 0; hd < heads; ++hd) {
        const int o0 = hd * dh;
        for (int i = 0; i < M; ++i) {
            std::vector<double> s((size_t)M);
            double mx = -1e300;
            for (int j = 0; j < M; ++j) {
                double dot = 0;
                for (int d = 0; d < dh; ++d)
                    dot += Q[(size_t)i][(size_t)(o0 + d)] * K[(size_t)j][(size_t)(o0 + d)];
                s[(size_t)j] = dot * scale;
                mx = std::max(mx, s[(size_t)j]);
            }
            double z = 0;
            for (int j = 0; j < M; ++j) {
                s[(size_t)j] = std::exp(s[(size_t)j] - mx);
                z += s[(size_t)j];
            }
            for (int j = 0; j < M; ++j) {
                double p = s[(size_t)j] / z;
                for (int d = 0; d < dh; ++d)
                    O[(size_t)i][(size_t)(o0 + d)] += p * V[(size_t)j][(size_t)(o0 + d)];
            }
        }
    }
    auto out_tok = project(O, wts.wo, wts.bo);

    ootd::Tensor out({c, h, w});
    for (int p = 0; p < M; ++p)
        for (int ci = 0; ci < c; ++ci)
            out.at(ci, p / w, p % w) = (float)out_tok[(size_t)p][(size_t)ci];
    return out;
}

// Naive fused attention: concatenate along width, attend over everything,
// crop the body half back out.
inline ootd::Tensor fused_attention(const ootd::SelfAttnWeights& wts, const ootd::Tensor& xn,
                                    const ootd::Tensor& gn) {
    ootd::Tensor both = ootd::fuse_concat(xn, gn);
    ootd::Tensor attended = full_attention(wts, both);
    const int c = xn.dim(0), h = xn.dim(1), w = xn.dim(2);
    ootd::Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ci, y, x) = attended.at(ci, y, x);
    return out;
}

inline ootd::SelfAttnWeights random_attn_weights(int c, int heads, ootd::Rng rng) {
    using ootd::Tensor;
    ootd::SelfAttnWeights w;
    w.heads = heads;
    w.ln_g = ootd::normal<float>(rng.fork("lng"), {c});
    for (size_t i = 0; i < w.ln_g.size(); ++i) w.ln_g.at(i) = 1.0f + 0.2f * w.ln_g.at(i);
    w.ln_b = ootd::normal<float>(rng.fork("lnb"), {c});
    for (size_t i = 0; i < w.ln_b.size(); ++i) w.ln_b.at(i) *= 0.1f;
    auto mat = [&](const char* tag) {
        Tensor m = ootd::normal<float>(rng.fork(tag), {c, c});
        for (size_t i = 0; i < m.size(); ++i) m.at(i) *= 0.4f;
        return m;
    };
    auto vec = [&](const char* tag) {
        Tensor v = ootd::normal<float>(rng.fork(tag), {c});
        for (size_t i = 0; i < v.size(); ++i) v.at(i) *= 0.1f;
        return v;
    };
    w.wq = mat("wq"); w.bq = vec("bq");
    w.wk = mat("wk"); w.bk = vec("bk");
    w.wv = mat("wv"); w.bv = vec("bv");
    w.wo = mat("wo"); w.bo = vec("bo");
    return w;
}

inline double max_abs_diff(const ootd::Tensor& a, const ootd::Tensor& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs((double)a.at(i) - (double)b.at(i)));
    return m;
}

}  // namespace ref
