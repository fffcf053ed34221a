#pragma once

// Differentiable tensor ops used by the codec, condition encoder and the two
// UNets. Each op runs the forward pass eagerly and, when gradients are
// enabled, registers a backward closure on the tape. Convolutions are
// im2col+GEMM; transposed convolution is the data-gradient dual of an
// ordinary convolution and reuses the same kernels.

#include <cmath>
#include <cstring>
#include <vector>

#include "ootd/errors.hpp"
#include "ootd/kernels.hpp"
#include "ootd/tape.hpp"
#include "ootd/tensor.hpp"

namespace ootd {

constexpr double kNormEps = 1e-5;

// ---------------------------------------------------------------- elementwise

template <class R>
VarT<R> add(TapeT<R>& t, VarT<R> a, VarT<R> b) {
    const TensorT<R>& av = t.value(a);
    const TensorT<R>& bv = t.value(b);
    check_same_shape(av, bv, "add");
    TensorT<R> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] = av.data()[i] + bv.data()[i];
    int ai = a.id, bi = b.id;
    return t.make(std::move(out), {a, b}, [ai, bi](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
        tp.add_grad(ai, n.grad);
        tp.add_grad(bi, n.grad);
    });
}

template <class R>
VarT<R> scale(TapeT<R>& t, VarT<R> a, R c) {
    const TensorT<R>& av = t.value(a);
    TensorT<R> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] = av.data()[i] * c;
    int ai = a.id;
    return t.make(std::move(out), {a}, [ai, c](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
        if (!tp.node(ai).requires_grad) return;
        TensorT<R>& da = tp.grad(ai);
        for (size_t i = 0; i < da.size(); ++i) da.data()[i] += c * n.grad.data()[i];
    });
}

// Multiply every entry of x by a single-element tensor s (a learnable or
// recorded scalar, e.g. the codec's latent gain).
template <class R>
VarT<R> mul_scalar(TapeT<R>& t, VarT<R> x, VarT<R> s) {
    const TensorT<R>& xv = t.value(x);
    const TensorT<R>& sv = t.value(s);
    if (sv.size() != 1) throw ShapeError("mul_scalar: scalar operand must have one element");
    const R c = sv.data()[0];
    TensorT<R> out(xv.shape());
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] = xv.data()[i] * c;
    int xi = x.id, si = s.id;
    TensorT<R> saved = xv;
    return t.make(std::move(out), {x, s},
                  [xi, si, c, saved](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
                      if (tp.node(xi).requires_grad) {
                          TensorT<R>& dx = tp.grad(xi);
                          for (size_t i = 0; i < dx.size(); ++i)
                              dx.data()[i] += c * n.grad.data()[i];
                      }
                      if (tp.node(si).requires_grad) {
                          double acc = 0;
                          for (size_t i = 0; i < saved.size(); ++i)
                              acc += (double)saved.data()[i] * (double)n.grad.data()[i];
                          tp.grad(si).data()[0] += static_cast<R>(acc);
                      }
                  });
}

// Divide every entry of x by a single-element tensor s.
template <class R>
VarT<R> div_scalar(TapeT<R>& t, VarT<R> x, VarT<R> s) {
    const TensorT<R>& xv = t.value(x);
    const TensorT<R>& sv = t.value(s);
    if (sv.size() != 1) throw ShapeError("div_scalar: scalar operand must have one element");
    const R c = sv.data()[0];
    if (c == R(0)) throw RangeError("div_scalar: scalar operand is zero");
    TensorT<R> out(xv.shape());
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] = xv.data()[i] / c;
    int xi = x.id, si = s.id;
    TensorT<R> saved = xv;
    return t.make(std::move(out), {x, s},
                  [xi, si, c, saved](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
                      if (tp.node(xi).requires_grad) {
                          TensorT<R>& dx = tp.grad(xi);
                          for (size_t i = 0; i < dx.size(); ++i)
                              dx.data()[i] += n.grad.data()[i] / c;
                      }
                      if (tp.node(si).requires_grad) {
                          double acc = 0;
                          for (size_t i = 0; i < saved.size(); ++i)
                              acc += (double)saved.data()[i] * (double)n.grad.data()[i];
                          tp.grad(si).data()[0] += static_cast<R>(-acc / ((double)c * c));
                      }
                  });
}

template <class R>
VarT<R> silu(TapeT<R>& t, VarT<R> a) {
    const TensorT<R>& av = t.value(a);
    TensorT<R> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = static_cast<double>(av.data()[i]);
        out.data()[i] = static_cast<R>(x / (1.0 + std::exp(-x)));
    }
    int ai = a.id;
    TensorT<R> saved = av;
    return t.make(std::move(out), {a}, [ai, saved](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
        if (!tp.node(ai).requires_grad) return;
        TensorT<R>& da = tp.grad(ai);
        for (size_t i = 0; i < da.size(); ++i) {
            double x = static_cast<double>(saved.data()[i]);
            double s = 1.0 / (1.0 + std::exp(-x));
            da.data()[i] += static_cast<R>(s * (1.0 + x * (1.0 - s))) * n.grad.data()[i];
        }
    });
}

template <class R>
VarT<R> tanh_op(TapeT<R>& t, VarT<R> a) {
    const TensorT<R>& av = t.value(a);
    TensorT<R> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i)
        out.data()[i] = static_cast<R>(std::tanh(static_cast<double>(av.data()[i])));
    int ai = a.id;
    TensorT<R> saved = out;  // derivative uses the output
    return t.make(std::move(out), {a}, [ai, saved](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
        if (!tp.node(ai).requires_grad) return;
        TensorT<R>& da = tp.grad(ai);
        for (size_t i = 0; i < da.size(); ++i) {
            R y = saved.data()[i];
            da.data()[i] += (R(1) - y * y) * n.grad.data()[i];
        }
    });
}

// ---------------------------------------------------------------- linear

// y[M x N] = x[M x K] * W[N x K]^T + b[N]
template <class R>
VarT<R> linear(TapeT<R>& t, VarT<R> x, VarT<R> w, VarT<R> b) {
    const TensorT<R>& xv = t.value(x);
    const TensorT<R>& wv = t.value(w);
    const TensorT<R>& bv = t.value(b);
    if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1)
        throw ShapeError("linear: expected x[MxK], W[NxK], b[N]");
    int M = xv.dim(0), K = xv.dim(1), N = wv.dim(0);
    if (wv.dim(1) != K || bv.dim(0) != N)
        throw ShapeError("linear: mismatched shapes x=" + shape_str(xv.shape()) +
                         " W=" + shape_str(wv.shape()) + " b=" + shape_str(bv.shape()));
    TensorT<R> out({M, N});
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) out.data()[static_cast<size_t>(i) * N + j] = bv.data()[j];
    kern::gemm_bt_acc(M, K, N, xv.data(), wv.data(), out.data());
    int xi = x.id, wi = w.id, bi = b.id;
    TensorT<R> xs = xv, ws = wv;
    return t.make(std::move(out), {x, w, b},
                  [xi, wi, bi, xs, ws, M, K, N](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
                      const R* dy = n.grad.data();
                      if (tp.node(xi).requires_grad)
                          kern::gemm_acc(M, N, K, dy, ws.data(), tp.grad(xi).data());
                      if (tp.node(wi).requires_grad)
                          kern::gemm_at_acc(N, M, K, dy, xs.data(), tp.grad(wi).data());
                      if (tp.node(bi).requires_grad) {
                          R* db = tp.grad(bi).data();
                          for (int i = 0; i < M; ++i)
                              for (int j = 0; j < N; ++j) db[j] += dy[static_cast<size_t>(i) * N + j];
                      }
                  });
}

// ---------------------------------------------------------------- conv2d

// x[C x H x W], w[OC x C x kh x kw], b[OC] -> y[OC x OH x OW]
template <class R>
VarT<R> conv2d(TapeT<R>& t, VarT<R> x, VarT<R> w, VarT<R> b, int stride, int pad) {
    const TensorT<R>& xv = t.value(x);
    const TensorT<R>& wv = t.value(w);
    const TensorT<R>& bv = t.value(b);
    if (xv.rank() != 3 || wv.rank() != 4 || bv.rank() != 1)
        throw ShapeError("conv2d: expected x[CxHxW], w[OCxCxKhxKw], b[OC]");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    int OC = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != C) throw ShapeError("conv2d: weight expects " + std::to_string(wv.dim(1)) +
                                         " input channels, got " + std::to_string(C));
    if (bv.dim(0) != OC) throw ShapeError("conv2d: bias/weight mismatch");
    int OH = kern::conv_out_dim(H, kh, stride, pad);
    int OW = kern::conv_out_dim(W, kw, stride, pad);
    int ckk = C * kh * kw, ohw = OH * OW;

    std::vector<R> col(static_cast<size_t>(ckk) * ohw);
    kern::im2col(xv.data(), C, H, W, kh, kw, stride, pad, OH, OW, col.data());
    TensorT<R> out({OC, OH, OW});
    for (int oc = 0; oc < OC; ++oc)
        for (int i = 0; i < ohw; ++i) out.data()[static_cast<size_t>(oc) * ohw + i] = bv.data()[oc];
    kern::gemm_acc(OC, ckk, ohw, wv.data(), col.data(), out.data());

    int xi = x.id, wi = w.id, bi = b.id;
    TensorT<R> xs = xv, ws = wv;
    return t.make(
        std::move(out), {x, w, b},
        [=](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
            const R* dy = n.grad.data();
            int ohw2 = OH * OW, ckk2 = C * kh * kw;
            if (tp.node(wi).requires_grad || tp.node(xi).requires_grad) {
                std::vector<R> col2(static_cast<size_t>(ckk2) * ohw2);
                kern::im2col(xs.data(), C, H, W, kh, kw, stride, pad, OH, OW, col2.data());
                if (tp.node(wi).requires_grad)
                    kern::gemm_bt_acc(OC, ohw2, ckk2, dy, col2.data(), tp.grad(wi).data());
                if (tp.node(xi).requires_grad) {
                    std::vector<R> dcol(static_cast<size_t>(ckk2) * ohw2, R(0));
                    kern::gemm_at_acc(ckk2, OC, ohw2, ws.data(), dy, dcol.data());
                    kern::col2im_acc(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                                     tp.grad(xi).data());
                }
            }
            if (tp.node(bi).requires_grad) {
                R* db = tp.grad(bi).data();
                for (int oc = 0; oc < OC; ++oc) {
                    R s = R(0);
                    for (int i = 0; i < ohw2; ++i) s += dy[static_cast<size_t>(oc) * ohw2 + i];
                    db[oc] += s;
                }
            }
        });
}

// ---------------------------------------------------------------- conv_transpose2d

// x[C x H x W], w[C x OC x kh x kw] (input-major, as the gradient dual of a
// forward conv), b[OC] -> y[OC x OH x OW] with OH = (H-1)*stride - 2*pad + kh.
template <class R>
VarT<R> conv_transpose2d(TapeT<R>& t, VarT<R> x, VarT<R> w, VarT<R> b, int stride, int pad) {
    const TensorT<R>& xv = t.value(x);
    const TensorT<R>& wv = t.value(w);
    const TensorT<R>& bv = t.value(b);
    if (xv.rank() != 3 || wv.rank() != 4 || bv.rank() != 1)
        throw ShapeError("conv_transpose2d: expected x[CxHxW], w[CxOCxKhxKw], b[OC]");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    int OC = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(0) != C) throw ShapeError("conv_transpose2d: weight expects " +
                                         std::to_string(wv.dim(0)) + " input channels, got " +
                                         std::to_string(C));
    int OH = (H - 1) * stride - 2 * pad + kh;
    int OW = (W - 1) * stride - 2 * pad + kw;
    if (OH <= 0 || OW <= 0) throw ShapeError("conv_transpose2d: non-positive output dims");
    int okk = OC * kh * kw, hw = H * W;

    // col[OC*kh*kw x H*W] = W^T-reshaped * x, scattered back over the output.
    std::vector<R> col(static_cast<size_t>(okk) * hw, R(0));
    kern::gemm_at_acc(okk, C, hw, wv.data(), xv.data(), col.data());
    TensorT<R> out({OC, OH, OW});
    for (int oc = 0; oc < OC; ++oc)
        for (int i = 0; i < OH * OW; ++i)
            out.data()[static_cast<size_t>(oc) * OH * OW + i] = bv.data()[oc];
    kern::col2im_acc(col.data(), OC, OH, OW, kh, kw, stride, pad, H, W, out.data());

    int xi = x.id, wi = w.id, bi = b.id;
    TensorT<R> xs = xv, ws = wv;
    return t.make(
        std::move(out), {x, w, b},
        [=](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
            const R* dy = n.grad.data();
            int okk2 = OC * kh * kw, hw2 = H * W;
            if (tp.node(xi).requires_grad || tp.node(wi).requires_grad) {
                // dcol = im2col(dy) with the dual conv geometry.
                std::vector<R> dcol(static_cast<size_t>(okk2) * hw2);
                kern::im2col(dy, OC, OH, OW, kh, kw, stride, pad, H, W, dcol.data());
                if (tp.node(xi).requires_grad)
                    kern::gemm_acc(C, okk2, hw2, ws.data(), dcol.data(), tp.grad(xi).data());
                if (tp.node(wi).requires_grad)
                    kern::gemm_bt_acc(C, hw2, okk2, xs.data(), dcol.data(), tp.grad(wi).data());
            }
            if (tp.node(bi).requires_grad) {
                R* db = tp.grad(bi).data();
                for (int oc = 0; oc < OC; ++oc) {
                    R s = R(0);
                    for (int i = 0; i < OH * OW; ++i) s += dy[static_cast<size_t>(oc) * OH * OW + i];
                    db[oc] += s;
                }
            }
        });
}

// 2x nearest-neighbor upsampling: out[c,y,x] = in[c,y/2,x/2]. Unlike a strided
// transposed conv, a constant field stays exactly constant for any downstream
// 3x3 conv weights — no phase-dependent weight subsets to equalize.
template <class R>
VarT<R> upsample_nearest2(TapeT<R>& t, VarT<R> x) {
    const TensorT<R>& xv = t.value(x);
    if (xv.rank() != 3) throw ShapeError("upsample_nearest2: expected x[CxHxW]");
    const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    TensorT<R> out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y) {
            const R* src = xv.data() + (static_cast<size_t>(c) * H + y / 2) * W;
            R* dst = out.data() + (static_cast<size_t>(c) * 2 * H + y) * 2 * W;
            for (int x2 = 0; x2 < 2 * W; ++x2) dst[x2] = src[x2 / 2];
        }
    int xi = x.id;
    return t.make(std::move(out), {x},
                  [=](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
                      if (!tp.node(xi).requires_grad) return;
                      R* dx = tp.grad(xi).data();
                      const R* dy = n.grad.data();
                      for (int c = 0; c < C; ++c)
                          for (int y = 0; y < 2 * H; ++y) {
                              const R* dyrow = dy + (static_cast<size_t>(c) * 2 * H + y) * 2 * W;
                              R* dxrow = dx + (static_cast<size_t>(c) * H + y / 2) * W;
                              for (int x2 = 0; x2 < 2 * W; ++x2) dxrow[x2 / 2] += dyrow[x2];
                          }
                  });
}

// ---------------------------------------------------------------- normalization

// Per-group standardization over (C/G)*H*W elements, then per-channel affine.
template <class R>
VarT<R> group_norm(TapeT<R>& t, VarT<R> x, VarT<R> gamma, VarT<R> beta, int groups) {
    const TensorT<R>& xv = t.value(x);
    const TensorT<R>& gv = t.value(gamma);
    const TensorT<R>& bv = t.value(beta);
    if (xv.rank() != 3) throw ShapeError("group_norm: expected x[CxHxW]");
    int C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
    if (groups <= 0 || C % groups != 0)
        throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                         std::to_string(C) + " channels");
    if (gv.dim(0) != C || bv.dim(0) != C) throw ShapeError("group_norm: affine size mismatch");
    int cpg = C / groups;
    size_t gsz = static_cast<size_t>(cpg) * HW;

    TensorT<R> out(xv.shape());
    TensorT<R> mean({groups}), rstd({groups});
    for (int g = 0; g < groups; ++g) {
        const R* xp = xv.data() + static_cast<size_t>(g) * gsz;
        double mu = 0.0;
        for (size_t i = 0; i < gsz; ++i) mu += static_cast<double>(xp[i]);
        mu /= static_cast<double>(gsz);
        double var = 0.0;
        for (size_t i = 0; i < gsz; ++i) {
            double d = static_cast<double>(xp[i]) - mu;
            var += d * d;
        }
        var /= static_cast<double>(gsz);
        double rs = 1.0 / std::sqrt(var + kNormEps);
        mean.data()[g] = static_cast<R>(mu);
        rstd.data()[g] = static_cast<R>(rs);
        for (int c = 0; c < cpg; ++c) {
            int ch = g * cpg + c;
            const R* xc = xv.data() + static_cast<size_t>(ch) * HW;
            R* yc = out.data() + static_cast<size_t>(ch) * HW;
            R ga = gv.data()[ch], be = bv.data()[ch];
            for (int i = 0; i < HW; ++i)
                yc[i] = static_cast<R>((static_cast<double>(xc[i]) - mu) * rs) * ga + be;
        }
    }

    int xi = x.id, gi = gamma.id, bi = beta.id;
    TensorT<R> xs = xv, gs = gv;
    return t.make(
        std::move(out), {x, gamma, beta},
        [=](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
            const R* dy = n.grad.data();
            size_t gsz2 = static_cast<size_t>(cpg) * HW;
            bool need_x = tp.node(xi).requires_grad;
            bool need_g = tp.node(gi).requires_grad;
            bool need_b = tp.node(bi).requires_grad;
            for (int g = 0; g < groups; ++g) {
                double mu = mean.data()[g], rs = rstd.data()[g];
                // First pass: per-group reductions of dxhat and dxhat*xhat.
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int c = 0; c < cpg; ++c) {
                    int ch = g * cpg + c;
                    const R* xc = xs.data() + static_cast<size_t>(ch) * HW;
                    const R* dyc = dy + static_cast<size_t>(ch) * HW;
                    double ga = gs.data()[ch];
                    double dg = 0.0, db = 0.0;
                    for (int i = 0; i < HW; ++i) {
                        double xh = (static_cast<double>(xc[i]) - mu) * rs;
                        double dxh = static_cast<double>(dyc[i]) * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dg += static_cast<double>(dyc[i]) * xh;
                        db += static_cast<double>(dyc[i]);
                    }
                    if (need_g) tp.grad(gi).data()[ch] += static_cast<R>(dg);
                    if (need_b) tp.grad(bi).data()[ch] += static_cast<R>(db);
                }
                if (!need_x) continue;
                double inv_n = 1.0 / static_cast<double>(gsz2);
                for (int c = 0; c < cpg; ++c) {
                    int ch = g * cpg + c;
                    const R* xc = xs.data() + static_cast<size_t>(ch) * HW;
                    const R* dyc = dy + static_cast<size_t>(ch) * HW;
                    R* dxc = tp.grad(xi).data() + static_cast<size_t>(ch) * HW;
                    double ga = gs.data()[ch];
                    for (int i = 0; i < HW; ++i) {
                        double xh = (static_cast<double>(xc[i]) - mu) * rs;
                        double dxh = static_cast<double>(dyc[i]) * ga;
                        dxc[i] += static_cast<R>(rs * (dxh - inv_n * (sum_dxh + xh * sum_dxh_xh)));
                    }
                }
            }
        });
}

// Row-wise standardization of x[M x N] over the last dim, per-column affine.
template <class R>
VarT<R> layer_norm(TapeT<R>& t, VarT<R> x, VarT<R> gamma, VarT<R> beta) {
    const TensorT<R>& xv = t.value(x);
    const TensorT<R>& gv = t.value(gamma);
    const TensorT<R>& bv = t.value(beta);
    if (xv.rank() != 2) throw ShapeError("layer_norm: expected x[MxN]");
    int M = xv.dim(0), N = xv.dim(1);
    if (gv.dim(0) != N || bv.dim(0) != N) throw ShapeError("layer_norm: affine size mismatch");

    TensorT<R> out(xv.shape());
    TensorT<R> mean({M}), rstd({M});
    for (int r = 0; r < M; ++r) {
        const R* xr = xv.data() + static_cast<size_t>(r) * N;
        double mu = 0.0;
        for (int i = 0; i < N; ++i) mu += static_cast<double>(xr[i]);
        mu /= N;
        double var = 0.0;
        for (int i = 0; i < N; ++i) {
            double d = static_cast<double>(xr[i]) - mu;
            var += d * d;
        }
        var /= N;
        double rs = 1.0 / std::sqrt(var + kNormEps);
        mean.data()[r] = static_cast<R>(mu);
        rstd.data()[r] = static_cast<R>(rs);
        R* yr = out.data() + static_cast<size_t>(r) * N;
        for (int i = 0; i < N; ++i)
            yr[i] = static_cast<R>((static_cast<double>(xr[i]) - mu) * rs) * gv.data()[i] +
                    bv.data()[i];
    }

    int xi = x.id, gi = gamma.id, bi = beta.id;
    TensorT<R> xs = xv, gs = gv;
    return t.make(
        std::move(out), {x, gamma, beta},
        [=](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
            const R* dy = n.grad.data();
            bool need_x = tp.node(xi).requires_grad;
            bool need_g = tp.node(gi).requires_grad;
            bool need_b = tp.node(bi).requires_grad;
            for (int r = 0; r < M; ++r) {
                const R* xr = xs.data() + static_cast<size_t>(r) * N;
                const R* dyr = dy + static_cast<size_t>(r) * N;
                double mu = mean.data()[r], rs = rstd.data()[r];
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int i = 0; i < N; ++i) {
                    double xh = (static_cast<double>(xr[i]) - mu) * rs;
                    double dxh = static_cast<double>(dyr[i]) * static_cast<double>(gs.data()[i]);
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                    if (need_g) tp.grad(gi).data()[i] += static_cast<R>(dyr[i] * xh);
                    if (need_b) tp.grad(bi).data()[i] += dyr[i];
                }
                if (!need_x) continue;
                R* dxr = tp.grad(xi).data() + static_cast<size_t>(r) * N;
                for (int i = 0; i < N; ++i) {
                    double xh = (static_cast<double>(xr[i]) - mu) * rs;
                    double dxh = static_cast<double>(dyr[i]) * static_cast<double>(gs.data()[i]);
                    dxr[i] += static_cast<R>(rs * (dxh - (sum_dxh + xh * sum_dxh_xh) / N));
                }
            }
        });
}

// ---------------------------------------------------------------- layout

// [C x H x W] -> [H*W x C]; one row per spatial token.
template <class R>
VarT<R> chw_to_tokens(TapeT<R>& t, VarT<R> x) {
    const TensorT<R>& xv = t.value(x);
    if (xv.rank() != 3) throw ShapeError("chw_to_tokens: expected x[CxHxW]");
    int C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
    TensorT<R> out({HW, C});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < HW; ++i)
            out.data()[static_cast<size_t>(i) * C + c] = xv.data()[static_cast<size_t>(c) * HW + i];
    int xi = x.id;
    return t.make(std::move(out), {x}, [xi, C, HW](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
        if (!tp.node(xi).requires_grad) return;
        R* dx = tp.grad(xi).data();
        const R* dy = n.grad.data();
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < HW; ++i)
                dx[static_cast<size_t>(c) * HW + i] += dy[static_cast<size_t>(i) * C + c];
    });
}

// [H*W x C] -> [C x H x W]
template <class R>
VarT<R> tokens_to_chw(TapeT<R>& t, VarT<R> x, int H, int W) {
    const TensorT<R>& xv = t.value(x);
    if (xv.rank() != 2 || xv.dim(0) != H * W)
        throw ShapeError("tokens_to_chw: expected x[" + std::to_string(H * W) + " x C], got " +
                         shape_str(xv.shape()));
    int C = xv.dim(1), HW = H * W;
    TensorT<R> out({C, H, W});
    for (int i = 0; i < HW; ++i)
        for (int c = 0; c < C; ++c)
            out.data()[static_cast<size_t>(c) * HW + i] = xv.data()[static_cast<size_t>(i) * C + c];
    int xi = x.id;
    return t.make(std::move(out), {x}, [xi, C, HW](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
        if (!tp.node(xi).requires_grad) return;
        R* dx = tp.grad(xi).data();
        const R* dy = n.grad.data();
        for (int i = 0; i < HW; ++i)
            for (int c = 0; c < C; ++c)
                dx[static_cast<size_t>(i) * C + c] += dy[static_cast<size_t>(c) * HW + i];
    });
}

// Stack b under a: [Ma x N] + [Mb x N] -> [(Ma+Mb) x N]
template <class R>
VarT<R> concat_rows(TapeT<R>& t, VarT<R> a, VarT<R> b) {
    const TensorT<R>& av = t.value(a);
    const TensorT<R>& bv = t.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
        throw ShapeError("concat_rows: incompatible shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
    int Ma = av.dim(0), Mb = bv.dim(0), N = av.dim(1);
    TensorT<R> out({Ma + Mb, N});
    std::memcpy(out.data(), av.data(), av.size() * sizeof(R));
    std::memcpy(out.data() + av.size(), bv.data(), bv.size() * sizeof(R));
    int ai = a.id, bi = b.id;
    return t.make(std::move(out), {a, b},
                  [ai, bi, Ma, Mb, N](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
                      const R* dy = n.grad.data();
                      if (tp.node(ai).requires_grad) {
                          R* da = tp.grad(ai).data();
                          for (size_t i = 0; i < static_cast<size_t>(Ma) * N; ++i) da[i] += dy[i];
                      }
                      if (tp.node(bi).requires_grad) {
                          R* db = tp.grad(bi).data();
                          const R* src = dy + static_cast<size_t>(Ma) * N;
                          for (size_t i = 0; i < static_cast<size_t>(Mb) * N; ++i) db[i] += src[i];
                      }
                  });
}

// Rows [row0, row0+rows) of x[M x N].
template <class R>
VarT<R> crop_rows(TapeT<R>& t, VarT<R> x, int row0, int rows) {
    const TensorT<R>& xv = t.value(x);
    if (xv.rank() != 2) throw ShapeError("crop_rows: expected x[MxN]");
    int M = xv.dim(0), N = xv.dim(1);
    if (row0 < 0 || rows <= 0 || row0 + rows > M)
        throw RangeError("crop_rows: rows [" + std::to_string(row0) + ", " +
                         std::to_string(row0 + rows) + ") out of bounds for M=" + std::to_string(M));
    TensorT<R> out({rows, N});
    std::memcpy(out.data(), xv.data() + static_cast<size_t>(row0) * N, out.size() * sizeof(R));
    int xi = x.id;
    return t.make(std::move(out), {x},
                  [xi, row0, rows, N](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
                      if (!tp.node(xi).requires_grad) return;
                      R* dx = tp.grad(xi).data() + static_cast<size_t>(row0) * N;
                      const R* dy = n.grad.data();
                      for (size_t i = 0; i < static_cast<size_t>(rows) * N; ++i) dx[i] += dy[i];
                  });
}

// [Ca x H x W] + [Cb x H x W] -> [(Ca+Cb) x H x W]
template <class R>
VarT<R> concat_channels(TapeT<R>& t, VarT<R> a, VarT<R> b) {
    const TensorT<R>& av = t.value(a);
    const TensorT<R>& bv = t.value(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
        throw ShapeError("concat_channels: incompatible shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
    TensorT<R> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
    std::memcpy(out.data(), av.data(), av.size() * sizeof(R));
    std::memcpy(out.data() + av.size(), bv.data(), bv.size() * sizeof(R));
    int ai = a.id, bi = b.id;
    size_t na = av.size(), nb = bv.size();
    return t.make(std::move(out), {a, b},
                  [ai, bi, na, nb](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
                      const R* dy = n.grad.data();
                      if (tp.node(ai).requires_grad) {
                          R* da = tp.grad(ai).data();
                          for (size_t i = 0; i < na; ++i) da[i] += dy[i];
                      }
                      if (tp.node(bi).requires_grad) {
                          R* db = tp.grad(bi).data();
                          for (size_t i = 0; i < nb; ++i) db[i] += dy[na + i];
                      }
                  });
}

// Channels [c0, c0+n) of x[C x H x W].
template <class R>
VarT<R> crop_channels(TapeT<R>& t, VarT<R> x, int c0, int n) {
    const TensorT<R>& xv = t.value(x);
    if (xv.rank() != 3) throw ShapeError("crop_channels: expected x[CxHxW]");
    int C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
    if (c0 < 0 || n <= 0 || c0 + n > C)
        throw RangeError("crop_channels: channels [" + std::to_string(c0) + ", " +
                         std::to_string(c0 + n) + ") out of bounds for C=" + std::to_string(C));
    TensorT<R> out({n, xv.dim(1), xv.dim(2)});
    std::memcpy(out.data(), xv.data() + static_cast<size_t>(c0) * HW, out.size() * sizeof(R));
    int xi = x.id;
    return t.make(std::move(out), {x},
                  [xi, c0, n, HW](TapeT<R>& tp, const typename TapeT<R>::Node& nd) {
                      if (!tp.node(xi).requires_grad) return;
                      R* dx = tp.grad(xi).data() + static_cast<size_t>(c0) * HW;
                      const R* dy = nd.grad.data();
                      for (size_t i = 0; i < static_cast<size_t>(n) * HW; ++i) dx[i] += dy[i];
                  });
}

// y[c,:,:] = x[c,:,:] + v[c]  (per-channel broadcast; timestep injection)
template <class R>
VarT<R> add_channel_bias(TapeT<R>& t, VarT<R> x, VarT<R> v) {
    const TensorT<R>& xv = t.value(x);
    const TensorT<R>& vv = t.value(v);
    if (xv.rank() != 3 || vv.rank() != 1 || vv.dim(0) != xv.dim(0))
        throw ShapeError("add_channel_bias: expected x[CxHxW], v[C]");
    int C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
    TensorT<R> out(xv.shape());
    for (int c = 0; c < C; ++c) {
        R vc = vv.data()[c];
        const R* xc = xv.data() + static_cast<size_t>(c) * HW;
        R* yc = out.data() + static_cast<size_t>(c) * HW;
        for (int i = 0; i < HW; ++i) yc[i] = xc[i] + vc;
    }
    int xi = x.id, vi = v.id;
    return t.make(std::move(out), {x, v},
                  [xi, vi, C, HW](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
                      const R* dy = n.grad.data();
                      if (tp.node(xi).requires_grad) {
                          R* dx = tp.grad(xi).data();
                          for (size_t i = 0; i < static_cast<size_t>(C) * HW; ++i) dx[i] += dy[i];
                      }
                      if (tp.node(vi).requires_grad) {
                          R* dv = tp.grad(vi).data();
                          for (int c = 0; c < C; ++c) {
                              R s = R(0);
                              for (int i = 0; i < HW; ++i) s += dy[static_cast<size_t>(c) * HW + i];
                              dv[c] += s;
                          }
                      }
                  });
}

// Global average pool: x[C x H x W] -> [C]
template <class R>
VarT<R> spatial_mean(TapeT<R>& t, VarT<R> x) {
    const TensorT<R>& xv = t.value(x);
    if (xv.rank() != 3) throw ShapeError("spatial_mean: expected x[CxHxW]");
    int C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
    TensorT<R> out({C});
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int i = 0; i < HW; ++i) s += static_cast<double>(xv.data()[static_cast<size_t>(c) * HW + i]);
        out.data()[c] = static_cast<R>(s / HW);
    }
    int xi = x.id;
    return t.make(std::move(out), {x}, [xi, C, HW](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
        if (!tp.node(xi).requires_grad) return;
        R* dx = tp.grad(xi).data();
        for (int c = 0; c < C; ++c) {
            R g = n.grad.data()[c] / static_cast<R>(HW);
            for (int i = 0; i < HW; ++i) dx[static_cast<size_t>(c) * HW + i] += g;
        }
    });
}

// Reinterpret a [C] vector as a [1 x C] row (for token-style use).
template <class R>
VarT<R> as_row(TapeT<R>& t, VarT<R> x) {
    const TensorT<R>& xv = t.value(x);
    if (xv.rank() != 1) throw ShapeError("as_row: expected x[C]");
    int C = xv.dim(0);
    TensorT<R> out = xv.clone().reshaped({1, C});
    int xi = x.id;
    return t.make(std::move(out), {x}, [xi](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
        if (!tp.node(xi).requires_grad) return;
        R* dx = tp.grad(xi).data();
        const R* dy = n.grad.data();
        for (size_t i = 0; i < n.grad.size(); ++i) dx[i] += dy[i];
    });
}

// Inverse of as_row: [1 x C] -> [C].
template <class R>
VarT<R> as_vec(TapeT<R>& t, VarT<R> x) {
    const TensorT<R>& xv = t.value(x);
    if (xv.rank() != 2 || xv.dim(0) != 1) throw ShapeError("as_vec: expected x[1xC]");
    TensorT<R> out = xv.clone().reshaped({xv.dim(1)});
    int xi = x.id;
    return t.make(std::move(out), {x}, [xi](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
        if (!tp.node(xi).requires_grad) return;
        R* dx = tp.grad(xi).data();
        const R* dy = n.grad.data();
        for (size_t i = 0; i < n.grad.size(); ++i) dx[i] += dy[i];
    });
}

// ---------------------------------------------------------------- attention

// Head-averaged post-softmax attention weights, recorded when a capture sink
// is supplied to mha(). Rows index queries, columns index keys.
template <class R>
struct AttnCaptureT {
    TensorT<R> probs;  // [Mq x Mkv]
};
using AttnCapture = AttnCaptureT<float>;

// Multi-head attention with fused projections:
//   Q = q_in Wq^T + bq, K = kv_in Wk^T + bk, V = kv_in Wv^T + bv
//   per head: P = softmax(Q K^T / sqrt(dh)), O = P V
//   out = concat(O) Wo^T + bo
// q_in [Mq x C], kv_in [Mkv x Ckv]; Wq [C x C], Wk/Wv [C x Ckv], Wo [C x C].
template <class R>
VarT<R> mha(TapeT<R>& t, VarT<R> q_in, VarT<R> kv_in, VarT<R> wq, VarT<R> bq, VarT<R> wk,
            VarT<R> bk, VarT<R> wv, VarT<R> bv, VarT<R> wo, VarT<R> bo, int heads,
            AttnCaptureT<R>* capture = nullptr) {
    const TensorT<R>& qv = t.value(q_in);
    const TensorT<R>& kvv = t.value(kv_in);
    if (qv.rank() != 2 || kvv.rank() != 2) throw ShapeError("mha: expected 2-d token matrices");
    int Mq = qv.dim(0), C = t.value(wq).dim(0), Mkv = kvv.dim(0);
    if (qv.dim(1) != C) throw ShapeError("mha: q_in dim mismatch");
    if (heads <= 0 || C % heads != 0)
        throw ShapeError("mha: " + std::to_string(heads) + " heads do not divide dim " +
                         std::to_string(C));
    int dh = C / heads;
    R att_scale = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh)));

    // Projections as separate differentiable ops keeps this op's backward
    // focused on the softmax-attention core.
    VarT<R> Q = linear(t, q_in, wq, bq);
    VarT<R> K = linear(t, kv_in, wk, bk);
    VarT<R> V = linear(t, kv_in, wv, bv);
    const TensorT<R>& Qv = t.value(Q);
    const TensorT<R>& Kv = t.value(K);
    const TensorT<R>& Vv = t.value(V);

    TensorT<R> P({heads, Mq, Mkv});
    TensorT<R> O({Mq, C});
    std::vector<double> srow(static_cast<size_t>(Mkv));
    for (int h = 0; h < heads; ++h) {
        const R* Qh = Qv.data() + static_cast<size_t>(h) * dh;
        const R* Kh = Kv.data() + static_cast<size_t>(h) * dh;
        const R* Vh = Vv.data() + static_cast<size_t>(h) * dh;
        R* Ph = P.data() + static_cast<size_t>(h) * Mq * Mkv;
        for (int i = 0; i < Mq; ++i) {
            const R* qi = Qh + static_cast<size_t>(i) * C;
            double mx = -1e300;
            for (int j = 0; j < Mkv; ++j) {
                const R* kj = Kh + static_cast<size_t>(j) * C;
                double s = 0.0;
                for (int d = 0; d < dh; ++d)
                    s += static_cast<double>(qi[d]) * static_cast<double>(kj[d]);
                s *= static_cast<double>(att_scale);
                srow[static_cast<size_t>(j)] = s;
                if (s > mx) mx = s;
            }
            double z = 0.0;
            for (int j = 0; j < Mkv; ++j) {
                double e = std::exp(srow[static_cast<size_t>(j)] - mx);
                srow[static_cast<size_t>(j)] = e;
                z += e;
            }
            R* pi = Ph + static_cast<size_t>(i) * Mkv;
            for (int j = 0; j < Mkv; ++j) pi[j] = static_cast<R>(srow[static_cast<size_t>(j)] / z);
            R* oi = O.data() + static_cast<size_t>(i) * C + static_cast<size_t>(h) * dh;
            for (int d = 0; d < dh; ++d) oi[d] = R(0);
            for (int j = 0; j < Mkv; ++j) {
                R p = pi[j];
                const R* vj = Vh + static_cast<size_t>(j) * C;
                for (int d = 0; d < dh; ++d) oi[d] += p * vj[d];
            }
        }
    }

    if (capture != nullptr) {
        capture->probs = TensorT<R>({Mq, Mkv});
        R* cp = capture->probs.data();
        for (int h = 0; h < heads; ++h) {
            const R* Ph = P.data() + static_cast<size_t>(h) * Mq * Mkv;
            for (size_t i = 0; i < static_cast<size_t>(Mq) * Mkv; ++i) cp[i] += Ph[i];
        }
        for (size_t i = 0; i < capture->probs.size(); ++i) cp[i] /= static_cast<R>(heads);
    }

    int Qi = Q.id, Ki = K.id, Vi = V.id;
    TensorT<R> Qs = Qv, Ks = Kv, Vs = Vv, Ps = P;
    VarT<R> attn = t.make(
        std::move(O), {Q, K, V},
        [=](TapeT<R>& tp, const typename TapeT<R>::Node& n) {
            const R* dO = n.grad.data();
            bool need_q = tp.node(Qi).requires_grad;
            bool need_k = tp.node(Ki).requires_grad;
            bool need_v = tp.node(Vi).requires_grad;
            std::vector<double> dp(static_cast<size_t>(Mkv));
            for (int h = 0; h < heads; ++h) {
                const R* Qh = Qs.data() + static_cast<size_t>(h) * dh;
                const R* Kh = Ks.data() + static_cast<size_t>(h) * dh;
                const R* Vh = Vs.data() + static_cast<size_t>(h) * dh;
                const R* Ph = Ps.data() + static_cast<size_t>(h) * Mq * Mkv;
                for (int i = 0; i < Mq; ++i) {
                    const R* pi = Ph + static_cast<size_t>(i) * Mkv;
                    const R* doi = dO + static_cast<size_t>(i) * C + static_cast<size_t>(h) * dh;
                    // dP = dO V^T, then the softmax Jacobian contraction.
                    double dot = 0.0;
                    for (int j = 0; j < Mkv; ++j) {
                        const R* vj = Vh + static_cast<size_t>(j) * C;
                        double s = 0.0;
                        for (int d = 0; d < dh; ++d)
                            s += static_cast<double>(doi[d]) * static_cast<double>(vj[d]);
                        dp[static_cast<size_t>(j)] = s;
                        dot += s * static_cast<double>(pi[j]);
                    }
                    if (need_v) {
                        R* dV = tp.grad(Vi).data() + static_cast<size_t>(h) * dh;
                        for (int j = 0; j < Mkv; ++j) {
                            R p = pi[j];
                            R* dvj = dV + static_cast<size_t>(j) * C;
                            for (int d = 0; d < dh; ++d) dvj[d] += p * doi[d];
                        }
                    }
                    if (!need_q && !need_k) continue;
                    const R* qi2 = Qh + static_cast<size_t>(i) * C;
                    R* dqi = need_q ? tp.grad(Qi).data() + static_cast<size_t>(i) * C +
                                          static_cast<size_t>(h) * dh
                                    : nullptr;
                    for (int j = 0; j < Mkv; ++j) {
                        double ds = static_cast<double>(pi[j]) * (dp[static_cast<size_t>(j)] - dot) *
                                    static_cast<double>(att_scale);
                        if (ds == 0.0) continue;
                        const R* kj = Kh + static_cast<size_t>(j) * C;
                        if (need_q)
                            for (int d = 0; d < dh; ++d)
                                dqi[d] += static_cast<R>(ds * static_cast<double>(kj[d]));
                        if (need_k) {
                            R* dkj = tp.grad(Ki).data() + static_cast<size_t>(j) * C +
                                     static_cast<size_t>(h) * dh;
                            for (int d = 0; d < dh; ++d)
                                dkj[d] += static_cast<R>(ds * static_cast<double>(qi2[d]));
                        }
                    }
                }
            }
        });
    return linear(t, attn, wo, bo);
}

// ---------------------------------------------------------------- loss

// Mean squared error over all elements: (1/N) * sum (a-b)^2, scalar output.
template <class R>
VarT<R> mse_loss(TapeT<R>& t, VarT<R> a, VarT<R> b) {
    const TensorT<R>& av = t.value(a);
    const TensorT<R>& bv = t.value(b);
    check_same_shape(av, bv, "mse_loss");
    double s = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
        double d = static_cast<double>(av.data()[i]) - static_cast<double>(bv.data()[i]);
        s += d * d;
    }
    size_t n = av.size();
    TensorT<R> out({1});
    out.data()[0] = static_cast<R>(s / static_cast<double>(n));
    int ai = a.id, bi = b.id;
    TensorT<R> as = av, bs = bv;
    return t.make(std::move(out), {a, b},
                  [ai, bi, as, bs, n](TapeT<R>& tp, const typename TapeT<R>::Node& n_) {
                      R g = n_.grad.data()[0] * static_cast<R>(2.0 / static_cast<double>(n));
                      bool need_a = tp.node(ai).requires_grad;
                      bool need_b = tp.node(bi).requires_grad;
                      R* da = need_a ? tp.grad(ai).data() : nullptr;
                      R* db = need_b ? tp.grad(bi).data() : nullptr;
                      for (size_t i = 0; i < n; ++i) {
                          R d = (as.data()[i] - bs.data()[i]) * g;
                          if (need_a) da[i] += d;
                          if (need_b) db[i] -= d;
                      }
                  });
}

// ---------------------------------------------------------------- value-level

// Sinusoidal timestep embedding (no gradient; t is an input, not a parameter).
template <class R>
TensorT<R> timestep_embedding(int t, int dim) {
    if (dim % 2 != 0) throw ShapeError("timestep_embedding: dim must be even");
    TensorT<R> out({1, dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                               static_cast<double>(half));
        double ang = static_cast<double>(t) * freq;
        out.data()[i] = static_cast<R>(std::sin(ang));
        out.data()[half + i] = static_cast<R>(std::cos(ang));
    }
    return out;
}

}  // namespace ootd
