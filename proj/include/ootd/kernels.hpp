#pragma once

#include <cstddef>

#include "ootd/errors.hpp"

// Raw compute kernels shared by the differentiable ops. Plain loops, laid
// out so the compiler can vectorize the innermost (contiguous) dimension.

namespace ootd::kern {

// C[M x N] += A[M x K] * B[K x N], all row-major. Zero A entries are
// skipped; adding a zero product never changes a finite sum, and it makes
// deliberately zeroed weight slices cost nothing.
template <class R>
void gemm_acc(int M, int K, int N, const R* a, const R* b, R* c) {
    for (int i = 0; i < M; ++i) {
        const R* arow = a + static_cast<size_t>(i) * K;
        R* crow = c + static_cast<size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            R av = arow[k];
            if (av == R(0)) continue;
            const R* brow = b + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M x N] += A^T * B where A is stored [K x M].
template <class R>
void gemm_at_acc(int M, int K, int N, const R* a, const R* b, R* c) {
    for (int k = 0; k < K; ++k) {
        const R* arow = a + static_cast<size_t>(k) * M;
        const R* brow = b + static_cast<size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            R av = arow[i];
            if (av == R(0)) continue;
            R* crow = c + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M x N] += A * B^T where B is stored [N x K].
template <class R>
void gemm_bt_acc(int M, int K, int N, const R* a, const R* b, R* c) {
    for (int i = 0; i < M; ++i) {
        const R* arow = a + static_cast<size_t>(i) * K;
        R* crow = c + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const R* brow = b + static_cast<size_t>(j) * K;
            R acc = R(0);
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] += acc;
        }
    }
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
    int out = (in + 2 * pad - k) / stride + 1;
    if (out <= 0)
        throw ShapeError("conv output dim would be " + std::to_string(out) + " (in=" +
                         std::to_string(in) + " k=" + std::to_string(k) + ")");
    return out;
}

// X[C x H x W] -> col[(C*kh*kw) x (oh*ow)], zero padded. oh/ow must match
// conv_out_dim(H/W, ...); passed in because callers already have them.
template <class R>
void im2col(const R* x, int C, int H, int W, int kh, int kw, int stride, int pad, int oh, int ow,
            R* col) {
    size_t L = static_cast<size_t>(oh) * ow;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                R* dst = col + ((static_cast<size_t>(c) * kh + ky) * kw + kx) * L;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        bool inside = iy >= 0 && iy < H && ix >= 0 && ix < W;
                        dst[static_cast<size_t>(oy) * ow + ox] =
                            inside ? x[(static_cast<size_t>(c) * H + iy) * W + ix] : R(0);
                    }
                }
            }
        }
    }
}

// Scatter-accumulate columns back onto the image grid: the exact transpose
// of im2col (pinned by an adjoint-identity test).
template <class R>
void col2im_acc(const R* col, int C, int H, int W, int kh, int kw, int stride, int pad, int oh,
                int ow, R* x) {
    size_t L = static_cast<size_t>(oh) * ow;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const R* src = col + ((static_cast<size_t>(c) * kh + ky) * kw + kx) * L;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        x[(static_cast<size_t>(c) * H + iy) * W + ix] +=
                            src[static_cast<size_t>(oy) * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace ootd::kern
