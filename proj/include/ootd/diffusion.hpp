#pragma once

// Noise schedule, forward noising, the training loss, classifier-free
// guidance combination, and a deterministic DDIM sampler.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "ootd/errors.hpp"
#include "ootd/ootdnet.hpp"
#include "ootd/rng.hpp"
#include "ootd/tensor.hpp"

namespace ootd {

// Linear-beta diffusion schedule. Index 0 is the "clean" convention slot:
// alpha_bars[0] == 1 and betas[0]/alphas[0] are unused placeholders.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;       // [0..T], betas[0] unused
    std::vector<double> alphas;      // [0..T]
    std::vector<double> alpha_bars;  // [0..T], alpha_bars[0] = 1

    static NoiseSchedule linear(int T = 1000, double beta1 = 1e-4, double betaT = 2e-2) {
        if (T < 1) throw RangeError("schedule: T must be >= 1");
        NoiseSchedule s;
        s.T = T;
        s.betas.assign(T + 1, 0.0);
        s.alphas.assign(T + 1, 1.0);
        s.alpha_bars.assign(T + 1, 1.0);
        double bar = 1.0;
        for (int t = 1; t <= T; ++t) {
            double b = (T == 1) ? beta1 : beta1 + (betaT - beta1) * (double)(t - 1) / (double)(T - 1);
            if (!(b > 0.0 && b < 1.0)) throw RangeError("schedule: beta out of (0,1)");
            s.betas[t] = b;
            s.alphas[t] = 1.0 - b;
            bar *= s.alphas[t];
            if (!(bar < s.alpha_bars[t - 1]))
                throw RangeError("schedule: alpha_bar must decrease strictly");
            s.alpha_bars[t] = bar;
        }
        return s;
    }
};

// z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps. t = 0 returns z0 itself.
template <class R>
TensorT<R> add_noise(const NoiseSchedule& sch, const TensorT<R>& z0, const TensorT<R>& eps,
                     int t) {
    check_same_shape(z0, eps, "add_noise");
    if (t < 0 || t > sch.T)
        throw RangeError("add_noise: t=" + std::to_string(t) + " outside [0," +
                         std::to_string(sch.T) + "]");
    if (t == 0) return z0.clone();
    const double sa = std::sqrt(sch.alpha_bars[t]);
    const double sb = std::sqrt(1.0 - sch.alpha_bars[t]);
    TensorT<R> out(z0.shape());
    for (size_t i = 0; i < out.size(); ++i)
        out.at(i) = (R)(sa * (double)z0.at(i) + sb * (double)eps.at(i));
    return out;
}

// Mean squared error over all elements (the training objective for one sample).
template <class R>
double loss_ootd(const TensorT<R>& eps_pred, const TensorT<R>& eps_true) {
    check_same_shape(eps_pred, eps_true, "loss_ootd");
    double acc = 0;
    for (size_t i = 0; i < eps_pred.size(); ++i) {
        double d = (double)eps_true.at(i) - (double)eps_pred.at(i);
        acc += d * d;
    }
    return acc / (double)eps_pred.size();
}

// Guided noise estimate: eps_uncond + s_g * (eps_cond - eps_uncond).
// s_g == 1 short-circuits to eps_cond (the combination is exact there and the
// unconditional branch must not perturb the result even in the last bit).
template <class R>
TensorT<R> cfg_combine(const TensorT<R>& eps_cond, const TensorT<R>& eps_uncond, double s_g) {
    check_same_shape(eps_cond, eps_uncond, "cfg_combine");
    if (s_g < 1.0) throw RangeError("cfg_combine: guidance scale must be >= 1");
    if (s_g == 1.0) return eps_cond.clone();
    if (eps_cond.bitwise_equal(eps_uncond)) return eps_uncond.clone();
    TensorT<R> out(eps_cond.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        double u = (double)eps_uncond.at(i);
        out.at(i) = (R)(u + s_g * ((double)eps_cond.at(i) - u));
    }
    return out;
}

struct SampleConfig {
    int sampler_steps = 20;
    double guidance = 1.5;    // s_g >= 1
    std::uint64_t seed = 0;   // seeds the initial latent noise
    bool force_both_branches = false;  // compute the unconditional branch even at s_g = 1
};

inline void validate_sample_config(const SampleConfig& cfg, const NoiseSchedule& sch) {
    if (cfg.sampler_steps < 1 || cfg.sampler_steps > sch.T)
        throw RangeError("sample config: sampler_steps must be in [1," + std::to_string(sch.T) +
                         "]");
    if (cfg.guidance < 1.0) throw RangeError("sample config: guidance scale must be >= 1");
}

// Evenly spaced ascending timestep subsequence tau_1..tau_S of {1..T},
// ending at T (strictly increasing whenever S <= T).
inline std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw RangeError("ddim_timesteps: steps must be in [1,T]");
    std::vector<int> taus(steps);
    for (int i = 0; i < steps; ++i)
        taus[i] = (int)(((long long)(i + 1) * T) / steps);
    return taus;
}

struct DdimStats {
    long denoise_calls = 0;
    long outfit_calls = 0;
    int steps = 0;
};

// Deterministic DDIM (eta = 0) walk from z (at t = tau_S) down to t = 0,
// with eps_fn(z_t, t) supplying the noise estimate. pre_step, when set, is
// invoked before each model call with (1-based step index, t, current z).
template <class R>
TensorT<R> ddim_trajectory(const NoiseSchedule& sch, TensorT<R> z, int steps,
                           const std::function<TensorT<R>(const TensorT<R>&, int)>& eps_fn,
                           const std::function<void(int, int, const TensorT<R>&)>& pre_step = {}) {
    std::vector<int> taus = ddim_timesteps(sch.T, steps);
    for (int i = steps - 1; i >= 0; --i) {
        const int t = taus[i];
        const int t_prev = (i > 0) ? taus[i - 1] : 0;
        if (pre_step) pre_step(steps - i, t, z);
        TensorT<R> eps = eps_fn(z, t);
        check_same_shape(z, eps, "ddim step");
        const double sa = std::sqrt(sch.alpha_bars[t]);
        const double sb = std::sqrt(1.0 - sch.alpha_bars[t]);
        const double sa_p = std::sqrt(sch.alpha_bars[t_prev]);
        const double sb_p = std::sqrt(1.0 - sch.alpha_bars[t_prev]);
        TensorT<R> next(z.shape());
        for (size_t k = 0; k < z.size(); ++k) {
            double e = (double)eps.at(k);
            double x0 = ((double)z.at(k) - sb * e) / sa;
            next.at(k) = (R)(sa_p * x0 + sb_p * e);
        }
        z = std::move(next);
    }
    return z;
}

namespace detail {
template <class R>
TensorT<R> concat_latent_channels(const TensorT<R>& a, const TensorT<R>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw ShapeError("latent concat: " + a.shape_str() + " vs " + b.shape_str());
    TensorT<R> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}
}  // namespace detail

// Full guided sampler. The model input at every step is the masked-person
// latent with the current noisy latent appended on the channel axis. The
// garment feature stacks are computed once per branch by the caller and
// reused across all steps. feats_uncond == nullptr runs the unconditional
// branch without any garment fusion (a diagnostic variant).
template <class R>
TensorT<R> ddim_sample(const UNetT<R>& eps_net, const NoiseSchedule& sch,
                       const TensorT<R>& xm_latent, const GarmentFeatureStackT<R>& feats_cond,
                       const GarmentFeatureStackT<R>* feats_uncond, const TensorT<R>& psi_cond,
                       const TensorT<R>& psi_uncond, const SampleConfig& cfg,
                       DdimStats* stats = nullptr,
                       const std::function<void(int, int, const TensorT<R>&)>& pre_step = {}) {
    validate_sample_config(cfg, sch);
    if (xm_latent.rank() != 3) throw ShapeError("ddim_sample: expected latent [c x h x w]");
    Rng r(cfg.seed);
    TensorT<R> z = normal<R>(r.fork("zT"), xm_latent.shape());
    const bool both = cfg.guidance > 1.0 || cfg.force_both_branches;
    auto eps_fn = [&](const TensorT<R>& zc, int t) -> TensorT<R> {
        TensorT<R> zin = detail::concat_latent_channels(xm_latent, zc);
        TensorT<R> eps_c = eps_net.denoise(zin, t, &feats_cond, psi_cond);
        if (stats) ++stats->denoise_calls;
        if (!both) return eps_c;
        TensorT<R> eps_u = eps_net.denoise(zin, t, feats_uncond, psi_uncond);
        if (stats) ++stats->denoise_calls;
        return cfg_combine(eps_c, eps_u, cfg.guidance);
    };
    if (stats) stats->steps = cfg.sampler_steps;
    return ddim_trajectory<R>(sch, std::move(z), cfg.sampler_steps, eps_fn, pre_step);
}

// Convenience overload: same conditioning tokens in both branches.
template <class R>
TensorT<R> ddim_sample(const UNetT<R>& eps_net, const NoiseSchedule& sch,
                       const TensorT<R>& xm_latent, const GarmentFeatureStackT<R>& feats_cond,
                       const GarmentFeatureStackT<R>& feats_uncond, const TensorT<R>& psi,
                       const SampleConfig& cfg, DdimStats* stats = nullptr,
                       const std::function<void(int, int, const TensorT<R>&)>& pre_step = {}) {
    return ddim_sample<R>(eps_net, sch, xm_latent, feats_cond, &feats_uncond, psi, psi, cfg,
                          stats, pre_step);
}

}  // namespace ootd
