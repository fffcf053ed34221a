#pragma once

// AdamW with decoupled weight decay. Moment buffers live here and are
// exported/imported as named tensors so an interrupted run can resume with
// bit-identical state.

#include <cmath>
#include <vector>

#include "ootd/params.hpp"
#include "ootd/tensor.hpp"

namespace ootd {

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

template <class R>
class AdamWT {
public:
    AdamWT(const ParamStoreT<R>& store, AdamWConfig cfg) : cfg_(cfg) {
        m_.reserve(static_cast<size_t>(store.count()));
        v_.reserve(static_cast<size_t>(store.count()));
        for (int i = 0; i < store.count(); ++i) {
            m_.push_back(TensorT<R>(store.value(i).shape()));
            v_.push_back(TensorT<R>(store.value(i).shape()));
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    long step_count() const { return step_; }

    // grads[i] aligns with store parameter id i; undefined tensors are
    // treated as zero gradient (the parameter still decays).
    void step(ParamStoreT<R>& store, const std::vector<TensorT<R>>& grads) {
        ++step_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (int i = 0; i < store.count(); ++i) {
            TensorT<R>& p = store.value(i);
            TensorT<R>& m = m_[static_cast<size_t>(i)];
            TensorT<R>& v = v_[static_cast<size_t>(i)];
            const TensorT<R>* g = nullptr;
            if (static_cast<size_t>(i) < grads.size() && grads[static_cast<size_t>(i)].defined())
                g = &grads[static_cast<size_t>(i)];
            // Parameter tensors may be shared with an in-flight tape; update
            // a private copy and republish.
            TensorT<R> pn = p.clone();
            for (size_t k = 0; k < pn.size(); ++k) {
                double gk = g ? static_cast<double>(g->data()[k]) : 0.0;
                double mk = cfg_.beta1 * static_cast<double>(m.data()[k]) + (1.0 - cfg_.beta1) * gk;
                double vk = cfg_.beta2 * static_cast<double>(v.data()[k]) +
                            (1.0 - cfg_.beta2) * gk * gk;
                m.data()[k] = static_cast<R>(mk);
                v.data()[k] = static_cast<R>(vk);
                double mhat = mk / bc1;
                double vhat = vk / bc2;
                double pk = static_cast<double>(pn.data()[k]);
                pk -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * pk);
                pn.data()[k] = static_cast<R>(pk);
            }
            p = pn;
        }
    }

    // Moment buffers by parameter id (for checkpointing).
    TensorT<R>& moment1(int id) { return m_[static_cast<size_t>(id)]; }
    TensorT<R>& moment2(int id) { return v_[static_cast<size_t>(id)]; }
    void set_step_count(long s) { step_ = s; }

private:
    AdamWConfig cfg_;
    std::vector<TensorT<R>> m_;
    std::vector<TensorT<R>> v_;
    long step_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace ootd
