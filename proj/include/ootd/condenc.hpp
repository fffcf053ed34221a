#pragma once

// Garment condition encoder: turns a garment RGB image plus a category label
// into a small token sequence psi = [garment_token; label_token] (2 x dim).
// The tokens feed the cross-attention blocks of both UNets.

#include <string>
#include <vector>

#include "ootd/errors.hpp"
#include "ootd/ops.hpp"
#include "ootd/params.hpp"
#include "ootd/rng.hpp"
#include "ootd/synthdata.hpp"

namespace ootd {

struct CondEncConfig {
    int dim = 64;   // token dimensionality
    int base = 16;  // first conv width; doubles per stage
};

template <class R>
class CondEncT {
public:
    CondEncT(ParamStoreT<R>& store, std::string prefix, CondEncConfig cfg, Rng init)
        : cfg_(cfg), store_(&store), prefix_(std::move(prefix)) {
        const int c1 = cfg.base, c2 = cfg.base * 2, c3 = cfg.base * 4;
        get_or_add("conv1.w", [&] { return init_conv_weight<R>(init.fork("conv1"), c1, 3, 3, 3); });
        get_or_add("conv1.b", [&] { return TensorT<R>::zeros({c1}); });
        get_or_add("conv2.w", [&] { return init_conv_weight<R>(init.fork("conv2"), c2, c1, 3, 3); });
        get_or_add("conv2.b", [&] { return TensorT<R>::zeros({c2}); });
        get_or_add("conv3.w", [&] { return init_conv_weight<R>(init.fork("conv3"), c3, c2, 3, 3); });
        get_or_add("conv3.b", [&] { return TensorT<R>::zeros({c3}); });
        get_or_add("head.w", [&] { return init_linear_weight<R>(init.fork("head"), cfg.dim, c3); });
        get_or_add("head.b", [&] { return TensorT<R>::zeros({cfg.dim}); });
        get_or_add("labels", [&] {
            return init_normal<R>(init.fork("labels"), {(int)kLabels.size(), cfg.dim}, R(1));
        });
    }

    const CondEncConfig& config() const { return cfg_; }

    // Graph-building version: garment is a [3 x H x W] image in [0,1].
    VarT<R> make_psi_g(TapeT<R>& t, const BoundParamsT<R>& p, VarT<R> garment,
                       GarmentLabel label) const {
        const TensorT<R>& gv = t.value(garment);
        if (gv.rank() != 3 || gv.dim(0) != 3)
            throw ShapeError("condenc: expected garment image [3 x H x W]");
        auto P = [&](const char* n) { return p.var(store_->id_of(prefix_ + n)); };
        VarT<R> x = conv2d(t, garment, P("conv1.w"), P("conv1.b"), 2, 1);
        x = silu(t, x);
        x = conv2d(t, x, P("conv2.w"), P("conv2.b"), 2, 1);
        x = silu(t, x);
        x = conv2d(t, x, P("conv3.w"), P("conv3.b"), 2, 1);
        x = silu(t, x);
        VarT<R> pooled = spatial_mean(t, x);                      // [c3]
        VarT<R> tok = linear(t, as_row(t, pooled), P("head.w"), P("head.b"));  // [1 x dim]
        VarT<R> lab = crop_rows(t, P("labels"), (int)label, 1);   // [1 x dim]
        return concat_rows(t, tok, lab);                          // [2 x dim]
    }

    // Value-level version (no gradients recorded).
    TensorT<R> make_psi(const TensorT<R>& garment, GarmentLabel label) const {
        TapeT<R> t(false);
        BoundParamsT<R> p(t, *store_, /*trainable=*/false);
        VarT<R> g = t.constant(garment.clone());
        VarT<R> psi = make_psi_g(t, p, g, label);
        return t.value(psi).clone();
    }

    std::vector<int> param_ids() const {
        std::vector<int> ids;
        for (const char* n : {"conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w",
                              "conv3.b", "head.w", "head.b", "labels"})
            ids.push_back(store_->id_of(prefix_ + n));
        return ids;
    }

private:
    template <class F>
    void get_or_add(const std::string& name, F make) {
        std::string full = prefix_ + name;
        if (!store_->has(full)) store_->add(full, make());
    }

    CondEncConfig cfg_;
    ParamStoreT<R>* store_;
    std::string prefix_;
};

using CondEnc = CondEncT<float>;

}  // namespace ootd
