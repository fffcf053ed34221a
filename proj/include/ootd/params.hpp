#pragma once

// Named parameter storage shared by the model assemblies. A store owns the
// master copies of all weights; per-sample tapes bind them as leaves so
// gradients can be pulled out by parameter id after backward().

#include <string>
#include <unordered_map>
#include <vector>

#include "ootd/errors.hpp"
#include "ootd/rng.hpp"
#include "ootd/tape.hpp"
#include "ootd/tensor.hpp"

namespace ootd {

template <class R>
class ParamStoreT {
public:
    int add(const std::string& name, TensorT<R> value) {
        if (index_.count(name)) throw InputError("duplicate parameter name: " + name);
        int id = static_cast<int>(values_.size());
        index_[name] = id;
        names_.push_back(name);
        values_.push_back(std::move(value));
        return id;
    }

    int count() const { return static_cast<int>(values_.size()); }
    const std::string& name(int id) const { return names_[static_cast<size_t>(id)]; }
    TensorT<R>& value(int id) { return values_[static_cast<size_t>(id)]; }
    const TensorT<R>& value(int id) const { return values_[static_cast<size_t>(id)]; }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    int id_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw InputError("unknown parameter: " + name);
        return it->second;
    }

    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<TensorT<R>> values_;
    std::unordered_map<std::string, int> index_;
};

using ParamStore = ParamStoreT<float>;

// Leaves for every parameter of a store on one tape. Bind once per tape and
// index by parameter id.
template <class R>
class BoundParamsT {
public:
    BoundParamsT(TapeT<R>& tape, ParamStoreT<R>& store, bool trainable)
        : vars_(static_cast<size_t>(store.count())) {
        for (int i = 0; i < store.count(); ++i)
            vars_[static_cast<size_t>(i)] = tape.leaf(store.value(i), trainable, i);
    }

    VarT<R> operator[](int id) const { return vars_[static_cast<size_t>(id)]; }
    VarT<R> var(int id) const { return vars_[static_cast<size_t>(id)]; }

private:
    std::vector<VarT<R>> vars_;
};

using BoundParams = BoundParamsT<float>;

// ------------------------------------------------------------ initializers

// Initializers take the RNG by value: every call owns an independent stream,
// so callers fork a labeled child per parameter.
template <class R>
TensorT<R> init_normal(Rng rng, const Shape& shape, double std) {
    TensorT<R> t = normal<R>(rng, shape);
    for (size_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<R>(t.data()[i] * std);
    return t;
}

// He-style fan-in scaling for conv weights [OC x C x kh x kw].
template <class R>
TensorT<R> init_conv_weight(Rng rng, int oc, int c, int kh, int kw, double gain = 1.0) {
    double std = gain * std::sqrt(2.0 / (static_cast<double>(c) * kh * kw));
    return init_normal<R>(std::move(rng), {oc, c, kh, kw}, std);
}

// Transposed conv weights [C x OC x kh x kw]; fan-in is the input channels.
template <class R>
TensorT<R> init_convt_weight(Rng rng, int c, int oc, int kh, int kw, double gain = 1.0) {
    double std = gain * std::sqrt(2.0 / static_cast<double>(c));
    return init_normal<R>(std::move(rng), {c, oc, kh, kw}, std);
}

template <class R>
TensorT<R> init_linear_weight(Rng rng, int out_dim, int in_dim, double gain = 1.0) {
    double std = gain * std::sqrt(2.0 / static_cast<double>(in_dim));
    return init_normal<R>(std::move(rng), {out_dim, in_dim}, std);
}

}  // namespace ootd
