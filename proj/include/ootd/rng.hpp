#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "ootd/errors.hpp"
#include "ootd/tensor.hpp"

namespace ootd {

namespace detail {

inline uint64_t mix64(uint64_t z) {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

// Counter-based splittable PRNG (splitmix64 core). A stream is a pure
// function of its seed; fork(label) derives a child seed from (seed, label)
// without consuming parent state, so labeled streams are independent and a
// fork is reproducible no matter how much the parent has been used.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : seed_(detail::mix64(seed ^ 0x2545f4914f6cdd1dULL)), counter_(0) {}

    uint64_t next_u64() {
        counter_ += 0x9e3779b97f4a7c15ULL;
        return detail::mix64(seed_ ^ counter_);
    }

    Rng fork(std::string_view label) const {
        Rng child;
        child.seed_ = detail::mix64(seed_ ^ detail::fnv1a64(label) ^ 0xa0761d6478bd642fULL);
        child.counter_ = 0;
        return child;
    }

    Rng fork(uint64_t index) const {
        Rng child;
        child.seed_ = detail::mix64(seed_ ^ detail::mix64(index + 0x8bb84b93962eacc9ULL));
        child.counter_ = 0;
        return child;
    }

    // Uniform double in [0, 1).
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller, computed in double.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - next_unit();  // (0, 1], keeps log finite
        double u2 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

template <class R = float>
TensorT<R> normal(Rng& rng, const Shape& shape) {
    TensorT<R> t(shape);  // validates dims > 0
    R* p = t.data();
    for (size_t i = 0; i < t.size(); ++i) p[i] = static_cast<R>(rng.next_normal());
    return t;
}

template <class R = float>
TensorT<R> uniform(Rng& rng, const Shape& shape, R lo, R hi) {
    if (!(lo < hi)) throw RangeError("uniform: lo >= hi");
    TensorT<R> t(shape);
    R* p = t.data();
    for (size_t i = 0; i < t.size(); ++i) {
        R v = static_cast<R>(static_cast<double>(lo) + rng.next_unit() * (static_cast<double>(hi) - lo));
        if (v >= hi) v = std::nextafter(hi, lo);  // guard float rounding onto hi
        p[i] = v;
    }
    return t;
}

// Rvalue overloads so freshly forked streams can be consumed in place.
template <class R = float>
TensorT<R> normal(Rng&& rng, const Shape& shape) {
    Rng r = rng;
    return normal<R>(r, shape);
}

template <class R = float>
TensorT<R> uniform(Rng&& rng, const Shape& shape, R lo, R hi) {
    Rng r = rng;
    return uniform<R>(r, shape, lo, hi);
}

}  // namespace ootd
