#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ootd/errors.hpp"

namespace ootd {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive dim in " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

// Dense row-major tensor. Data is shared between copies; by convention a
// tensor is immutable once handed across a module boundary (use clone() when
// a private buffer is needed). Mutation is reserved for initializers and the
// optimizer, which own their buffers.
template <class R>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<R>>(shape_numel(shape_), R(0))) {}

    static TensorT full(Shape shape, R v) {
        TensorT t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
    static TensorT ones(Shape shape) { return full(std::move(shape), R(1)); }

    static TensorT zeros_like(const TensorT& other) { return TensorT(other.shape()); }

    static TensorT from_data(Shape shape, std::vector<R> values) {
        size_t n = shape_numel(shape);
        if (values.size() != n)
            throw ShapeError("data length " + std::to_string(values.size()) + " != numel of " + ootd::shape_str(shape));
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<R>>(std::move(values));
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    size_t size() const { return data_ ? data_->size() : 0; }

    const R* data() const { return data_->data(); }
    R* data() { return data_->data(); }

    R at(size_t i) const { return (*data_)[i]; }
    R& at(size_t i) { return (*data_)[i]; }
    R at(int i, int j) const { return (*data_)[off2(i, j)]; }
    R& at(int i, int j) { return (*data_)[off2(i, j)]; }
    R at(int c, int y, int x) const { return (*data_)[off3(c, y, x)]; }
    R& at(int c, int y, int x) { return (*data_)[off3(c, y, x)]; }

    std::string shape_str() const { return ootd::shape_str(shape_); }

    // Flat offsets for the common layouts.
    size_t off3(int c, int y, int x) const {
        return (static_cast<size_t>(c) * dim(1) + y) * dim(2) + x;
    }
    size_t off2(int i, int j) const { return static_cast<size_t>(i) * dim(1) + j; }

    TensorT clone() const {
        TensorT t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<R>>(*data_);
        return t;
    }

    TensorT reshaped(Shape s) const {
        if (shape_numel(s) != size())
            throw ShapeError("reshape " + ootd::shape_str(shape_) + " -> " + ootd::shape_str(s));
        TensorT t;
        t.shape_ = std::move(s);
        t.data_ = data_;
        return t;
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (R v : *data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool bitwise_equal(const TensorT& o) const {
        if (shape_ != o.shape_) return false;
        return std::memcmp(data_->data(), o.data_->data(), size() * sizeof(R)) == 0;
    }

private:
    Shape shape_;
    std::shared_ptr<std::vector<R>> data_;
};

using Tensor = TensorT<float>;

template <class R>
void check_same_shape(const TensorT<R>& a, const TensorT<R>& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class R>
void check_finite(const TensorT<R>& t, const char* what) {
    if (!t.all_finite()) throw RangeError(std::string(what) + ": non-finite values");
}

}  // namespace ootd
