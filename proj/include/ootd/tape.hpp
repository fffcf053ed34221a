#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "ootd/tensor.hpp"

namespace ootd {

template <class R>
class TapeT;

// Handle to a node on a tape. Cheap to copy; owns nothing.
template <class R>
struct VarT {
    int id = -1;
    TapeT<R>* tape = nullptr;

    bool defined() const { return tape != nullptr && id >= 0; }
    const TensorT<R>& val() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, which is a
// topological order by construction; backward() walks it in reverse. When
// grads are disabled (inference) values still flow but closures are not
// recorded, so frozen subgraphs cost only the forward arithmetic.
template <class R>
class TapeT {
public:
    struct Node {
        TensorT<R> value;
        TensorT<R> grad;  // allocated on first accumulation
        bool requires_grad = false;
        int param_id = -1;
        std::function<void(TapeT&, const Node&)> backward;
    };

    explicit TapeT(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    VarT<R> leaf(TensorT<R> value, bool requires_grad = false, int param_id = -1) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad && grad_enabled_;
        n.param_id = param_id;
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1, this};
    }

    VarT<R> constant(TensorT<R> value) { return leaf(std::move(value), false); }

    // Register an op result. `backward` may be empty for non-differentiable ops.
    VarT<R> make(TensorT<R> value, std::initializer_list<VarT<R>> parents,
                 std::function<void(TapeT&, const Node&)> backward) {
        Node n;
        n.value = std::move(value);
        bool need = false;
        for (const auto& p : parents) need = need || node(p.id).requires_grad;
        n.requires_grad = need && grad_enabled_;
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1, this};
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t node_count() const { return nodes_.size(); }

    const TensorT<R>& value(VarT<R> v) const { return node(v.id).value; }

    // Gradient buffer of a node, allocated as zeros on demand.
    TensorT<R>& grad(int id) {
        Node& n = node(id);
        if (!n.grad.defined()) n.grad = TensorT<R>(n.value.shape());
        return n.grad;
    }

    bool has_grad(int id) const { return node(id).grad.defined(); }

    void add_grad(int id, const TensorT<R>& g) {
        if (!node(id).requires_grad) return;
        TensorT<R>& dst = grad(id);
        const R* s = g.data();
        R* d = dst.data();
        for (size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
    }

    void backward(VarT<R> root) {
        Node& r = node(root.id);
        if (!r.requires_grad) return;
        grad(root.id);  // allocate
        r.grad.data()[0] = R(1);
        if (r.value.size() != 1) {
            for (size_t i = 0; i < r.value.size(); ++i) r.grad.data()[i] = R(1);
        }
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.requires_grad && n.grad.defined() && n.backward) n.backward(*this, n);
        }
    }

    // Visit parameter leaves that accumulated a gradient.
    template <class F>
    void for_each_param_grad(F&& f) const {
        for (const Node& n : nodes_)
            if (n.param_id >= 0 && n.grad.defined()) f(n.param_id, n.grad);
    }

private:
    std::deque<Node> nodes_;
    bool grad_enabled_;
};

template <class R>
const TensorT<R>& VarT<R>::val() const {
    return tape->value(*this);
}

using Tape = TapeT<float>;
using Var = VarT<float>;

}  // namespace ootd
