#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "avatarkit/tensor.hpp"

namespace avk {

// Reverse-mode autodiff over a dynamically built DAG. Each node's vjp emits
// new graph nodes instead of raw tensors, so gradients are themselves
// differentiable (needed for the R1 penalty, which trains on a gradient).

template <typename T>
struct Node;

template <typename T>
struct Var {
    std::shared_ptr<Node<T>> node;

    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node(std::move(n)) {}

    explicit operator bool() const { return static_cast<bool>(node); }
    const Tensor<T>& val() const { return node->value; }
    const Shape& shape() const { return node->value.shape(); }
    bool requires_grad() const { return node && node->requires_grad; }
    T item() const {
        if (node->value.numel() != 1) throw ShapeError("item() on non-scalar");
        return node->value[0];
    }
};

template <typename T>
struct Node : std::enable_shared_from_this<Node<T>> {
    Tensor<T> value;
    bool requires_grad = false;
    std::vector<Var<T>> inputs;
    // Maps the output gradient to per-input gradient contributions. An empty
    // Var in the result means "no gradient for this input".
    std::function<std::vector<Var<T>>(const std::vector<Var<T>>& inputs, const Var<T>& output,
                                      const Var<T>& grad_out)>
        vjp;
    const char* op = "";
};

template <typename T>
Var<T> make_leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->op = "leaf";
    return Var<T>(std::move(n));
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return make_leaf<T>(std::move(value), false);
}

template <typename T>
Var<T> constant(T v) {
    return make_leaf<T>(Tensor<T>::scalar(v), false);
}

template <typename T>
Var<T> detach(const Var<T>& v) {
    return make_leaf<T>(v.val(), false);
}

template <typename T, typename Vjp>
Var<T> make_op(const char* op, Tensor<T> value, std::vector<Var<T>> inputs, Vjp vjp) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    for (const auto& in : inputs)
        if (in.requires_grad()) n->requires_grad = true;
    n->inputs = std::move(inputs);
    if (n->requires_grad) n->vjp = std::move(vjp);
    return Var<T>(std::move(n));
}

namespace detail {

template <typename T>
void topo_order(Node<T>* root, std::vector<Node<T>*>& order) {
    // iterative post-order DFS; graphs can be deep
    std::unordered_map<Node<T>*, int> mark;  // 0 unseen, 1 in stack, 2 done
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root, 0});
    mark[root] = 1;
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->inputs.size()) {
            Node<T>* child = n->inputs[idx].node.get();
            ++idx;
            if (child && child->requires_grad && mark[child] == 0) {
                mark[child] = 1;
                stack.push_back({child, 0});
            }
        } else {
            mark[n] = 2;
            order.push_back(n);
            stack.pop_back();
        }
    }
}

}  // namespace detail

template <typename T>
Var<T> add_grads(const Var<T>& a, const Var<T>& b);  // defined in ops.hpp

// Gradients of a scalar root with respect to `wrt`. Missing dependence yields
// a zero tensor of the leaf's shape. The returned Vars stay attached to the
// graph, so taking grad() of an expression built from them is valid.
template <typename T>
std::vector<Var<T>> grad(const Var<T>& root, const std::vector<Var<T>>& wrt) {
    if (root.val().numel() != 1) throw ShapeError("grad root must be scalar");
    std::vector<Node<T>*> order;
    if (root.requires_grad()) detail::topo_order(root.node.get(), order);

    std::unordered_map<Node<T>*, Var<T>> gmap;
    gmap[root.node.get()] = constant<T>(Tensor<T>::full(root.shape(), T(1)));

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        auto found = gmap.find(n);
        if (found == gmap.end() || !n->vjp) continue;
        Var<T> output(n->shared_from_this());
        std::vector<Var<T>> gins = n->vjp(n->inputs, output, found->second);
        if (gins.size() != n->inputs.size()) throw Error("vjp arity mismatch");
        for (size_t i = 0; i < gins.size(); ++i) {
            if (!gins[i]) continue;
            if (!n->inputs[i].requires_grad()) continue;
            Node<T>* target = n->inputs[i].node.get();
            auto g = gmap.find(target);
            if (g == gmap.end())
                gmap[target] = gins[i];
            else
                g->second = add_grads(g->second, gins[i]);
        }
    }

    std::vector<Var<T>> result;
    result.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto g = gmap.find(w.node.get());
        if (g == gmap.end())
            result.push_back(constant<T>(Tensor<T>::zeros(w.shape())));
        else
            result.push_back(g->second);
    }
    return result;
}

}  // namespace avk
