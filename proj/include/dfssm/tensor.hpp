#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "dfssm/common.hpp"

namespace dfssm {

// Reverse-mode autodiff over rank-4 tensors. Every op produces a fresh node
// holding its value; when gradients are enabled the node also records its
// parents and a backward rule. backward(loss) replays the rules in reverse
// creation order, which is a valid topological order because parents always
// exist before their consumers.

namespace detail {
inline std::uint64_t& node_counter() {
    static std::uint64_t counter = 0;
    return counter;
}
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool& checked_mode() {
    thread_local bool enabled = false;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }
inline bool checked_enabled() { return detail::checked_mode(); }

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    bool prev_;
};

// Enables a finiteness scan of every op output; NaN/Inf raises NumericError.
struct CheckedGuard {
    CheckedGuard() : prev_(detail::checked_mode()) { detail::checked_mode() = true; }
    ~CheckedGuard() { detail::checked_mode() = prev_; }
    bool prev_;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->shape = s;
        n->value.assign(static_cast<std::size_t>(s.numel()), T(0));
        n->requires_grad = requires_grad;
        n->seq = ++detail::node_counter();
        return Tensor(std::move(n));
    }

    static Tensor full(Shape s, T v, bool requires_grad = false) {
        Tensor t = zeros(s, requires_grad);
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor from(Shape s, std::vector<T> values, bool requires_grad = false) {
        check(static_cast<std::int64_t>(values.size()) == s.numel(),
              "tensor data length does not match shape " + s.str());
        Tensor t = zeros(s, requires_grad);
        t.node()->value = std::move(values);
        return t;
    }

    static Tensor scalar(T v) { return full({1, 1, 1, 1}, v); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->shape.numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }

    T at(int n, int c, int h, int w) const {
        const Shape& s = node_->shape;
        return node_->value[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
    }

    T item() const {
        check(numel() == 1, "item() requires a scalar tensor, got " + shape().str());
        return node_->value[0];
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Leaf copy of the value; drops graph history.
    Tensor detach() const {
        Tensor t = zeros(shape());
        t.node()->value = node_->value;
        return t;
    }

    std::shared_ptr<Node<T>>& node() { return node_; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
inline void check_finite(const Node<T>& n, const char* op) {
    if (!checked_mode()) return;
    for (T v : n.value) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

// Creates the output node for an op. `parents` are recorded (and the backward
// rule attached by the caller) only when gradients are on and some parent
// requires them.
template <typename T>
inline Tensor<T> make_output(Shape s, std::initializer_list<Tensor<T>> parents) {
    Tensor<T> out = Tensor<T>::zeros(s);
    if (grad_mode()) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p.requires_grad();
        if (needs) {
            out.node()->requires_grad = true;
            for (const auto& p : parents) out.node()->parents.push_back(p.node());
        }
    }
    return out;
}

template <typename T>
inline bool recording(const Tensor<T>& out) {
    return out.node()->requires_grad;
}

}  // namespace detail

// Populates gradients of everything reachable from `loss`. Repeated calls
// accumulate; callers reset grads between steps.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw UsageError("backward() requires a scalar loss, got shape " + loss.shape().str());

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{loss.node().get()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

    // Interior grads are transient per call; only leaf (parameter/input)
    // grads accumulate across repeated backward() calls.
    for (Node<T>* n : order) {
        if (n->backward) {
            n->grad.assign(n->value.size(), T(0));
        } else {
            n->ensure_grad();
        }
    }
    loss.node()->grad[0] += T(1);
    for (Node<T>* n : order) {
        if (n->backward) {
            for (auto& p : n->parents)
                if (p->requires_grad) p->ensure_grad();
            n->backward(*n);
        }
    }
}

}  // namespace dfssm
