#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every backward rule is written in terms of differentiable ops, so the
// gradients returned by grad(..., create_graph = true) are themselves graph
// nodes and can be differentiated again.

#include <sleeper/tensor.hpp>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace sleeper {

class Var;

/// Input mask passed to a backward rule: needs[i] is false when the gradient
/// of input i is not required, and the rule may return an empty Var for it.
using NeedsMask = std::vector<bool>;
using BackwardFn = std::function<std::vector<Var>(const Var& grad_out, const NeedsMask& needs)>;

class AutodiffError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Node {
    Tensor value;
    std::string op;
    std::vector<Var> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool twice_differentiable = true;
    std::uint64_t id = 0;
};

namespace detail {
inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled) : previous_(detail::grad_mode_flag()) {
        detail::grad_mode_flag() = enabled;
    }
    ~GradModeGuard() { detail::grad_mode_flag() = previous_; }
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

/// Handle to an immutable graph node.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

    static Var constant(Tensor value) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->op = "constant";
        n->id = detail::next_node_id();
        return Var(std::move(n));
    }
    static Var leaf(Tensor value, bool requires_grad = true) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->op = "leaf";
        n->requires_grad = requires_grad;
        n->id = detail::next_node_id();
        return Var(std::move(n));
    }
    static Var scalar(double v) { return constant(Tensor::scalar(v)); }

    bool defined() const noexcept { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    double item() const { return node_->value.item(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::string& op() const { return node_->op; }
    const Node* node() const noexcept { return node_.get(); }

    /// Same value, cut from the graph.
    Var detach() const { return constant(node_->value); }

private:
    std::shared_ptr<const Node> node_;
};

/// Creates an op result. The node records its inputs and backward rule only
/// when recording is enabled and some input requires a gradient.
inline Var make_op(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward,
                   bool twice_differentiable = true) {
    if (!value.all_finite())
        throw AutodiffError(op + ": produced a non-finite value");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = std::move(op);
    n->id = detail::next_node_id();
    const bool track = grad_enabled() &&
                       std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (track) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backward = std::move(backward);
        n->twice_differentiable = twice_differentiable;
    }
    return Var(std::move(n));
}

inline Var add(const Var& a, const Var& b);

/// Gradients of a rank-0 `root` with respect to each node in `wrt`.
///
/// With create_graph the results are differentiable graph nodes; otherwise
/// they are constants. Nodes in `wrt` that do not influence `root` receive a
/// zero gradient.
inline std::vector<Var> grad(const Var& root, std::span<const Var> wrt, bool create_graph = false) {
    if (!root.defined() || root.value().rank() != 0)
        throw AutodiffError("grad: root must be a rank-0 scalar, got shape " +
                            (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));

    // Collect every recorded node reachable from the root.
    std::vector<const Node*> order;
    std::unordered_set<const Node*> seen;
    std::vector<const Node*> stack;
    if (root.requires_grad()) {
        stack.push_back(root.node());
        seen.insert(root.node());
    }
    while (!stack.empty()) {
        const Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const Var& in : n->inputs) {
            if (in.requires_grad() && seen.insert(in.node()).second) stack.push_back(in.node());
        }
    }
    // Ids grow with creation, and inputs always exist before their consumers.
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id < b->id; });

    // Mark nodes from which some wrt node is reachable.
    std::unordered_set<const Node*> targets;
    for (const Var& w : wrt)
        if (w.defined()) targets.insert(w.node());
    std::unordered_set<const Node*> needed;
    for (const Node* n : order) {
        bool need = targets.count(n) > 0;
        for (const Var& in : n->inputs) need = need || needed.count(in.node()) > 0;
        if (need) needed.insert(n);
    }

    if (create_graph) {
        std::vector<std::string> missing;
        for (const Node* n : order)
            if (needed.count(n) && n->backward && !n->twice_differentiable &&
                std::find(missing.begin(), missing.end(), n->op) == missing.end())
                missing.push_back(n->op);
        if (!missing.empty()) {
            std::string msg = "grad: create_graph requested through ops without a double-backward rule:";
            for (const auto& op : missing) msg += " " + op;
            throw AutodiffError(msg);
        }
    }

    GradModeGuard mode(create_graph);
    std::unordered_map<const Node*, Var> grads;
    if (needed.count(root.node())) grads[root.node()] = Var::scalar(1.0);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Node* n = *it;
        auto g = grads.find(n);
        if (g == grads.end() || !n->backward) continue;
        NeedsMask needs(n->inputs.size());
        bool any = false;
        for (std::size_t i = 0; i < n->inputs.size(); ++i) {
            needs[i] = n->inputs[i].requires_grad() && needed.count(n->inputs[i].node()) > 0;
            any = any || needs[i];
        }
        if (!any) continue;
        const Var upstream = g->second;
        std::vector<Var> input_grads = n->backward(upstream, needs);
        for (std::size_t i = 0; i < n->inputs.size(); ++i) {
            if (!needs[i] || !input_grads[i].defined()) continue;
            const Node* in = n->inputs[i].node();
            auto [slot, inserted] = grads.try_emplace(in, input_grads[i]);
            if (!inserted) slot->second = add(slot->second, input_grads[i]);
        }
        // Interior gradients are no longer needed once propagated.
        if (!targets.count(n)) grads.erase(n);
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const Var& w : wrt) {
        auto g = grads.find(w.node());
        if (g == grads.end()) {
            out.push_back(Var::constant(Tensor::zeros(w.shape())));
        } else {
            out.push_back(create_graph ? g->second : g->second.detach());
        }
    }
    return out;
}

inline Var grad(const Var& root, const Var& wrt, bool create_graph = false) {
    return grad(root, std::span<const Var>(&wrt, 1), create_graph)[0];
}

} // namespace sleeper
