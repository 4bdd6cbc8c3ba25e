#pragma once

// Minimal N-dimensional array with a reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node (copying a Tensor aliases the
// same storage, like a framework tensor). Ops record a backward closure on
// their output node whenever an input requires a gradient and grad mode is on;
// backward() walks the recorded graph in reverse topological order.

#include "damd/error.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace damd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty means "absent"
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward; // empty for leaves

    void ensure_grad()
    {
        if (grad.size() != data.size())
            grad.assign(data.size(), T(0));
    }
};

inline bool& grad_mode()
{
    thread_local bool enabled = true;
    return enabled;
}

/// Fingerprint of the branches taken by piecewise ops (ReLU sign, Wing branch).
/// Only maintained while `active`; the finite-difference harness uses it to
/// detect stencils that straddle a non-differentiable point.
struct BranchTrace {
    bool active = false;
    std::uint64_t hash = 14695981039346656037ull;

    void record(unsigned branch)
    {
        hash ^= branch + 1;
        hash *= 1099511628211ull;
    }
};

inline BranchTrace& branch_trace()
{
    thread_local BranchTrace trace;
    return trace;
}

} // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>())
    {
        node_->data.assign(numel_of(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>())
    {
        if (numel_of(shape) != data.size())
            throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                                 std::to_string(numel_of(shape)) + " elements, got " +
                                 std::to_string(data.size()));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, value); }

    static Tensor from_node(NodePtr node)
    {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const NodePtr& node() const { return node_; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const
    {
        if (axis >= rank())
            throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                                 shape_str(shape()));
        return node_->shape[axis];
    }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }

    T item() const
    {
        if (numel() != 1)
            throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on)
    {
        node_->requires_grad = on;
        return *this;
    }
    bool is_leaf() const { return !node_->backward; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad()
    {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    /// Same data in a fresh leaf without history.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    template <typename U>
    Tensor<U> cast() const
    {
        std::vector<U> out(numel());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<U>(node_->data[i]);
        return Tensor<U>(shape(), std::move(out), requires_grad());
    }

private:
    NodePtr node_;
};

/// Builds an op output. The backward closure is attached only when some input
/// participates in the tape.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      Backward&& backward)
{
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& in : inputs)
            any = any || in.requires_grad();
        if (any) {
            node->requires_grad = true;
            for (const auto& in : inputs)
                node->parents.push_back(in.node());
            node->backward = std::forward<Backward>(backward);
        }
    }
    return Tensor<T>::from_node(std::move(node));
}

template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      Backward&& backward)
{
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& in : inputs)
            any = any || in.requires_grad();
        if (any) {
            node->requires_grad = true;
            for (const auto& in : inputs)
                node->parents.push_back(in.node());
            node->backward = std::forward<Backward>(backward);
        }
    }
    return Tensor<T>::from_node(std::move(node));
}

/// Populates d(loss)/d(leaf) on every reachable leaf that requires a gradient.
/// Leaf gradients accumulate across calls; interior gradients are recomputed.
template <typename T>
void backward(const Tensor<T>& loss)
{
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward() needs a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad())
        throw ContractError("backward(): loss is not connected to any tensor requiring grad");

    using NodeT = detail::Node<T>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (NodeT* node : order)
        if (node->backward)
            node->grad.assign(node->data.size(), T(0));
    NodeT* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward)
            (*it)->backward(**it);
}

} // namespace damd
