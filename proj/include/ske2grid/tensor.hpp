#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "ske2grid/errors.hpp"
#include "ske2grid/rng.hpp"

namespace ske2grid::core {

template <typename T>
struct Tensor;

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

inline std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// Dense row-major tensor participating in a reverse-mode tape. Each non-leaf
// tensor is a tape node: it keeps strong references to its inputs and a
// closure that scatters its grad into theirs. backward() seeds the scalar
// output and replays closures in reverse topological order, visiting each
// node exactly once. Leaf gradients accumulate (+=) so that the backward of a
// sum of losses equals the sum of backwards.
template <typename T>
struct Tensor : std::enable_shared_from_this<Tensor<T>> {
    std::vector<std::int64_t> shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;

    const char* op = "leaf";
    std::vector<TensorPtr<T>> parents;
    std::function<void()> backward_fn;

    Tensor(std::vector<std::int64_t> s, std::vector<T> d, bool rg)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        if (requires_grad) grad.assign(data.size(), T(0));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }

    static TensorPtr<T> create(std::vector<std::int64_t> shape, std::vector<T> data,
                               bool requires_grad = false) {
        return std::make_shared<Tensor<T>>(std::move(shape), std::move(data), requires_grad);
    }

    static TensorPtr<T> zeros(std::vector<std::int64_t> shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return create(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)),
                      requires_grad);
    }

    static TensorPtr<T> full(std::vector<std::int64_t> shape, T value,
                             bool requires_grad = false) {
        auto n = shape_numel(shape);
        return create(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value),
                      requires_grad);
    }

    static TensorPtr<T> uniform(Rng& rng, std::vector<std::int64_t> shape, double lo, double hi,
                                bool requires_grad = false) {
        auto n = shape_numel(shape);
        std::vector<T> d(static_cast<std::size_t>(n));
        for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
        return create(std::move(shape), std::move(d), requires_grad);
    }

    static TensorPtr<T> normal(Rng& rng, std::vector<std::int64_t> shape, double mean,
                               double stddev, bool requires_grad = false) {
        auto n = shape_numel(shape);
        std::vector<T> d(static_cast<std::size_t>(n));
        for (auto& v : d) v = static_cast<T>(mean + stddev * rng.normal());
        return create(std::move(shape), std::move(d), requires_grad);
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }

    void zero_grad() {
        std::fill(grad.begin(), grad.end(), T(0));
    }

    void set_requires_grad(bool rg) {
        requires_grad = rg;
        if (rg)
            ensure_grad();
        else
            grad.clear();
    }

    // Drop tape edges; used when a node should live on as a plain leaf.
    void detach_() {
        parents.clear();
        backward_fn = nullptr;
        op = "leaf";
    }

    void backward() {
        if (numel() != 1)
            throw DimensionError("backward() requires a scalar output, got shape " +
                                 shape_str(shape));
        if (!requires_grad) throw Error("backward() on a tensor that does not require grad");

        // Iterative post-order DFS over parents.
        std::vector<Tensor<T>*> order;
        std::unordered_set<Tensor<T>*> seen;
        struct Frame {
            Tensor<T>* node;
            std::size_t next_parent;
        };
        std::vector<Frame> stack;
        stack.push_back({this, 0});
        seen.insert(this);
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                Tensor<T>* p = f.node->parents[f.next_parent++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }

        ensure_grad();
        grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn();
        }
    }
};

// Wires up a tape node when any input requires grad. `build` receives the raw
// output pointer and must return the backward closure.
template <typename T, typename Builder>
void attach_tape(const TensorPtr<T>& out, const char* op_name,
                 std::vector<TensorPtr<T>> parents, Builder&& build) {
    bool rg = false;
    for (const auto& p : parents)
        if (p && p->requires_grad) rg = true;
    if (!rg) return;
    out->requires_grad = true;
    out->ensure_grad();
    out->op = op_name;
    out->parents = std::move(parents);
    out->backward_fn = build(out.get());
}

}  // namespace ske2grid::core
