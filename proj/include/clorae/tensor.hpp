// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices of doubles with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle onto a graph node. Operations (see ops.hpp)
// record their inputs and a backward closure when gradient recording is
// enabled and at least one input requires a gradient. Calling backward() on
// a 1x1 result walks the recorded graph in reverse topological order and
// accumulates gradients into every reachable leaf that requires one.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "clorae/errors.hpp"

namespace clorae {

namespace detail {

struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    double* grad_data() {
        if (grad.empty()) {
            grad.assign(value.size(), 0.0);
        }
        return grad.data();
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

[[nodiscard]] inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline std::string shape_string(std::size_t rows, std::size_t cols) {
    std::ostringstream os;
    os << "[" << rows << "x" << cols << "]";
    return os.str();
}

class Tensor {
public:
    Tensor() = default;

    Tensor(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        require(rows > 0 && cols > 0, ErrorCategory::dimension,
                "tensor dimensions must be positive, got " + shape_string(rows, cols));
        require(values.size() == rows * cols, ErrorCategory::dimension,
                "tensor of shape " + shape_string(rows, cols) + " given " +
                    std::to_string(values.size()) + " values");
        node_->rows = rows;
        node_->cols = cols;
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
        return Tensor(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
    }

    static Tensor filled(std::size_t rows, std::size_t cols, double v) {
        return Tensor(rows, cols, std::vector<double>(rows * cols, v));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(1, 1, std::vector<double>{v}, requires_grad);
    }

    static Tensor identity(std::size_t n) {
        Tensor t = zeros(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            t.data()[i * n + i] = 1.0;
        }
        return t;
    }

    [[nodiscard]] bool defined() const noexcept { return static_cast<bool>(node_); }
    [[nodiscard]] std::size_t rows() const noexcept { return node_->rows; }
    [[nodiscard]] std::size_t cols() const noexcept { return node_->cols; }
    [[nodiscard]] std::size_t size() const noexcept { return node_->value.size(); }
    [[nodiscard]] std::vector<std::size_t> shape() const { return {node_->rows, node_->cols}; }
    [[nodiscard]] std::string shape_str() const { return shape_string(rows(), cols()); }

    [[nodiscard]] std::span<const double> values() const noexcept { return node_->value; }
    [[nodiscard]] double* data() noexcept { return node_->value.data(); }
    [[nodiscard]] const double* data() const noexcept { return node_->value.data(); }

    [[nodiscard]] double operator()(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

    [[nodiscard]] double item() const {
        require(size() == 1, ErrorCategory::contract, "item() on tensor of shape " + shape_str());
        return node_->value[0];
    }

    [[nodiscard]] bool requires_grad() const noexcept { return node_->requires_grad; }
    [[nodiscard]] bool is_leaf() const noexcept { return node_->is_leaf; }

    void set_requires_grad(bool flag) {
        require(node_->is_leaf, ErrorCategory::contract, "requires_grad can only be toggled on leaf tensors");
        node_->requires_grad = flag;
        if (!flag) {
            node_->grad.clear();
        }
    }

    [[nodiscard]] bool has_grad() const noexcept { return !node_->grad.empty(); }
    // Gradient buffer; empty span when nothing has been accumulated.
    [[nodiscard]] std::span<const double> grad() const noexcept { return node_->grad; }
    [[nodiscard]] double* mutable_grad() { return node_->grad_data(); }
    void zero_grad() noexcept { node_->grad.clear(); }

    [[nodiscard]] double grad_norm() const {
        double s = 0.0;
        for (double g : node_->grad) {
            s += g * g;
        }
        return std::sqrt(s);
    }

    // New leaf holding a copy of the values, outside any graph.
    [[nodiscard]] Tensor clone() const { return Tensor(rows(), cols(), node_->value); }

    [[nodiscard]] const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(node_->value.begin(), node_->value.end(), [](double v) { return std::isfinite(v); });
    }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds the result node of an operation; the backward closure is kept only
// when recording is on and some input needs a gradient.
inline Tensor make_result(std::size_t rows, std::size_t cols, std::vector<double> value,
                          std::vector<std::shared_ptr<Node>> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->rows = rows;
    node->cols = cols;
    node->value = std::move(value);
    const bool needs_grad =
        grad_mode_flag() && std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n->requires_grad; });
    if (needs_grad) {
        node->requires_grad = true;
        node->is_leaf = false;
        node->parents = std::move(inputs);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

}  // namespace detail

// Reverse pass from a scalar. Intermediate nodes release their closures
// afterwards; leaf gradients accumulate across calls until zero_grad().
inline void backward(const Tensor& loss) {
    require(loss.defined(), ErrorCategory::contract, "backward() on an undefined tensor");
    require(loss.rows() == 1 && loss.cols() == 1, ErrorCategory::contract,
            "backward() requires a scalar loss, got " + loss.shape_str());
    if (!loss.requires_grad()) {
        return;
    }

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_data()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward && !node->grad.empty()) {
            node->backward(*node);
        }
    }
    for (detail::Node* node : order) {
        if (!node->is_leaf) {
            node->backward = nullptr;
            node->parents.clear();
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

}  // namespace clorae
