// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "clorae/errors.hpp"
#include "clorae/random.hpp"
#include "clorae/tensor.hpp"

namespace clorae {

// A named leaf tensor. Frozen parameters never require a gradient and are
// skipped by the optimizer.
struct Parameter {
    std::string name;
    Tensor tensor;
    bool frozen = false;
};

// Ordered registry of every parameter in a model. Registration order is the
// checkpoint order and the order random initialization draws in.
class ParameterStore {
public:
    Tensor& add(std::string name, Tensor value, bool frozen) {
        require(index_.find(name) == index_.end(), ErrorCategory::contract, "duplicate parameter name " + name);
        value.set_requires_grad(!frozen);
        index_.emplace(name, params_.size());
        params_.push_back(Parameter{std::move(name), std::move(value), frozen});
        return params_.back().tensor;
    }

    Tensor& gaussian(std::string name, std::size_t rows, std::size_t cols, double stddev, Rng& rng, bool frozen) {
        std::vector<double> v(rows * cols);
        for (auto& x : v) {
            x = rng.normal(0.0, stddev);
        }
        return add(std::move(name), Tensor(rows, cols, std::move(v)), frozen);
    }

    Tensor& constant(std::string name, std::size_t rows, std::size_t cols, double value, bool frozen) {
        return add(std::move(name), Tensor(rows, cols, std::vector<double>(rows * cols, value)), frozen);
    }

    [[nodiscard]] const std::vector<Parameter>& all() const noexcept { return params_; }
    [[nodiscard]] std::vector<Parameter>& all() noexcept { return params_; }

    [[nodiscard]] const Parameter* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    [[nodiscard]] std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            if (!p.frozen) {
                n += p.tensor.size();
            }
        }
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) {
            p.tensor.zero_grad();
        }
    }

private:
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double decay_factor = 0.5;  // multiplied into the learning rate per decay event
};

// Adaptive-moment optimizer with a step-decayed learning rate.
class Adam {
public:
    explicit Adam(AdamConfig config) : config_(config) {
        require(config.learning_rate > 0.0, ErrorCategory::config, "learning rate must be positive");
        require(config.decay_factor > 0.0 && config.decay_factor <= 1.0, ErrorCategory::config,
                "decay factor must lie in (0, 1]");
    }

    void step(ParameterStore& store) {
        ++steps_;
        const double lr = current_learning_rate();
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
        for (auto& p : store.all()) {
            if (p.frozen || !p.tensor.has_grad()) {
                continue;
            }
            auto& [m, v] = moments_[p.name];
            const std::size_t n = p.tensor.size();
            if (m.empty()) {
                m.assign(n, 0.0);
                v.assign(n, 0.0);
            }
            const auto g = p.tensor.grad();
            double* w = p.tensor.data();
            for (std::size_t i = 0; i < n; ++i) {
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                w[i] -= lr * mh / (std::sqrt(vh) + config_.epsilon);
            }
        }
    }

    void decay() { ++decay_events_; }

    [[nodiscard]] double current_learning_rate() const {
        return config_.learning_rate * std::pow(config_.decay_factor, static_cast<double>(decay_events_));
    }

    [[nodiscard]] std::size_t steps() const noexcept { return steps_; }
    [[nodiscard]] std::size_t decay_events() const noexcept { return decay_events_; }
    [[nodiscard]] const AdamConfig& config() const noexcept { return config_; }

private:
    AdamConfig config_;
    std::size_t steps_ = 0;
    std::size_t decay_events_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

}  // namespace clorae
