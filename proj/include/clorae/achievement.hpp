// SPDX-License-Identifier: Apache-2.0
//
// Achievement-based task weighting. A dataset whose current score s is far
// from its reference p gets weight close to 1; one that reaches the margin
// ∂·p gets 0. Raw weights are softmax-normalized so that no dataset is
// switched off entirely.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "clorae/errors.hpp"
#include "clorae/ops.hpp"

namespace clorae {

// (clamp(1 - s / (margin * target), 0, 1))^gamma
[[nodiscard]] inline double raw_weight(double score, double target, double margin, double gamma) {
    require(target > 0.0, ErrorCategory::config, "achievement target score must be positive");
    require(margin > 1.0, ErrorCategory::config, "achievement margin must be strictly greater than 1");
    require(gamma >= 0.0, ErrorCategory::config, "focusing exponent gamma must be non-negative");
    const double base = std::clamp(1.0 - score / (margin * target), 0.0, 1.0);
    return std::pow(base, gamma);
}

[[nodiscard]] inline std::vector<double> normalize_weights(const std::vector<double>& raw) {
    require(!raw.empty(), ErrorCategory::contract, "normalize_weights: no datasets");
    const double mx = *std::max_element(raw.begin(), raw.end());
    std::vector<double> w(raw.size());
    double z = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        w[i] = std::exp(raw[i] - mx);
        z += w[i];
    }
    for (auto& x : w) {
        x /= z;
    }
    return w;
}

struct TaskWeights {
    std::size_t epoch = 0;
    std::vector<double> weights;  // one per dataset, positive, sums to 1
};

class AchievementTracker {
public:
    AchievementTracker(std::vector<double> targets, double margin, double gamma)
        : targets_(std::move(targets)), margin_(margin), gamma_(gamma) {
        require(!targets_.empty(), ErrorCategory::config, "achievement tracker needs at least one dataset");
        require(margin_ > 1.0, ErrorCategory::config, "achievement margin must be strictly greater than 1");
        require(gamma_ >= 0.0, ErrorCategory::config, "focusing exponent gamma must be non-negative");
        for (double p : targets_) {
            require(p > 0.0 && p <= 1.0, ErrorCategory::config, "achievement targets must lie in (0, 1]");
        }
    }

    [[nodiscard]] std::size_t datasets() const noexcept { return targets_.size(); }

    // Weights for the first epoch, before any score exists.
    [[nodiscard]] TaskWeights initial() const {
        return TaskWeights{0, std::vector<double>(targets_.size(), 1.0 / static_cast<double>(targets_.size()))};
    }

    // Records the dev scores measured after epoch `history().size()` and
    // returns the weights for the next epoch.
    TaskWeights update_epoch(const std::vector<std::optional<double>>& scores) {
        std::string missing;
        for (std::size_t m = 0; m < targets_.size(); ++m) {
            if (m >= scores.size() || !scores[m].has_value()) {
                missing += (missing.empty() ? "" : ", ") + std::to_string(m);
            }
        }
        require(scores.size() <= targets_.size(), ErrorCategory::contract,
                "update_epoch: more scores than datasets");
        require(missing.empty(), ErrorCategory::contract, "update_epoch: missing scores for dataset ids " + missing);
        std::vector<double> s(targets_.size());
        std::vector<double> raw(targets_.size());
        for (std::size_t m = 0; m < targets_.size(); ++m) {
            const double v = *scores[m];
            require(v >= 0.0 && v <= 1.0, ErrorCategory::contract, "update_epoch: scores must lie in [0, 1]");
            s[m] = v;
            raw[m] = raw_weight(v, targets_[m], margin_, gamma_);
        }
        history_.push_back(std::move(s));
        return TaskWeights{history_.size(), normalize_weights(raw)};
    }

    TaskWeights update_epoch(const std::vector<double>& scores) {
        std::vector<std::optional<double>> opt(scores.begin(), scores.end());
        return update_epoch(opt);
    }

    [[nodiscard]] const std::vector<std::vector<double>>& history() const noexcept { return history_; }
    [[nodiscard]] const std::vector<double>& targets() const noexcept { return targets_; }
    [[nodiscard]] double margin() const noexcept { return margin_; }
    [[nodiscard]] double gamma() const noexcept { return gamma_; }

private:
    std::vector<double> targets_;
    double margin_;
    double gamma_;
    std::vector<std::vector<double>> history_;
};

// Σ_m w_m·L_m + β·mim over the datasets present in the step. Entries of
// `losses` that are undefined mark datasets absent from the batch.
inline Tensor multitask_step_loss(const std::vector<Tensor>& losses, const std::vector<double>& weights,
                                  const Tensor& mim, double beta) {
    require(losses.size() == weights.size(), ErrorCategory::dimension,
            "multitask_step_loss: " + std::to_string(losses.size()) + " losses for " +
                std::to_string(weights.size()) + " weights");
    Tensor total;
    for (std::size_t m = 0; m < losses.size(); ++m) {
        if (!losses[m].defined()) {
            continue;
        }
        Tensor term = scale(losses[m], weights[m]);
        total = total.defined() ? add(total, term) : term;
    }
    if (mim.defined() && beta != 0.0) {
        Tensor term = scale(mim, beta);
        total = total.defined() ? add(total, term) : term;
    }
    return total.defined() ? total : Tensor::scalar(0.0);
}

}  // namespace clorae
