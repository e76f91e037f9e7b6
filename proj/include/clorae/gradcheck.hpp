// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "clorae/optim.hpp"
#include "clorae/tensor.hpp"

namespace clorae {

struct GradCheckEntry {
    std::string name;
    bool frozen = false;
    double max_relative_error = 0.0;
    double max_abs_analytic = 0.0;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::vector<GradCheckEntry> entries;
};

// Compares reverse-mode gradients against central differences. `loss_fn`
// must rebuild the graph on each call and be deterministic. Frozen entries
// report their analytic gradient (always 0) and are not differenced.
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<Parameter*> params,
                                         double eps = 1e-5) {
    for (auto* p : params) {
        p->tensor.zero_grad();
    }
    backward(loss_fn());

    GradCheckReport report;
    for (auto* p : params) {
        GradCheckEntry entry{p->name, p->frozen, 0.0, 0.0};
        std::vector<double> analytic(p->tensor.size(), 0.0);
        if (p->tensor.has_grad()) {
            std::copy(p->tensor.grad().begin(), p->tensor.grad().end(), analytic.begin());
        }
        for (double a : analytic) {
            entry.max_abs_analytic = std::max(entry.max_abs_analytic, std::abs(a));
        }
        if (!p->frozen) {
            double* w = p->tensor.data();
            for (std::size_t i = 0; i < analytic.size(); ++i) {
                const double saved = w[i];
                w[i] = saved + eps;
                const double up = loss_fn().item();
                w[i] = saved - eps;
                const double down = loss_fn().item();
                w[i] = saved;
                const double numeric = (up - down) / (2.0 * eps);
                const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
                entry.max_relative_error = std::max(entry.max_relative_error, std::abs(analytic[i] - numeric) / denom);
            }
        }
        report.max_relative_error = std::max(report.max_relative_error, entry.max_relative_error);
        report.entries.push_back(std::move(entry));
    }
    for (auto* p : params) {
        p->tensor.zero_grad();
    }
    return report;
}

}  // namespace clorae
