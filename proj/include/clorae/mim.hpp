// SPDX-License-Identifier: Apache-2.0
//
// Variational mutual-information term between task-expert outputs D and
// universal-expert outputs U. A Gaussian predictor q(U | D) with learned
// mean map and per-channel variance gives the lower bound
//   I(U; D) >= H(U) + E[log q(U | D)],
// so minimizing the negative log-likelihood below maximizes the bound.
// U acts as the teacher and is detached.

#pragma once

#include <cmath>
#include <string>

#include "clorae/ops.hpp"
#include "clorae/optim.hpp"

namespace clorae {

struct VidHead {
    Tensor weight;   // [d x d] mean map
    Tensor bias;     // [1 x d]
    Tensor log_var;  // [1 x d] pre-softplus variance

    [[nodiscard]] std::size_t parameter_count() const { return weight.size() + bias.size() + log_var.size(); }
};

// softplus(x) == 1
inline const double kUnitVariancePreactivation = std::log(std::exp(1.0) - 1.0);

inline VidHead make_vid_head(ParameterStore& store, const std::string& prefix, std::size_t d, std::uint64_t init_seed) {
    Rng rng(init_seed);
    VidHead h;
    h.weight = store.gaussian(prefix + ".weight", d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng, false);
    h.bias = store.constant(prefix + ".bias", 1, d, 0.0, false);
    h.log_var = store.constant(prefix + ".log_var", 1, d, kUnitVariancePreactivation, false);
    return h;
}

// Mean over tokens and channels of  ½·log σ² + (U − μ(D))² / (2σ²).
inline Tensor mim_loss(const Tensor& task_out, const Tensor& universal_out, const VidHead& head) {
    require(task_out.rows() == universal_out.rows() && task_out.cols() == universal_out.cols(),
            ErrorCategory::dimension,
            "mim_loss: D " + task_out.shape_str() + " vs U " + universal_out.shape_str());
    require(head.weight.cols() == task_out.cols(), ErrorCategory::dimension,
            "mim_loss: head width " + head.weight.shape_str() + " for D " + task_out.shape_str());
    const Tensor mu = add_row(matmul_nt(task_out, head.weight), head.bias);
    const Tensor diff = sub(detach(universal_out), mu);
    const Tensor var = softplus(head.log_var);
    const Tensor fit = mean(mul_row(square(diff), scale(reciprocal(var), 0.5)));
    return add(fit, scale(mean(log(var)), 0.5));
}

}  // namespace clorae
