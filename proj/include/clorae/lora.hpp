// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "clorae/errors.hpp"
#include "clorae/ops.hpp"
#include "clorae/optim.hpp"
#include "clorae/random.hpp"

namespace clorae {

struct ExpertCapture {
    std::size_t layer_id = 0;
    Tensor universal;  // U for the tokens of this call
    Tensor task;       // D for the same tokens
};

class RoutingStats;

// Per-call switches threaded through every adapted layer.
struct ForwardContext {
    bool training = false;
    Rng* dropout_rng = nullptr;
    RoutingStats* routing = nullptr;
    std::vector<ExpertCapture>* captures = nullptr;
};

// Trainable-parameter tally. Plain LoRA layers report their factors under
// `universal`, since the universal expert is a plain LoRA pair.
struct TrainableCount {
    std::size_t universal = 0;
    std::size_t task_experts = 0;
    std::size_t gate = 0;
    std::size_t mim_heads = 0;
    std::size_t embeddings = 0;

    [[nodiscard]] std::size_t lora_matrices() const noexcept { return universal + task_experts; }
    [[nodiscard]] std::size_t total() const noexcept { return universal + task_experts + gate + mim_heads + embeddings; }

    TrainableCount& operator+=(const TrainableCount& o) noexcept {
        universal += o.universal;
        task_experts += o.task_experts;
        gate += o.gate;
        mim_heads += o.mim_heads;
        embeddings += o.embeddings;
        return *this;
    }
    bool operator==(const TrainableCount&) const = default;
};

// One low-rank pair: A is [rank x d_in], B is [d_out x rank].
struct LoraFactors {
    Tensor A;
    Tensor B;
    std::size_t rank = 0;
    double dropout_p = 0.0;

    [[nodiscard]] std::size_t d_in() const { return A.cols(); }
    [[nodiscard]] std::size_t d_out() const { return B.rows(); }
    [[nodiscard]] std::size_t parameter_count() const { return A.size() + B.size(); }
};

// Registers A ~ N(0, 1/rank) and B = 0 under `prefix`. The draw for A comes
// from `init_seed` alone, so it does not depend on registration order.
inline LoraFactors make_lora_factors(ParameterStore& store, const std::string& prefix, std::size_t d_in,
                                     std::size_t d_out, std::size_t rank, double dropout_p, std::uint64_t init_seed) {
    require(rank > 0, ErrorCategory::config, "LoRA rank must be positive");
    require(rank <= std::min(d_in, d_out), ErrorCategory::config,
            "LoRA rank " + std::to_string(rank) + " exceeds min(d_in, d_out) = " + std::to_string(std::min(d_in, d_out)));
    require(dropout_p >= 0.0 && dropout_p < 1.0, ErrorCategory::config, "LoRA dropout must lie in [0, 1)");
    Rng rng(init_seed);
    LoraFactors f;
    f.A = store.gaussian(prefix + ".A", rank, d_in, 1.0 / std::sqrt(static_cast<double>(rank)), rng, false);
    f.B = store.constant(prefix + ".B", d_out, rank, 0.0, false);
    f.rank = rank;
    f.dropout_p = dropout_p;
    return f;
}

// B·(A·x) for every row x of `x`. Dropout, when wanted, is applied by the
// caller so that sibling experts can share one mask.
inline Tensor lora_delta(const Tensor& x, const LoraFactors& f) {
    require(x.cols() == f.d_in(), ErrorCategory::dimension,
            "lora_delta: input " + x.shape_str() + " does not match A " + f.A.shape_str());
    return matmul_nt(matmul_nt(x, f.A), f.B);
}

inline Tensor dropout_for(const Tensor& x, double p, const ForwardContext& ctx) {
    if (!ctx.training || p == 0.0) {
        return x;
    }
    require(ctx.dropout_rng != nullptr, ErrorCategory::contract, "training with dropout needs a dropout generator");
    return dropout(x, p, *ctx.dropout_rng, true);
}

// Frozen W0 plus one LoRA pair: y = W0·x + (alpha/r)·B·A·x.
class LoraLinear {
public:
    LoraLinear(Tensor w0, LoraFactors factors, double alpha) : w0_(std::move(w0)), f_(std::move(factors)), alpha_(alpha) {
        require(alpha > 0.0, ErrorCategory::config, "alpha must be positive");
        require(w0_.cols() == f_.d_in() && w0_.rows() == f_.d_out(), ErrorCategory::dimension,
                "LoraLinear: W0 " + w0_.shape_str() + " does not match factors");
    }

    [[nodiscard]] Tensor forward(const Tensor& x, const ForwardContext& ctx) const {
        Tensor base = matmul_nt(x, w0_);
        Tensor delta = lora_delta(dropout_for(x, f_.dropout_p, ctx), f_);
        return add(base, scale(delta, alpha_ / static_cast<double>(f_.rank)));
    }

    [[nodiscard]] TrainableCount count_trainable() const {
        TrainableCount c;
        c.universal = f_.parameter_count();
        return c;
    }

    [[nodiscard]] const LoraFactors& factors() const noexcept { return f_; }
    [[nodiscard]] const Tensor& base_weight() const noexcept { return w0_; }

private:
    Tensor w0_;
    LoraFactors f_;
    double alpha_;
};

}  // namespace clorae
