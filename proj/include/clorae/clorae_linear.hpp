// SPDX-License-Identifier: Apache-2.0
//
// Collaborative multi-LoRA layer: a frozen base map W0, one universal LoRA
// expert of rank r shared by all tasks, N task experts of rank r/N each, and
// a per-token two-way gate choosing how much of each expert to mix in.
//
//   U = B_u A_u x          D = B_n A_n x          (g1, g2) = softmax(W_g x)
//   y = W0 x + (alpha / r) (g1 U + g2 D)

#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clorae/lora.hpp"

namespace clorae {

// Accumulates the task-expert gate mass g2 per (layer, task).
class RoutingStats {
public:
    struct Cell {
        double sum = 0.0;
        std::size_t count = 0;
    };

    void record(std::size_t layer_id, std::size_t task_id, std::span<const double> g2) {
        auto& cell = cells_[{layer_id, task_id}];
        for (double g : g2) {
            cell.sum += g;
        }
        cell.count += g2.size();
    }

    void merge(const RoutingStats& other) {
        for (const auto& [key, c] : other.cells_) {
            auto& cell = cells_[key];
            cell.sum += c.sum;
            cell.count += c.count;
        }
    }

    [[nodiscard]] bool empty() const noexcept { return cells_.empty(); }
    [[nodiscard]] const std::map<std::pair<std::size_t, std::size_t>, Cell>& cells() const noexcept { return cells_; }

    // Mean task-specific gate mass for one (layer, task); nullopt if unseen.
    [[nodiscard]] std::optional<double> mean(std::size_t layer_id, std::size_t task_id) const {
        auto it = cells_.find({layer_id, task_id});
        if (it == cells_.end() || it->second.count == 0) {
            return std::nullopt;
        }
        return it->second.sum / static_cast<double>(it->second.count);
    }

private:
    std::map<std::pair<std::size_t, std::size_t>, Cell> cells_;
};

struct LayerGroup {
    std::string name;
    std::vector<std::size_t> layer_ids;
};

struct RoutingEntry {
    std::string group;
    std::size_t task_id = 0;
    double task_proportion = 0.0;       // token-weighted mean of g2
    double universal_proportion = 0.0;  // 1 - task_proportion
    std::size_t tokens = 0;
};

// Token-weighted task-expert proportion per (group, task), in group order
// then task order. Groups or tasks with no recorded tokens are omitted.
inline std::vector<RoutingEntry> routing_report(const RoutingStats& stats, const std::vector<LayerGroup>& groups) {
    require(!stats.empty(), ErrorCategory::contract, "routing_report: no routing statistics were collected");
    std::map<std::size_t, bool> tasks;
    for (const auto& [key, cell] : stats.cells()) {
        tasks[key.second] = true;
    }
    std::vector<RoutingEntry> out;
    for (const auto& group : groups) {
        for (const auto& [task, unused] : tasks) {
            double sum = 0.0;
            std::size_t count = 0;
            for (std::size_t layer : group.layer_ids) {
                auto it = stats.cells().find({layer, task});
                if (it != stats.cells().end()) {
                    sum += it->second.sum;
                    count += it->second.count;
                }
            }
            if (count == 0) {
                continue;
            }
            const double p = sum / static_cast<double>(count);
            out.push_back(RoutingEntry{group.name, task, p, 1.0 - p, count});
        }
    }
    return out;
}

// Bottom / middle / top thirds of an ordered list of layer ids.
inline std::vector<LayerGroup> default_layer_groups(std::size_t n_layers) {
    std::vector<LayerGroup> groups{{"bottom", {}}, {"middle", {}}, {"top", {}}};
    for (std::size_t i = 0; i < n_layers; ++i) {
        groups[std::min<std::size_t>(2, (3 * i) / std::max<std::size_t>(n_layers, 1))].layer_ids.push_back(i);
    }
    std::erase_if(groups, [](const LayerGroup& g) { return g.layer_ids.empty(); });
    return groups;
}

struct CloraeOptions {
    std::size_t rank = 8;
    std::size_t n_tasks = 2;
    double alpha = 8.0;
    double dropout = 0.1;
    bool universal = true;     // false: the "only task experts" ablation
    bool task_experts = true;  // false: the "only universal expert" ablation
    bool learned_gate = true;
    // Used when learned_gate is false: (1, 1) is plain addition U + D.
    double fixed_universal_weight = 1.0;
    double fixed_task_weight = 1.0;
};

class CloraeLinear {
public:
    // `init_seed` keys every random draw of this layer; the universal expert
    // uses the same draw a plain LoRA layer with that seed would.
    CloraeLinear(ParameterStore& store, const std::string& prefix, Tensor w0, std::size_t layer_id,
                 CloraeOptions options, std::uint64_t init_seed)
        : w0_(std::move(w0)), layer_id_(layer_id), opt_(options) {
        require(opt_.rank > 0, ErrorCategory::config, "C-LoRAE rank r must be positive");
        require(opt_.n_tasks > 0, ErrorCategory::config, "C-LoRAE needs at least one task expert slot");
        require(opt_.rank % opt_.n_tasks == 0, ErrorCategory::config,
                "C-LoRAE rank r = " + std::to_string(opt_.rank) + " is not divisible by N = " +
                    std::to_string(opt_.n_tasks));
        require(opt_.alpha > 0.0, ErrorCategory::config, "alpha must be positive");
        require(opt_.universal || opt_.task_experts, ErrorCategory::config,
                "C-LoRAE layer needs the universal expert, the task experts, or both");
        const std::size_t d_in = w0_.cols();
        const std::size_t d_out = w0_.rows();
        if (opt_.universal) {
            universal_ = make_lora_factors(store, prefix + ".universal", d_in, d_out, opt_.rank, opt_.dropout,
                                           derive_seed(init_seed, "lora-shared"));
        }
        if (opt_.task_experts) {
            const std::size_t task_rank = opt_.rank / opt_.n_tasks;
            for (std::size_t n = 0; n < opt_.n_tasks; ++n) {
                experts_.push_back(make_lora_factors(store, prefix + ".task" + std::to_string(n), d_in, d_out,
                                                     task_rank, opt_.dropout,
                                                     derive_seed(init_seed, "task" + std::to_string(n))));
            }
        }
        if (opt_.learned_gate) {
            gate_ = store.constant(prefix + ".gate", 2, d_in, 0.0, false);
        }
    }

    [[nodiscard]] std::size_t d_in() const { return w0_.cols(); }
    [[nodiscard]] std::size_t d_out() const { return w0_.rows(); }
    [[nodiscard]] std::size_t layer_id() const noexcept { return layer_id_; }
    [[nodiscard]] const CloraeOptions& options() const noexcept { return opt_; }
    [[nodiscard]] const std::optional<LoraFactors>& universal() const noexcept { return universal_; }
    [[nodiscard]] const std::vector<LoraFactors>& task_experts() const noexcept { return experts_; }
    [[nodiscard]] const Tensor& gate_weight() const noexcept { return gate_; }
    [[nodiscard]] const Tensor& base_weight() const noexcept { return w0_; }
    [[nodiscard]] double scaling() const { return opt_.alpha / static_cast<double>(opt_.rank); }

    // Universal expert output U for rows of x (x already dropped if wanted).
    [[nodiscard]] Tensor universal_forward(const Tensor& x) const {
        require(universal_.has_value(), ErrorCategory::contract, "layer has no universal expert");
        return lora_delta(x, *universal_);
    }

    // Output D of expert `task_id`; no other expert enters the graph.
    [[nodiscard]] Tensor task_forward(const Tensor& x, std::size_t task_id) const {
        require(!experts_.empty(), ErrorCategory::contract, "layer has no task experts");
        require(task_id < experts_.size(), ErrorCategory::contract,
                "task id " + std::to_string(task_id) + " out of range for N = " + std::to_string(experts_.size()));
        return lora_delta(x, experts_[task_id]);
    }

    // Row-wise softmax(W_g x): column 0 weights U, column 1 weights D.
    [[nodiscard]] Tensor gate_route(const Tensor& x) const {
        require(gate_.defined(), ErrorCategory::contract, "layer has a fixed gate");
        require(x.cols() == d_in(), ErrorCategory::dimension,
                "gate_route: input " + x.shape_str() + " for gate " + gate_.shape_str());
        return softmax(matmul_nt(x, gate_), 1);
    }

    [[nodiscard]] Tensor forward(const Tensor& x, std::size_t task_id, const ForwardContext& ctx) const {
        require(x.cols() == d_in(), ErrorCategory::dimension,
                "C-LoRAE forward: input " + x.shape_str() + " for W0 " + w0_.shape_str());
        if (!experts_.empty()) {
            require(task_id < experts_.size(), ErrorCategory::contract,
                    "task id " + std::to_string(task_id) + " out of range for N = " + std::to_string(experts_.size()));
        }
        Tensor base = matmul_nt(x, w0_);
        const Tensor xd = dropout_for(x, opt_.dropout, ctx);
        Tensor u = universal_ ? lora_delta(xd, *universal_) : Tensor{};
        Tensor d = experts_.empty() ? Tensor{} : lora_delta(xd, experts_[task_id]);

        Tensor h;
        if (opt_.learned_gate) {
            const Tensor g = gate_route(x);
            if (ctx.routing != nullptr) {
                std::vector<double> g2(g.rows());
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    g2[i] = g(i, 1);
                }
                ctx.routing->record(layer_id_, task_id, g2);
            }
            Tensor hu = u.defined() ? mul_col(u, column(g, 0)) : Tensor{};
            Tensor hd = d.defined() ? mul_col(d, column(g, 1)) : Tensor{};
            h = combine(hu, hd);
        } else {
            h = combine(weighted(u, opt_.fixed_universal_weight), weighted(d, opt_.fixed_task_weight));
        }
        if (ctx.captures != nullptr && u.defined() && d.defined()) {
            ctx.captures->push_back(ExpertCapture{layer_id_, u, d});
        }
        if (!h.defined()) {
            return base;
        }
        return add(base, scale(h, scaling()));
    }

    [[nodiscard]] TrainableCount count_trainable() const {
        TrainableCount c;
        if (universal_) {
            c.universal = universal_->parameter_count();
        }
        for (const auto& e : experts_) {
            c.task_experts += e.parameter_count();
        }
        if (gate_.defined()) {
            c.gate = gate_.size();
        }
        return c;
    }

private:
    static Tensor weighted(const Tensor& t, double w) {
        if (!t.defined() || w == 0.0) {
            return Tensor{};
        }
        return w == 1.0 ? t : scale(t, w);
    }

    static Tensor combine(const Tensor& a, const Tensor& b) {
        if (a.defined() && b.defined()) {
            return add(a, b);
        }
        return a.defined() ? a : b;
    }

    Tensor w0_;
    std::size_t layer_id_;
    CloraeOptions opt_;
    std::optional<LoraFactors> universal_;
    std::vector<LoraFactors> experts_;
    Tensor gate_;
};

// Closed-form trainable counts for one wrapped [d_out x d_in] layer.
[[nodiscard]] inline TrainableCount closed_form_count(std::size_t d_in, std::size_t d_out, std::size_t rank,
                                                      std::size_t n_tasks, bool universal = true,
                                                      bool task_experts = true, bool learned_gate = true) {
    TrainableCount c;
    if (universal) {
        c.universal = rank * (d_in + d_out);
    }
    if (task_experts) {
        c.task_experts = n_tasks * (rank / n_tasks) * (d_in + d_out);
    }
    if (learned_gate) {
        c.gate = 2 * d_in;
    }
    return c;
}

}  // namespace clorae
