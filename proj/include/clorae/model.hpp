// SPDX-License-Identifier: Apache-2.0
//
// Tiny pre-LN encoder-decoder. The encoder reads the sample's visual vectors
// followed by the embedded instruction and text tokens; the decoder emits
// the answer tokens. Every base weight is random and frozen; selected
// projections are wrapped by a plain LoRA or a C-LoRAE adapter.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "clorae/achievement.hpp"
#include "clorae/clorae_linear.hpp"
#include "clorae/lora.hpp"
#include "clorae/mim.hpp"
#include "clorae/ops.hpp"
#include "clorae/optim.hpp"
#include "clorae/taskgen.hpp"

namespace clorae {

enum class AdapterKind { none, lora, clorae };

inline std::string adapter_name(AdapterKind k) {
    switch (k) {
    case AdapterKind::none: return "none";
    case AdapterKind::lora: return "lora";
    default: return "clorae";
    }
}

inline AdapterKind parse_adapter(const std::string& s) {
    if (s == "none") return AdapterKind::none;
    if (s == "lora") return AdapterKind::lora;
    require(s == "clorae", ErrorCategory::config, "unknown adapter kind '" + s + "' (none, lora, clorae)");
    return AdapterKind::clorae;
}

inline const std::vector<std::string>& projection_kinds() {
    static const std::vector<std::string> kinds{"q", "k", "v", "o", "ff1", "ff2"};
    return kinds;
}

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    std::size_t d_ff = 128;
    std::size_t max_length = 64;         // visual + instruction + text positions
    std::size_t max_answer_length = 16;  // answer tokens, excluding <eos>
    AdapterKind adapter = AdapterKind::clorae;
    std::size_t rank = 12;
    std::size_t n_tasks = 3;
    double alpha = 12.0;
    double dropout = 0.1;
    std::vector<std::string> wrapped{"q", "v"};
    bool universal = true;
    bool task_experts = true;
    bool learned_gate = true;
    double fixed_universal_weight = 1.0;
    double fixed_task_weight = 1.0;
    bool mim_heads = true;
    bool tune_embeddings = true;
    std::uint64_t seed = 1;

    void validate() const {
        require(vocab_size > 3, ErrorCategory::config, "vocabulary size must exceed the special tokens");
        require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, ErrorCategory::config,
                "d_model = " + std::to_string(d_model) + " must be divisible by n_heads = " + std::to_string(n_heads));
        require(encoder_layers > 0 && decoder_layers > 0 && d_ff > 0, ErrorCategory::config,
                "layer counts and d_ff must be positive");
        require(max_length > 0, ErrorCategory::config, "max_length must be positive");
        for (const auto& w : wrapped) {
            require(std::find(projection_kinds().begin(), projection_kinds().end(), w) != projection_kinds().end(),
                    ErrorCategory::config, "unknown wrapped projection '" + w + "' (q, k, v, o, ff1, ff2)");
        }
        if (adapter == AdapterKind::clorae) {
            require(rank > 0 && n_tasks > 0 && rank % n_tasks == 0, ErrorCategory::config,
                    "rank r = " + std::to_string(rank) + " must be a positive multiple of N = " +
                        std::to_string(n_tasks));
        }
    }
};

// A sample mapped to vocabulary ids, ready for the network.
struct EncodedSample {
    std::size_t task = 0;
    std::size_t dataset = 0;
    std::vector<std::int64_t> tokens;  // instruction then text
    std::vector<double> visual;        // visual_rows x d, row-major
    std::size_t visual_rows = 0;
    std::vector<std::int64_t> answer;  // without <eos>
    std::size_t index = 0;             // position in its source list

    [[nodiscard]] std::size_t encoder_length() const { return visual_rows + tokens.size(); }
};

inline EncodedSample encode_sample(const TaskSample& s, const Vocabulary& vocab, std::size_t dataset,
                                   std::size_t d_model, std::size_t index = 0) {
    EncodedSample e;
    e.task = s.task;
    e.dataset = dataset;
    e.index = index;
    for (const auto& t : s.instruction) e.tokens.push_back(vocab.id(t));
    for (const auto& t : s.text) e.tokens.push_back(vocab.id(t));
    for (const auto& t : s.answer) e.answer.push_back(vocab.id(t));
    e.visual_rows = s.visual.size();
    for (const auto& v : s.visual) {
        require(v.size() == d_model, ErrorCategory::data,
                "sample " + s.id + " has visual width " + std::to_string(v.size()) + ", model width is " +
                    std::to_string(d_model));
        e.visual.insert(e.visual.end(), v.begin(), v.end());
    }
    return e;
}

using SampleGroup = std::vector<const EncodedSample*>;

// One frozen projection with an optional adapter around it.
class Projection {
public:
    Projection(ParameterStore& store, const ModelConfig& cfg, const std::string& name, std::size_t d_out,
               std::size_t d_in, std::optional<std::size_t> layer_id)
        : name_(name) {
        Rng rng(derive_seed(cfg.seed, "base:" + name));
        w0_ = store.gaussian(name + ".base", d_out, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng, true);
        if (!layer_id) {
            return;
        }
        layer_id_ = *layer_id;
        const std::uint64_t seed = derive_seed(cfg.seed, "adapter:" + name);
        if (cfg.adapter == AdapterKind::lora) {
            lora_.emplace(w0_,
                          make_lora_factors(store, name + ".lora", d_in, d_out, cfg.rank, cfg.dropout,
                                            derive_seed(seed, "lora-shared")),
                          cfg.alpha);
        } else if (cfg.adapter == AdapterKind::clorae) {
            CloraeOptions o;
            o.rank = cfg.rank;
            o.n_tasks = cfg.n_tasks;
            o.alpha = cfg.alpha;
            o.dropout = cfg.dropout;
            o.universal = cfg.universal;
            o.task_experts = cfg.task_experts;
            o.learned_gate = cfg.learned_gate;
            o.fixed_universal_weight = cfg.fixed_universal_weight;
            o.fixed_task_weight = cfg.fixed_task_weight;
            clorae_.emplace(store, name, w0_, *layer_id, o, seed);
            if (cfg.mim_heads && cfg.universal && cfg.task_experts) {
                head_ = make_vid_head(store, name + ".mim", d_out, derive_seed(cfg.seed, "mim:" + name));
            }
        }
    }

    [[nodiscard]] Tensor forward(const Tensor& x, std::size_t task, const ForwardContext& ctx) const {
        if (lora_) return lora_->forward(x, ctx);
        if (clorae_) return clorae_->forward(x, task, ctx);
        return matmul_nt(x, w0_);
    }

    [[nodiscard]] TrainableCount count_trainable() const {
        TrainableCount c;
        if (lora_) c += lora_->count_trainable();
        if (clorae_) c += clorae_->count_trainable();
        if (head_) c.mim_heads = head_->parameter_count();
        return c;
    }

    [[nodiscard]] const std::string& name() const noexcept { return name_; }
    [[nodiscard]] bool wrapped() const noexcept { return lora_.has_value() || clorae_.has_value(); }
    [[nodiscard]] std::size_t layer_id() const noexcept { return layer_id_; }
    [[nodiscard]] const std::optional<CloraeLinear>& clorae() const noexcept { return clorae_; }
    [[nodiscard]] const std::optional<LoraLinear>& lora() const noexcept { return lora_; }
    [[nodiscard]] const std::optional<VidHead>& mim_head() const noexcept { return head_; }
    [[nodiscard]] const Tensor& base() const noexcept { return w0_; }

private:
    std::string name_;
    Tensor w0_;
    std::size_t layer_id_ = 0;
    std::optional<LoraLinear> lora_;
    std::optional<CloraeLinear> clorae_;
    std::optional<VidHead> head_;
};

struct ForwardOutput {
    std::vector<Tensor> dataset_losses;  // undefined where a dataset is absent
    std::vector<std::size_t> dataset_tokens;
    Tensor mim;  // undefined without MIM heads
};

class Seq2Seq {
public:
    explicit Seq2Seq(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const std::size_t d = cfg_.d_model;
        const bool frozen_io = !cfg_.tune_embeddings;
        {
            Rng rng(derive_seed(cfg_.seed, "embedding"));
            embedding_ = store_.gaussian("embedding", cfg_.vocab_size, d, 1.0, rng, frozen_io);
        }
        {
            Rng rng(derive_seed(cfg_.seed, "output"));
            output_ = store_.gaussian("output", cfg_.vocab_size, d, 1.0 / static_cast<double>(d), rng, frozen_io);
        }
        for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
            const std::string p = "enc." + std::to_string(l);
            encoder_.push_back(Block{attention_block(p + ".self"), std::nullopt, ffn(p)});
        }
        for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) {
            const std::string p = "dec." + std::to_string(l);
            auto self = attention_block(p + ".self");
            auto cross = attention_block(p + ".cross");
            decoder_.push_back(Block{std::move(self), std::move(cross), ffn(p)});
        }
        collect_wrapped();
        const std::size_t positions = std::max(cfg_.max_length, cfg_.max_answer_length + 1);
        positional_.assign(positions * d, 0.0);
        for (std::size_t pos = 0; pos < positions; ++pos) {
            for (std::size_t i = 0; i < d; i += 2) {
                const double angle =
                    static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
                positional_[pos * d + i] = std::sin(angle);
                if (i + 1 < d) positional_[pos * d + i + 1] = std::cos(angle);
            }
        }
    }

    Seq2Seq(const Seq2Seq&) = delete;
    Seq2Seq& operator=(const Seq2Seq&) = delete;

    [[nodiscard]] const ModelConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] ParameterStore& parameters() noexcept { return store_; }
    [[nodiscard]] const ParameterStore& parameters() const noexcept { return store_; }
    [[nodiscard]] std::size_t wrapped_count() const noexcept { return wrapped_.size(); }
    [[nodiscard]] std::vector<std::string> wrapped_names() const {
        std::vector<std::string> out;
        for (const auto* p : wrapped_) out.push_back(p->name());
        return out;
    }
    [[nodiscard]] std::vector<const Projection*> wrapped_projections() const {
        return {wrapped_.begin(), wrapped_.end()};
    }

    [[nodiscard]] TrainableCount count_trainable() const {
        TrainableCount c;
        for (const auto* p : wrapped_) c += p->count_trainable();
        if (cfg_.tune_embeddings) c.embeddings = embedding_.size() + output_.size();
        return c;
    }

    // Checks that every sample of `group` fits and shares one shape and task.
    void check_group(const SampleGroup& group) const {
        require(!group.empty(), ErrorCategory::contract, "empty forward group");
        const auto* first = group.front();
        for (const auto* s : group) {
            require(s->task == first->task, ErrorCategory::contract, "forward group mixes task ids");
            require(s->tokens.size() == first->tokens.size() && s->visual_rows == first->visual_rows &&
                        s->answer.size() == first->answer.size(),
                    ErrorCategory::contract, "forward group mixes sequence shapes");
            require(s->encoder_length() <= cfg_.max_length, ErrorCategory::data,
                    "sample input of length " + std::to_string(s->encoder_length()) + " exceeds max_length " +
                        std::to_string(cfg_.max_length));
            require(s->answer.size() <= cfg_.max_answer_length, ErrorCategory::data,
                    "answer of length " + std::to_string(s->answer.size()) + " exceeds max_answer_length " +
                        std::to_string(cfg_.max_answer_length));
            require(s->encoder_length() > 0, ErrorCategory::data, "sample with empty input");
            require(s->visual.size() == s->visual_rows * cfg_.d_model, ErrorCategory::data,
                    "visual rows do not match the model width");
        }
        if (cfg_.adapter == AdapterKind::clorae && cfg_.task_experts) {
            require(first->task < cfg_.n_tasks, ErrorCategory::config,
                    "task id " + std::to_string(first->task) + " out of range for N = " + std::to_string(cfg_.n_tasks));
        }
    }

    [[nodiscard]] Tensor encode(const SampleGroup& group, const ForwardContext& ctx) const {
        const std::size_t g = group.size();
        const std::size_t tv = group.front()->visual_rows;
        const std::size_t tt = group.front()->tokens.size();
        const std::size_t te = tv + tt;
        const std::size_t task = group.front()->task;
        std::vector<std::int64_t> ids;
        ids.reserve(g * tt);
        for (const auto* s : group) ids.insert(ids.end(), s->tokens.begin(), s->tokens.end());
        Tensor x;
        if (tt > 0) {
            x = embedding(embedding_, ids);
        }
        if (tv > 0) {
            std::vector<double> vis;
            vis.reserve(g * tv * cfg_.d_model);
            for (const auto* s : group) vis.insert(vis.end(), s->visual.begin(), s->visual.end());
            Tensor visual(g * tv, cfg_.d_model, std::move(vis));
            if (!x.defined()) {
                x = visual;
            } else {
                // Row order becomes [visual_b, tokens_b] for each sample b.
                std::vector<std::size_t> order;
                order.reserve(g * te);
                for (std::size_t b = 0; b < g; ++b) {
                    for (std::size_t i = 0; i < tv; ++i) order.push_back(b * tv + i);
                    for (std::size_t i = 0; i < tt; ++i) order.push_back(g * tv + b * tt + i);
                }
                x = gather_rows(concat_rows({visual, x}), order);
            }
        }
        x = add(x, positions(g, te, 0));
        for (const auto& blk : encoder_) {
            x = self_attention(blk.self, x, g, task, false, ctx);
            x = feed_forward(blk.ffn, x, task, ctx);
        }
        return layer_norm(x);
    }

    // Decoder logits for input ids laid out [g x t] row-major.
    [[nodiscard]] Tensor decode(const Tensor& memory, std::span<const std::int64_t> ids, std::size_t g,
                                std::size_t task, const ForwardContext& ctx) const {
        const std::size_t t = ids.size() / g;
        Tensor y = add(embedding(embedding_, ids), positions(g, t, 0));
        for (const auto& blk : decoder_) {
            y = self_attention(blk.self, y, g, task, true, ctx);
            const Tensor h = layer_norm(y);
            const Tensor q = blk.cross->q.forward(h, task, ctx);
            const Tensor k = blk.cross->k.forward(memory, task, ctx);
            const Tensor v = blk.cross->v.forward(memory, task, ctx);
            y = add(y, blk.cross->o.forward(attention(q, k, v, g, cfg_.n_heads, false), task, ctx));
            y = feed_forward(blk.ffn, y, task, ctx);
        }
        return matmul_nt(layer_norm(y), output_);
    }

    // Teacher-forced logits [g*(answer+1) x vocab] with targets answer + <eos>.
    [[nodiscard]] Tensor forward_logits(const SampleGroup& group, const ForwardContext& ctx,
                                        std::vector<std::int64_t>* targets = nullptr) const {
        check_group(group);
        const Tensor memory = encode(group, ctx);
        std::vector<std::int64_t> in;
        for (const auto* s : group) {
            in.push_back(kBos);
            in.insert(in.end(), s->answer.begin(), s->answer.end());
            if (targets != nullptr) {
                targets->insert(targets->end(), s->answer.begin(), s->answer.end());
                targets->push_back(kEos);
            }
        }
        return decode(memory, in, group.size(), group.front()->task, ctx);
    }

    // Per-dataset mean token cross-entropy over every group, plus the MIM term
    // averaged over all wrapped-layer calls.
    [[nodiscard]] ForwardOutput forward_loss(const std::vector<SampleGroup>& groups, std::size_t n_datasets,
                                             const ForwardContext& base_ctx) const {
        ForwardOutput out;
        out.dataset_losses.resize(n_datasets);
        out.dataset_tokens.assign(n_datasets, 0);
        std::vector<std::vector<Tensor>> logits(n_datasets);
        std::vector<std::vector<std::int64_t>> targets(n_datasets);
        std::vector<ExpertCapture> captures;
        ForwardContext ctx = base_ctx;
        const bool want_mim = has_mim_heads();
        ctx.captures = want_mim ? &captures : nullptr;
        for (const auto& group : groups) {
            const std::size_t ds = group.front()->dataset;
            require(ds < n_datasets, ErrorCategory::contract, "dataset index out of range");
            logits[ds].push_back(forward_logits(group, ctx, &targets[ds]));
        }
        for (std::size_t m = 0; m < n_datasets; ++m) {
            if (logits[m].empty()) continue;
            const Tensor all = logits[m].size() == 1 ? logits[m].front() : concat_rows(logits[m]);
            out.dataset_losses[m] = cross_entropy(all, targets[m]);
            out.dataset_tokens[m] = targets[m].size();
        }
        if (want_mim && !captures.empty()) {
            Tensor total;
            for (const auto& c : captures) {
                const Tensor term = mim_loss(c.task, c.universal, *wrapped_[c.layer_id]->mim_head());
                total = total.defined() ? add(total, term) : term;
            }
            out.mim = scale(total, 1.0 / static_cast<double>(captures.size()));
        }
        return out;
    }

    [[nodiscard]] bool has_mim_heads() const {
        return std::any_of(wrapped_.begin(), wrapped_.end(), [](const Projection* p) { return p->mim_head().has_value(); });
    }

    // Greedy decoding for a task-homogeneous group; stops at <eos> or the cap.
    [[nodiscard]] std::vector<std::vector<std::int64_t>> decode_greedy(const SampleGroup& group,
                                                                       std::optional<std::size_t> cap = {}) const {
        const std::size_t limit = cap.value_or(cfg_.max_answer_length);
        require(limit <= cfg_.max_answer_length, ErrorCategory::config, "decode cap exceeds max_answer_length");
        std::vector<std::vector<std::int64_t>> out(group.size());
        if (limit == 0 || group.empty()) return out;
        NoGradGuard no_grad;
        SampleGroup shaped;
        std::vector<EncodedSample> stripped;
        stripped.reserve(group.size());
        for (const auto* s : group) {
            EncodedSample e = *s;
            e.answer.clear();
            stripped.push_back(std::move(e));
        }
        for (const auto& e : stripped) shaped.push_back(&e);
        check_group(shaped);
        const ForwardContext ctx{};
        const std::size_t g = group.size();
        const std::size_t task = group.front()->task;
        const Tensor memory = encode(shaped, ctx);
        std::vector<bool> done(g, false);
        std::vector<std::int64_t> prefix(g, kBos);
        std::size_t t = 1;
        for (std::size_t step = 0; step < limit; ++step) {
            const Tensor logits = decode(memory, prefix, g, task, ctx);
            std::vector<std::int64_t> next(g);
            for (std::size_t b = 0; b < g; ++b) {
                const double* row = logits.data() + ((b + 1) * t - 1) * cfg_.vocab_size;
                next[b] = static_cast<std::int64_t>(std::max_element(row, row + cfg_.vocab_size) - row);
                if (!done[b]) {
                    if (next[b] == kEos) {
                        done[b] = true;
                    } else {
                        out[b].push_back(next[b]);
                    }
                }
            }
            if (std::all_of(done.begin(), done.end(), [](bool x) { return x; })) break;
            std::vector<std::int64_t> grown;
            grown.reserve(g * (t + 1));
            for (std::size_t b = 0; b < g; ++b) {
                grown.insert(grown.end(), prefix.begin() + static_cast<std::ptrdiff_t>(b * t),
                             prefix.begin() + static_cast<std::ptrdiff_t>((b + 1) * t));
                grown.push_back(next[b]);
            }
            prefix = std::move(grown);
            ++t;
        }
        return out;
    }

    static constexpr std::int64_t kBos = 1;
    static constexpr std::int64_t kEos = 2;

private:
    struct Attention {
        Projection q, k, v, o;
    };
    struct FeedForward {
        Projection ff1, ff2;
    };
    struct Block {
        Attention self;
        std::optional<Attention> cross;
        FeedForward ffn;
    };

    Projection make_projection(const std::string& name, const std::string& kind, std::size_t d_out, std::size_t d_in) {
        std::optional<std::size_t> id;
        const bool wrap = cfg_.adapter != AdapterKind::none &&
                          std::find(cfg_.wrapped.begin(), cfg_.wrapped.end(), kind) != cfg_.wrapped.end();
        if (wrap) id = next_layer_id_++;
        return Projection(store_, cfg_, name, d_out, d_in, id);
    }

    Attention attention_block(const std::string& p) {
        const std::size_t d = cfg_.d_model;
        Attention a{make_projection(p + ".q", "q", d, d), make_projection(p + ".k", "k", d, d),
                    make_projection(p + ".v", "v", d, d), make_projection(p + ".o", "o", d, d)};
        return a;
    }

    FeedForward ffn(const std::string& p) {
        return FeedForward{make_projection(p + ".ff1", "ff1", cfg_.d_ff, cfg_.d_model),
                           make_projection(p + ".ff2", "ff2", cfg_.d_model, cfg_.d_ff)};
    }

    [[nodiscard]] Tensor positions(std::size_t g, std::size_t t, std::size_t start) const {
        const std::size_t d = cfg_.d_model;
        std::vector<double> v(g * t * d);
        for (std::size_t b = 0; b < g; ++b) {
            std::copy_n(positional_.begin() + static_cast<std::ptrdiff_t>(start * d), t * d,
                        v.begin() + static_cast<std::ptrdiff_t>(b * t * d));
        }
        return Tensor(g * t, d, std::move(v));
    }

    [[nodiscard]] Tensor self_attention(const Attention& a, const Tensor& x, std::size_t g, std::size_t task,
                                        bool causal, const ForwardContext& ctx) const {
        const Tensor h = layer_norm(x);
        const Tensor q = a.q.forward(h, task, ctx);
        const Tensor k = a.k.forward(h, task, ctx);
        const Tensor v = a.v.forward(h, task, ctx);
        return add(x, a.o.forward(attention(q, k, v, g, cfg_.n_heads, causal), task, ctx));
    }

    [[nodiscard]] Tensor feed_forward(const FeedForward& f, const Tensor& x, std::size_t task,
                                      const ForwardContext& ctx) const {
        const Tensor h = relu(f.ff1.forward(layer_norm(x), task, ctx));
        return add(x, f.ff2.forward(h, task, ctx));
    }

    void collect_wrapped() {
        auto visit = [&](const Projection& p) {
            if (p.wrapped()) wrapped_.push_back(&p);
        };
        auto visit_attention = [&](const Attention& a) {
            visit(a.q);
            visit(a.k);
            visit(a.v);
            visit(a.o);
        };
        for (const auto* blocks : {&encoder_, &decoder_}) {
            for (const auto& blk : *blocks) {
                visit_attention(blk.self);
                if (blk.cross) visit_attention(*blk.cross);
                visit(blk.ffn.ff1);
                visit(blk.ffn.ff2);
            }
        }
        for (std::size_t i = 0; i < wrapped_.size(); ++i) {
            require(wrapped_[i]->layer_id() == i, ErrorCategory::contract, "wrapped layer ids out of order");
        }
    }

    ModelConfig cfg_;
    ParameterStore store_;
    Tensor embedding_;
    Tensor output_;
    std::vector<Block> encoder_;
    std::vector<Block> decoder_;
    std::vector<double> positional_;
    std::size_t next_layer_id_ = 0;
    std::vector<const Projection*> wrapped_;
};

}  // namespace clorae
