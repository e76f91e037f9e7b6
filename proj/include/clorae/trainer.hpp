// SPDX-License-Identifier: Apache-2.0
//
// Training, evaluation, ablation and routing runs over a suite of datasets.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clorae/achievement.hpp"
#include "clorae/checkpoint.hpp"
#include "clorae/model.hpp"
#include "clorae/taskgen.hpp"

namespace clorae {

inline constexpr std::string_view kSuiteSchema = "clorae-suite/1";

// ---------------------------------------------------------------------------
// Data

struct DatasetData {
    std::string name;
    std::size_t task = 0;
    std::vector<TaskSample> train;
    std::vector<TaskSample> dev;
    std::vector<TaskSample> test;

    [[nodiscard]] const std::vector<TaskSample>& split(std::string_view s) const {
        if (s == "train") return train;
        if (s == "dev") return dev;
        require(s == "test", ErrorCategory::config, "unknown split '" + std::string(s) + "' (train, dev, test)");
        return test;
    }
};

struct TaskData {
    Vocabulary vocab;
    std::vector<DatasetData> datasets;
    std::optional<GeneratorTables> tables;
};

inline TaskData task_data_from_suite(const GeneratedSuite& suite) {
    TaskData d;
    d.vocab = suite.vocab;
    d.tables = suite.tables;
    for (const auto& s : suite.datasets) {
        d.datasets.push_back(DatasetData{s.spec.name, s.spec.task, s.train, s.dev, s.test});
    }
    return d;
}

inline nlohmann::json generator_spec_to_json(const GeneratorSpec& g) {
    nlohmann::json ds = nlohmann::json::array();
    for (const auto& d : g.datasets) {
        ds.push_back({{"name", d.name}, {"task", d.task}, {"train", d.train}, {"dev", d.dev}, {"test", d.test}});
    }
    return {{"seed", g.seed},
            {"datasets", ds},
            {"n_words", g.n_words},
            {"n_fillers", g.n_fillers},
            {"n_labels", g.n_labels},
            {"n_roles", g.n_roles},
            {"n_phrasings", g.n_phrasings},
            {"text_length", g.text_length},
            {"d_visual", g.d_visual},
            {"conflict_rate", g.conflict_rate},
            {"visual_dependence", g.visual_dependence},
            {"visual_noise", g.visual_noise}};
}

inline void write_suite(const std::filesystem::path& dir, const GeneratedSuite& suite) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, ErrorCategory::io, "cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json manifest;
    manifest["schema"] = kSuiteSchema;
    manifest["generator"] = generator_spec_to_json(suite.spec);
    manifest["vocab"] = suite.vocab.tokens();
    manifest["tables"] = tables_to_json(suite.tables);
    nlohmann::json ds = nlohmann::json::array();
    for (const auto& s : suite.datasets) {
        ds.push_back({{"name", s.spec.name}, {"task", s.spec.task}});
        for (std::string_view split : {"train", "dev", "test"}) {
            const auto path = dir / (s.spec.name + "." + std::string(split) + ".jsonl");
            std::ofstream os(path, std::ios::binary | std::ios::trunc);
            require(static_cast<bool>(os), ErrorCategory::io, "cannot write " + path.string());
            write_jsonl(os, s.split(split));
        }
    }
    manifest["datasets"] = ds;
    std::ofstream os(dir / "suite.json", std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), ErrorCategory::io, "cannot write " + (dir / "suite.json").string());
    os << manifest.dump(1) << '\n';
}

inline TaskData load_suite(const std::filesystem::path& dir) {
    std::ifstream is(dir / "suite.json");
    require(static_cast<bool>(is), ErrorCategory::io, "cannot open " + (dir / "suite.json").string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCategory::data, std::string("suite.json is not valid JSON: ") + e.what());
    }
    require(manifest.value("schema", std::string()) == kSuiteSchema, ErrorCategory::data,
            "suite.json has an unsupported schema tag");
    TaskData d;
    try {
        d.vocab = Vocabulary(manifest.at("vocab").get<std::vector<std::string>>());
        if (manifest.contains("tables")) {
            d.tables = tables_from_json(manifest.at("tables"));
        }
        for (const auto& e : manifest.at("datasets")) {
            DatasetData ds;
            ds.name = e.at("name").get<std::string>();
            ds.task = e.at("task").get<std::size_t>();
            for (std::string_view split : {"train", "dev", "test"}) {
                const auto path = dir / (ds.name + "." + std::string(split) + ".jsonl");
                std::ifstream f(path);
                require(static_cast<bool>(f), ErrorCategory::io, "cannot open " + path.string());
                auto samples = read_jsonl(f);
                for (const auto& s : samples) {
                    require(s.dataset == ds.name && s.task == ds.task, ErrorCategory::data,
                            "sample " + s.id + " in " + path.string() + " does not belong to dataset " + ds.name);
                }
                (split == "train" ? ds.train : split == "dev" ? ds.dev : ds.test) = std::move(samples);
            }
            d.datasets.push_back(std::move(ds));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCategory::data, std::string("suite.json does not match the schema: ") + e.what());
    }
    return d;
}

// ---------------------------------------------------------------------------
// Configuration

struct Ablation {
    bool only_ulora = false;
    bool only_tlora = false;
    bool no_gate = false;
    bool no_aml = false;
    bool no_mim = false;
    bool vanilla = false;  // plain LoRA adapters in place of C-LoRAE

    void validate() const {
        require(!(only_ulora && only_tlora), ErrorCategory::config, "only_ulora and only_tlora are exclusive");
        require(!(vanilla && only_tlora), ErrorCategory::config, "vanilla LoRA has no task experts to keep");
    }
};

// Parses "full", "vanilla" or a '+'-joined list of ablation flags.
inline Ablation parse_variant(const std::string& name) {
    Ablation a;
    if (name == "full") return a;
    std::stringstream ss(name);
    std::string part;
    while (std::getline(ss, part, '+')) {
        if (part == "only_ulora") a.only_ulora = true;
        else if (part == "only_tlora") a.only_tlora = true;
        else if (part == "no_gate") a.no_gate = true;
        else if (part == "no_aml") a.no_aml = true;
        else if (part == "no_mim") a.no_mim = true;
        else if (part == "vanilla") a.vanilla = true;
        else fail(ErrorCategory::config, "unknown variant component '" + part + "'");
    }
    a.validate();
    return a;
}

struct RunConfig {
    ModelConfig model;
    GeneratorSpec data;
    std::string data_dir;  // when set, datasets are read from here instead of generated
    AdamConfig optimizer{.learning_rate = 1e-3};
    std::size_t epochs = 20;
    std::size_t decay_every = 5;
    std::size_t group_size = 8;
    std::size_t groups_per_batch = 3;
    std::size_t eval_group = 64;
    double beta = 0.01;
    double gamma = 2.0;
    double margin = 1.1;
    std::vector<double> targets;  // per dataset; empty means 1.0 each
    Ablation ablation;
    std::uint64_t seed = 1;
    std::string output_dir;  // empty: nothing is written
    bool save_checkpoints = true;

    void validate() const {
        ablation.validate();
        require(group_size > 0 && groups_per_batch > 0 && eval_group > 0, ErrorCategory::config,
                "group sizes must be positive");
        require(beta >= 0.0, ErrorCategory::config, "beta must be non-negative");
        require(margin > 1.0, ErrorCategory::config, "margin must be strictly greater than 1");
        require(gamma >= 0.0, ErrorCategory::config, "gamma must be non-negative");
    }
};

// Model configuration after ablation flags, vocabulary and seed are applied.
inline ModelConfig resolve_model(const RunConfig& rc, std::size_t vocab_size) {
    ModelConfig m = rc.model;
    m.vocab_size = vocab_size;
    m.seed = rc.seed;
    const Ablation& a = rc.ablation;
    if (a.vanilla) {
        m.adapter = AdapterKind::lora;
        m.mim_heads = false;
        return m;
    }
    if (m.adapter != AdapterKind::clorae) {
        return m;
    }
    if (a.only_ulora) {
        m.task_experts = false;
        m.learned_gate = false;
        m.fixed_universal_weight = 1.0;
        m.fixed_task_weight = 0.0;
    }
    if (a.only_tlora) {
        m.universal = false;
    }
    if (a.no_gate) {
        m.learned_gate = false;
        m.fixed_universal_weight = 1.0;
        m.fixed_task_weight = a.only_ulora ? 0.0 : 1.0;
    }
    if (a.no_mim || a.only_ulora || a.only_tlora) {
        m.mim_heads = false;
    }
    return m;
}

// Generator spec whose visual width follows the model width.
inline GeneratorSpec generator_for(const RunConfig& rc) {
    GeneratorSpec g = rc.data;
    g.d_visual = rc.model.d_model;
    return g;
}

// Datasets named by the config: read from `data_dir` or generated in memory.
inline TaskData prepare_data(const RunConfig& rc) {
    if (!rc.data_dir.empty()) {
        return load_suite(rc.data_dir);
    }
    return task_data_from_suite(generate(generator_for(rc)));
}

[[nodiscard]] inline double effective_beta(const RunConfig& rc) {
    return rc.ablation.no_mim ? 0.0 : rc.beta;
}

// ---------------------------------------------------------------------------
// Batching

struct EncodedDataset {
    std::vector<EncodedSample> train, dev, test;

    [[nodiscard]] const std::vector<EncodedSample>& split(std::string_view s) const {
        if (s == "train") return train;
        if (s == "dev") return dev;
        return test;
    }
};

inline std::vector<EncodedDataset> encode_data(const TaskData& data, std::size_t d_model) {
    std::vector<EncodedDataset> out;
    for (std::size_t m = 0; m < data.datasets.size(); ++m) {
        const auto& ds = data.datasets[m];
        EncodedDataset e;
        for (std::string_view split : {"train", "dev", "test"}) {
            auto& dst = split == "train" ? e.train : split == "dev" ? e.dev : e.test;
            const auto& src = ds.split(split);
            dst.reserve(src.size());
            for (std::size_t i = 0; i < src.size(); ++i) {
                dst.push_back(encode_sample(src[i], data.vocab, m, d_model, i));
            }
        }
        out.push_back(std::move(e));
    }
    return out;
}

// Splits `order` into shape-homogeneous groups of at most `size` samples,
// keeping the first-appearance order of shapes and of samples within them.
inline std::vector<SampleGroup> shape_groups(const std::vector<const EncodedSample*>& order, std::size_t size) {
    std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>, std::size_t> bucket_of;
    std::vector<std::vector<const EncodedSample*>> buckets;
    for (const auto* s : order) {
        const auto key = std::make_tuple(s->task, s->visual_rows, s->tokens.size(), s->answer.size());
        auto [it, inserted] = bucket_of.emplace(key, buckets.size());
        if (inserted) buckets.emplace_back();
        buckets[it->second].push_back(s);
    }
    std::vector<SampleGroup> groups;
    for (const auto& b : buckets) {
        for (std::size_t i = 0; i < b.size(); i += size) {
            groups.emplace_back(b.begin() + static_cast<std::ptrdiff_t>(i),
                                b.begin() + static_cast<std::ptrdiff_t>(std::min(b.size(), i + size)));
        }
    }
    return groups;
}

// One epoch of training groups: each dataset is shuffled and grouped, then
// datasets are interleaved in proportion to their group counts.
inline std::vector<SampleGroup> epoch_groups(const std::vector<EncodedDataset>& data, std::size_t group_size, Rng& rng) {
    std::vector<std::vector<SampleGroup>> per;
    for (const auto& ds : data) {
        std::vector<const EncodedSample*> order;
        order.reserve(ds.train.size());
        for (const auto& s : ds.train) order.push_back(&s);
        std::shuffle(order.begin(), order.end(), rng.engine());
        per.push_back(shape_groups(order, group_size));
    }
    std::vector<std::tuple<double, std::size_t, std::size_t>> keys;
    for (std::size_t m = 0; m < per.size(); ++m) {
        const double n = static_cast<double>(per[m].size());
        for (std::size_t k = 0; k < per[m].size(); ++k) {
            keys.emplace_back((static_cast<double>(k) + 0.5) / n, m, k);
        }
    }
    std::sort(keys.begin(), keys.end());
    std::vector<SampleGroup> out;
    out.reserve(keys.size());
    for (const auto& [key, m, k] : keys) out.push_back(std::move(per[m][k]));
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct DatasetReport {
    std::string name;
    F1Counts counts;
    F1Score score;
};

struct EvalReport {
    std::vector<DatasetReport> datasets;
    double macro_f1 = 0.0;
    double all = 0.0;  // sum of per-dataset F1
};

inline EvalReport finish_report(std::vector<DatasetReport> rows) {
    EvalReport r;
    r.datasets = std::move(rows);
    for (const auto& d : r.datasets) r.all += d.score.f1;
    r.macro_f1 = r.datasets.empty() ? 0.0 : r.all / static_cast<double>(r.datasets.size());
    return r;
}

inline std::vector<std::string> detokenize(const Vocabulary& vocab, const std::vector<std::int64_t>& ids) {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(vocab.token(id));
    return out;
}

// Greedy-decodes every sample of one split. Predictions are returned in
// sample order when `predictions` is given.
inline F1Counts evaluate_split(const Seq2Seq& model, const Vocabulary& vocab, const std::vector<EncodedSample>& samples,
                               const std::vector<TaskSample>& gold, std::size_t group,
                               std::vector<std::vector<std::string>>* predictions = nullptr) {
    std::vector<const EncodedSample*> order;
    for (const auto& s : samples) order.push_back(&s);
    F1Counts counts;
    if (predictions != nullptr) predictions->assign(samples.size(), {});
    for (const auto& g : shape_groups(order, group)) {
        const auto decoded = model.decode_greedy(g);
        for (std::size_t b = 0; b < g.size(); ++b) {
            auto toks = detokenize(vocab, decoded[b]);
            const auto& ref = gold[g[b]->index];
            counts += match_records(parse_answer(toks).records, parse_answer(ref.answer).records);
            if (predictions != nullptr) (*predictions)[g[b]->index] = std::move(toks);
        }
    }
    return counts;
}

inline EvalReport evaluate(const Seq2Seq& model, const TaskData& data, const std::vector<EncodedDataset>& enc,
                           std::string_view split, std::size_t group) {
    std::vector<DatasetReport> rows;
    for (std::size_t m = 0; m < data.datasets.size(); ++m) {
        const auto c = evaluate_split(model, data.vocab, enc[m].split(split), data.datasets[m].split(split), group);
        rows.push_back(DatasetReport{data.datasets[m].name, c, score(c)});
    }
    return finish_report(std::move(rows));
}

// Scores already-decoded answers, one list per dataset in sample order.
inline EvalReport score_predictions(const TaskData& data, std::string_view split,
                                    const std::vector<std::vector<std::vector<std::string>>>& predictions) {
    require(predictions.size() == data.datasets.size(), ErrorCategory::contract, "one prediction list per dataset");
    std::vector<DatasetReport> rows;
    for (std::size_t m = 0; m < data.datasets.size(); ++m) {
        const auto& gold = data.datasets[m].split(split);
        require(predictions[m].size() == gold.size(), ErrorCategory::contract, "one prediction per sample");
        F1Counts c;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            c += match_records(parse_answer(predictions[m][i]).records, parse_answer(gold[i].answer).records);
        }
        rows.push_back(DatasetReport{data.datasets[m].name, c, score(c)});
    }
    return finish_report(std::move(rows));
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json ds = nlohmann::json::array();
    for (const auto& d : r.datasets) {
        ds.push_back({{"dataset", d.name},
                      {"precision", d.score.precision},
                      {"recall", d.score.recall},
                      {"f1", d.score.f1},
                      {"true_positive", d.counts.true_positive},
                      {"predicted", d.counts.predicted},
                      {"gold", d.counts.gold}});
    }
    return {{"datasets", ds}, {"macro_f1", r.macro_f1}, {"all", r.all}};
}

inline std::string report_table(const EvalReport& r) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "dataset" << std::right << std::setw(10) << "P" << std::setw(10) << "R"
       << std::setw(10) << "F1" << '\n';
    os << std::fixed << std::setprecision(4);
    for (const auto& d : r.datasets) {
        os << std::left << std::setw(16) << d.name << std::right << std::setw(10) << d.score.precision << std::setw(10)
           << d.score.recall << std::setw(10) << d.score.f1 << '\n';
    }
    os << std::left << std::setw(16) << "macro" << std::right << std::setw(30) << r.macro_f1 << '\n';
    os << std::left << std::setw(16) << "All" << std::right << std::setw(30) << r.all << '\n';
    return os.str();
}

// Teacher-forced pass over one split with routing statistics enabled.
inline RoutingStats routing_pass(const Seq2Seq& model, const std::vector<EncodedDataset>& enc, std::string_view split,
                                 std::size_t group) {
    NoGradGuard no_grad;
    RoutingStats stats;
    ForwardContext ctx;
    ctx.routing = &stats;
    for (const auto& ds : enc) {
        std::vector<const EncodedSample*> order;
        for (const auto& s : ds.split(split)) order.push_back(&s);
        for (const auto& g : shape_groups(order, group)) {
            (void)model.forward_logits(g, ctx);
        }
    }
    return stats;
}

inline nlohmann::json routing_to_json(const std::vector<RoutingEntry>& entries) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : entries) {
        out.push_back({{"group", e.group},
                       {"task", e.task_id},
                       {"task_proportion", e.task_proportion},
                       {"universal_proportion", e.universal_proportion},
                       {"tokens", e.tokens}});
    }
    return out;
}

inline nlohmann::json count_to_json(const TrainableCount& c) {
    return {{"universal", c.universal},   {"task_experts", c.task_experts}, {"gate", c.gate},
            {"mim_heads", c.mim_heads},   {"embeddings", c.embeddings},     {"lora_matrices", c.lora_matrices()},
            {"total", c.total()}};
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
    std::unique_ptr<Seq2Seq> model;
    std::vector<std::string> metrics;  // one JSON line per epoch
    std::vector<double> epoch_seconds;
    EvalReport dev;
    EvalReport test;
    TrainableCount trainable;
    double seconds = 0.0;
};

namespace detail {

inline void append_line(const std::filesystem::path& path, const std::string& line) {
    std::ofstream os(path, std::ios::binary | std::ios::app);
    require(static_cast<bool>(os), ErrorCategory::io, "cannot write " + path.string());
    os << line << '\n';
}

inline std::string first_non_finite(const ParameterStore& store) {
    for (const auto& p : store.all()) {
        if (!p.tensor.all_finite()) return p.name + " (value)";
    }
    for (const auto& p : store.all()) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) {
            if (!std::isfinite(g)) return p.name + " (gradient)";
        }
    }
    return "<none>";
}

}  // namespace detail

inline TrainResult train(const RunConfig& rc, const TaskData& data) {
    rc.validate();
    require(!data.datasets.empty(), ErrorCategory::config, "no datasets to train on");
    const auto t_start = std::chrono::steady_clock::now();
    const std::size_t n_data = data.datasets.size();
    std::vector<double> targets = rc.targets.empty() ? std::vector<double>(n_data, 1.0) : rc.targets;
    require(targets.size() == n_data, ErrorCategory::config,
            std::to_string(targets.size()) + " achievement targets for " + std::to_string(n_data) + " datasets");

    TrainResult result;
    result.model = std::make_unique<Seq2Seq>(resolve_model(rc, data.vocab.size()));
    Seq2Seq& model = *result.model;
    const auto enc = encode_data(data, model.config().d_model);
    for (const auto& ds : data.datasets) {
        if (model.config().adapter == AdapterKind::clorae && model.config().task_experts) {
            require(ds.task < model.config().n_tasks, ErrorCategory::config,
                    "dataset " + ds.name + " maps to task " + std::to_string(ds.task) + " but N = " +
                        std::to_string(model.config().n_tasks));
        }
    }
    result.trainable = model.count_trainable();

    std::filesystem::path out;
    if (!rc.output_dir.empty()) {
        out = rc.output_dir;
        std::error_code ec;
        std::filesystem::create_directories(out, ec);
        require(!ec, ErrorCategory::io, "cannot create " + out.string() + ": " + ec.message());
        std::filesystem::remove(out / "metrics.jsonl", ec);
        std::filesystem::remove(out / "timing.jsonl", ec);
    }

    Adam adam(rc.optimizer);
    AchievementTracker tracker(targets, rc.margin, rc.gamma);
    TaskWeights weights = tracker.initial();
    const double beta = effective_beta(rc);
    Rng shuffle_rng(derive_seed(rc.seed, "shuffle"));
    Rng dropout_rng(derive_seed(rc.seed, "dropout"));
    const auto groups_layout = default_layer_groups(model.wrapped_count());

    for (std::size_t epoch = 0; epoch < rc.epochs; ++epoch) {
        const auto t_epoch = std::chrono::steady_clock::now();
        if (epoch > 0 && rc.decay_every > 0 && epoch % rc.decay_every == 0) {
            adam.decay();
        }
        const auto groups = epoch_groups(enc, rc.group_size, shuffle_rng);
        std::vector<double> ce_sum(n_data, 0.0);
        std::vector<std::size_t> ce_tokens(n_data, 0);
        double mim_sum = 0.0;
        std::size_t mim_steps = 0;
        RoutingStats routing;
        ForwardContext ctx;
        ctx.training = true;
        ctx.dropout_rng = &dropout_rng;
        ctx.routing = &routing;
        for (std::size_t start = 0; start < groups.size(); start += rc.groups_per_batch) {
            const std::vector<SampleGroup> batch(
                groups.begin() + static_cast<std::ptrdiff_t>(start),
                groups.begin() + static_cast<std::ptrdiff_t>(std::min(groups.size(), start + rc.groups_per_batch)));
            model.parameters().zero_grad();
            const ForwardOutput fo = model.forward_loss(batch, n_data, ctx);
            const Tensor loss =
                multitask_step_loss(fo.dataset_losses, weights.weights, fo.mim, beta);
            const bool finite = std::isfinite(loss.item());
            if (loss.requires_grad()) {
                backward(loss);
            }
            if (!finite) {
                fail(ErrorCategory::numeric, "non-finite loss at epoch " + std::to_string(epoch) +
                                                 "; first non-finite parameter: " +
                                                 detail::first_non_finite(model.parameters()));
            }
            adam.step(model.parameters());
            for (std::size_t m = 0; m < n_data; ++m) {
                if (fo.dataset_losses[m].defined()) {
                    ce_sum[m] += fo.dataset_losses[m].item() * static_cast<double>(fo.dataset_tokens[m]);
                    ce_tokens[m] += fo.dataset_tokens[m];
                }
            }
            if (fo.mim.defined()) {
                mim_sum += fo.mim.item();
                ++mim_steps;
            }
        }

        const EvalReport dev = evaluate(model, data, enc, "dev", rc.eval_group);
        std::vector<double> scores;
        for (const auto& d : dev.datasets) scores.push_back(d.score.f1);
        const TaskWeights next = tracker.update_epoch(scores);

        nlohmann::json line;
        line["epoch"] = epoch;
        line["learning_rate"] = adam.current_learning_rate();
        nlohmann::json per = nlohmann::json::array();
        for (std::size_t m = 0; m < n_data; ++m) {
            per.push_back({{"dataset", data.datasets[m].name},
                           {"train_ce", ce_tokens[m] ? ce_sum[m] / static_cast<double>(ce_tokens[m]) : 0.0},
                           {"dev_f1", dev.datasets[m].score.f1},
                           {"weight", weights.weights[m]}});
        }
        line["datasets"] = per;
        line["dev_macro_f1"] = dev.macro_f1;
        line["mim"] = mim_steps ? nlohmann::json(mim_sum / static_cast<double>(mim_steps)) : nlohmann::json(nullptr);
        line["routing"] = routing.empty() ? nlohmann::json::array() : routing_to_json(routing_report(routing, groups_layout));
        result.metrics.push_back(line.dump());
        if (!rc.ablation.no_aml) {
            weights = next;
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
        result.epoch_seconds.push_back(secs);
        if (!out.empty()) {
            detail::append_line(out / "metrics.jsonl", result.metrics.back());
            detail::append_line(out / "timing.jsonl", nlohmann::json{{"epoch", epoch}, {"wall_seconds", secs}}.dump());
            if (rc.save_checkpoints) save_checkpoint((out / "checkpoint.bin").string(), model);
        }
        result.dev = dev;
    }

    if (rc.epochs == 0) {
        result.dev = evaluate(model, data, enc, "dev", rc.eval_group);
    }
    result.test = evaluate(model, data, enc, "test", rc.eval_group);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    if (!out.empty()) {
        if (rc.save_checkpoints) save_checkpoint((out / "checkpoint.bin").string(), model);
        nlohmann::json report{{"dev", report_to_json(result.dev)},
                              {"test", report_to_json(result.test)},
                              {"trainable", count_to_json(result.trainable)}};
        std::ofstream os(out / "report.json", std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(os), ErrorCategory::io, "cannot write report.json");
        os << report.dump(1) << '\n';
    }
    return result;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRun {
    std::string variant;
    std::uint64_t seed = 0;
    EvalReport test;
    TrainableCount trainable;
    double seconds = 0.0;
};

struct VariantSummary {
    std::string variant;
    double median_macro_f1 = 0.0;
    double median_all = 0.0;
    std::vector<std::pair<std::string, double>> median_dataset_f1;
    double median_gap = 0.0;  // max - min per-dataset F1
    TrainableCount trainable;
};

inline double median(std::vector<double> v) {
    require(!v.empty(), ErrorCategory::contract, "median of an empty list");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double f1_gap(const EvalReport& r) {
    double lo = 1.0, hi = 0.0;
    for (const auto& d : r.datasets) {
        lo = std::min(lo, d.score.f1);
        hi = std::max(hi, d.score.f1);
    }
    return r.datasets.empty() ? 0.0 : hi - lo;
}

inline std::vector<VariantSummary> summarize(const std::vector<AblationRun>& runs,
                                             const std::vector<std::string>& variants) {
    std::vector<VariantSummary> out;
    for (const auto& v : variants) {
        VariantSummary s;
        s.variant = v;
        std::vector<double> macro, all, gap;
        std::map<std::string, std::vector<double>> per;
        std::vector<std::string> names;
        for (const auto& r : runs) {
            if (r.variant != v) continue;
            macro.push_back(r.test.macro_f1);
            all.push_back(r.test.all);
            gap.push_back(f1_gap(r.test));
            s.trainable = r.trainable;
            for (const auto& d : r.test.datasets) {
                if (!per.count(d.name)) names.push_back(d.name);
                per[d.name].push_back(d.score.f1);
            }
        }
        if (macro.empty()) continue;
        s.median_macro_f1 = median(macro);
        s.median_all = median(all);
        s.median_gap = median(gap);
        for (const auto& n : names) s.median_dataset_f1.emplace_back(n, median(per[n]));
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<AblationRun> run_ablation(const RunConfig& base, const TaskData& data,
                                             const std::vector<std::string>& variants,
                                             const std::vector<std::uint64_t>& seeds) {
    require(!variants.empty() && !seeds.empty(), ErrorCategory::config, "ablation needs variants and seeds");
    std::vector<AblationRun> runs;
    for (const auto& v : variants) {
        for (auto seed : seeds) {
            RunConfig rc = base;
            rc.ablation = parse_variant(v);
            rc.seed = seed;
            if (!base.output_dir.empty()) {
                rc.output_dir = (std::filesystem::path(base.output_dir) / v / ("seed" + std::to_string(seed))).string();
            }
            auto r = train(rc, data);
            runs.push_back(AblationRun{v, seed, r.test, r.trainable, r.seconds});
        }
    }
    return runs;
}

inline nlohmann::json ablation_to_json(const std::vector<AblationRun>& runs, const std::vector<VariantSummary>& sums) {
    nlohmann::json j;
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : runs) {
        rj.push_back({{"variant", r.variant}, {"seed", r.seed}, {"test", report_to_json(r.test)},
                      {"trainable", count_to_json(r.trainable)}});
    }
    nlohmann::json sj = nlohmann::json::array();
    for (const auto& s : sums) {
        nlohmann::json per = nlohmann::json::object();
        for (const auto& [n, f] : s.median_dataset_f1) per[n] = f;
        sj.push_back({{"variant", s.variant},
                      {"median_macro_f1", s.median_macro_f1},
                      {"median_all", s.median_all},
                      {"median_gap", s.median_gap},
                      {"median_dataset_f1", per},
                      {"trainable", count_to_json(s.trainable)}});
    }
    j["runs"] = rj;
    j["summary"] = sj;
    return j;
}

inline std::string ablation_table(const std::vector<VariantSummary>& sums) {
    std::ostringstream os;
    os << std::left << std::setw(36) << "variant" << std::right << std::setw(10) << "macro" << std::setw(10) << "All"
       << std::setw(10) << "gap" << std::setw(12) << "TP" << std::setw(12) << "LoRA" << '\n';
    os << std::fixed << std::setprecision(4);
    for (const auto& s : sums) {
        os << std::left << std::setw(36) << s.variant << std::right << std::setw(10) << s.median_macro_f1
           << std::setw(10) << s.median_all << std::setw(10) << s.median_gap << std::setw(12) << s.trainable.total()
           << std::setw(12) << s.trainable.lora_matrices() << '\n';
    }
    return os.str();
}

}  // namespace clorae
