// SPDX-License-Identifier: Apache-2.0
//
// Key-value run configuration. A config file holds `key = value` lines with
// `#` comments; command-line flags of the same names override it.

#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clorae/errors.hpp"
#include "clorae/trainer.hpp"

namespace clorae {

namespace config_detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    require(ec == std::errc() && p == v.data() + v.size(), ErrorCategory::config,
            key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline double to_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    require(used == v.size() && !v.empty() && std::isfinite(out), ErrorCategory::config,
            key + ": expected a number, got '" + v + "'");
    return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(ErrorCategory::config, key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, sep)) {
        part = trim(part);
        if (!part.empty()) out.push_back(part);
    }
    return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        os << (i ? "," : "") << v[i];
    }
    return os.str();
}

inline std::string fmt(double v) { return format_double(v); }

// "name:task:train:dev:test" entries.
inline std::vector<DatasetSpec> parse_datasets(const std::string& v) {
    std::vector<DatasetSpec> out;
    for (const auto& item : split_list(v)) {
        const auto f = split_list(item, ':');
        require(f.size() == 5, ErrorCategory::config, "datasets: entry '" + item + "' is not name:task:train:dev:test");
        out.push_back(DatasetSpec{f[0], to_uint("datasets", f[1]), to_uint("datasets", f[2]), to_uint("datasets", f[3]),
                                  to_uint("datasets", f[4])});
    }
    return out;
}

inline std::string format_datasets(const std::vector<DatasetSpec>& ds) {
    std::vector<std::string> items;
    for (const auto& d : ds) {
        items.push_back(d.name + ":" + std::to_string(d.task) + ":" + std::to_string(d.train) + ":" +
                        std::to_string(d.dev) + ":" + std::to_string(d.test));
    }
    return join(items);
}

inline std::string variant_name(const Ablation& a) {
    std::vector<std::string> parts;
    if (a.vanilla) parts.emplace_back("vanilla");
    if (a.only_ulora) parts.emplace_back("only_ulora");
    if (a.only_tlora) parts.emplace_back("only_tlora");
    if (a.no_gate) parts.emplace_back("no_gate");
    if (a.no_aml) parts.emplace_back("no_aml");
    if (a.no_mim) parts.emplace_back("no_mim");
    if (parts.empty()) return "full";
    std::string s = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) s += "+" + parts[i];
    return s;
}

}  // namespace config_detail

struct Setting {
    std::string key;
    std::string help;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<Setting>& settings() {
    using namespace config_detail;
#define CLORAE_UINT(KEY, FIELD, HELP)                                                                          \
    Setting{KEY, HELP, [](RunConfig& c, const std::string& v) { c.FIELD = to_uint(KEY, v); },                \
            [](const RunConfig& c) { return std::to_string(c.FIELD); }}
#define CLORAE_DOUBLE(KEY, FIELD, HELP)                                                                        \
    Setting{KEY, HELP, [](RunConfig& c, const std::string& v) { c.FIELD = to_double(KEY, v); },              \
            [](const RunConfig& c) { return fmt(c.FIELD); }}
#define CLORAE_BOOL(KEY, FIELD, HELP)                                                                          \
    Setting{KEY, HELP, [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(KEY, v); },                \
            [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }}
    static const std::vector<Setting> table{
        CLORAE_UINT("d_model", model.d_model, "model width (also the visual vector width)"),
        CLORAE_UINT("n_heads", model.n_heads, "attention heads"),
        CLORAE_UINT("encoder_layers", model.encoder_layers, "encoder blocks"),
        CLORAE_UINT("decoder_layers", model.decoder_layers, "decoder blocks"),
        CLORAE_UINT("d_ff", model.d_ff, "feed-forward width"),
        CLORAE_UINT("max_length", model.max_length, "maximum encoder input length"),
        CLORAE_UINT("max_answer_length", model.max_answer_length, "decode cap in answer tokens"),
        Setting{"adapter", "none | lora | clorae",
                [](RunConfig& c, const std::string& v) { c.model.adapter = parse_adapter(v); },
                [](const RunConfig& c) { return adapter_name(c.model.adapter); }},
        CLORAE_UINT("r", model.rank, "adapter rank r (universal expert rank)"),
        CLORAE_UINT("N", model.n_tasks, "number of task experts"),
        CLORAE_DOUBLE("alpha", model.alpha, "adapter scale numerator (scale = alpha / r)"),
        CLORAE_DOUBLE("dropout", model.dropout, "dropout on the adapter input"),
        Setting{"wrapped", "comma list of wrapped projections: q,k,v,o,ff1,ff2",
                [](RunConfig& c, const std::string& v) { c.model.wrapped = split_list(v); },
                [](const RunConfig& c) { return join(c.model.wrapped); }},
        CLORAE_BOOL("tune_embeddings", model.tune_embeddings, "train the token embedding and output head"),
        CLORAE_DOUBLE("lr", optimizer.learning_rate, "Adam learning rate"),
        CLORAE_DOUBLE("decay_factor", optimizer.decay_factor, "learning-rate multiplier per decay event"),
        CLORAE_UINT("decay_every", decay_every, "epochs between decay events (0 disables)"),
        CLORAE_UINT("epochs", epochs, "training epochs"),
        CLORAE_UINT("group_size", group_size, "samples per task-homogeneous forward group"),
        CLORAE_UINT("groups_per_batch", groups_per_batch, "forward groups per optimizer step"),
        CLORAE_UINT("eval_group", eval_group, "samples per decoding group"),
        CLORAE_DOUBLE("beta", beta, "MIM loss weight"),
        CLORAE_DOUBLE("gamma", gamma, "achievement focusing exponent"),
        CLORAE_DOUBLE("margin", margin, "achievement margin (> 1)"),
        Setting{"targets", "comma list of per-dataset target scores (default 1.0 each)",
                [](RunConfig& c, const std::string& v) {
                    c.targets.clear();
                    for (const auto& x : split_list(v)) c.targets.push_back(to_double("targets", x));
                },
                [](const RunConfig& c) {
                    std::vector<std::string> s;
                    for (double x : c.targets) s.push_back(fmt(x));
                    return join(s);
                }},
        Setting{"variant", "full | vanilla | '+'-joined flags: only_ulora, only_tlora, no_gate, no_aml, no_mim",
                [](RunConfig& c, const std::string& v) { c.ablation = parse_variant(v); },
                [](const RunConfig& c) { return variant_name(c.ablation); }},
        CLORAE_UINT("seed", seed, "initialization, shuffling and dropout seed"),
        Setting{"output_dir", "run output directory (relative paths resolve under $CLORAE_OUTPUT_ROOT)",
                [](RunConfig& c, const std::string& v) { c.output_dir = v; },
                [](const RunConfig& c) { return c.output_dir; }},
        Setting{"data_dir", "read datasets from this directory instead of generating them",
                [](RunConfig& c, const std::string& v) { c.data_dir = v; },
                [](const RunConfig& c) { return c.data_dir; }},
        CLORAE_BOOL("checkpoints", save_checkpoints, "write checkpoint.bin after each epoch"),
        CLORAE_UINT("data_seed", data.seed, "generator seed"),
        Setting{"datasets", "comma list of name:task:train:dev:test",
                [](RunConfig& c, const std::string& v) { c.data.datasets = parse_datasets(v); },
                [](const RunConfig& c) { return format_datasets(c.data.datasets); }},
        CLORAE_UINT("n_words", data.n_words, "content words"),
        CLORAE_UINT("n_fillers", data.n_fillers, "filler words"),
        CLORAE_UINT("n_labels", data.n_labels, "shared label set size"),
        CLORAE_UINT("n_roles", data.n_roles, "argument roles"),
        CLORAE_UINT("n_phrasings", data.n_phrasings, "instruction phrasings (1-4)"),
        CLORAE_UINT("text_length", data.text_length, "text tokens per sample"),
        CLORAE_DOUBLE("conflict_rate", data.conflict_rate, "fraction of words labelled differently per family"),
        CLORAE_DOUBLE("visual_dependence", data.visual_dependence, "fraction of samples with a hidden mention"),
        CLORAE_DOUBLE("visual_noise", data.visual_noise, "noise on visual vectors"),
    };
#undef CLORAE_UINT
#undef CLORAE_DOUBLE
#undef CLORAE_BOOL
    return table;
}

inline const Setting& find_setting(const std::string& key) {
    for (const auto& s : settings()) {
        if (s.key == key) return s;
    }
    fail(ErrorCategory::config, "unknown configuration key '" + key + "'");
}

inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
    find_setting(key).set(rc, value);
}

// Parses `key = value` lines; reports the line number of malformed input.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::istream& is) {
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t no = 0;
    while (std::getline(is, line)) {
        ++no;
        const auto hash = line.find('#');
        const std::string body = config_detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        require(eq != std::string::npos, ErrorCategory::config,
                "config line " + std::to_string(no) + ": expected key = value");
        auto key = config_detail::trim(body.substr(0, eq));
        auto value = config_detail::trim(body.substr(eq + 1));
        require(!key.empty(), ErrorCategory::config, "config line " + std::to_string(no) + ": empty key");
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

inline void apply_config_file(RunConfig& rc, const std::string& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), ErrorCategory::io, "cannot open config file " + path);
    for (const auto& [k, v] : parse_config_text(is)) {
        apply_setting(rc, k, v);
    }
}

inline std::string dump_config(const RunConfig& rc) {
    std::ostringstream os;
    for (const auto& s : settings()) {
        os << s.key << " = " << s.get(rc) << '\n';
    }
    return os.str();
}

}  // namespace clorae
