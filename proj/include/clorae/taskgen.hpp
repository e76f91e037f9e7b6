// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multimodal extraction tasks.
//
// Three task families share one pool of content words and one label set:
//   family 0 (entity-like):   "L w ;" for each of the two mentions
//   family 1 (relation-like): "L head tail ;"
//   family 2 (event-like):    "L trigger R arg ;"
// Labels come from a per-family word->label table. A fraction kappa of the
// words (the conflict rate) carry pairwise-different labels across families;
// the rest share one label. Each sample also carries one visual vector per
// mention (a fixed codebook entry plus small noise). With probability
// `visual_dependence` one mention in the text is replaced by <img>, and only
// the visual vector identifies the word.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "clorae/errors.hpp"
#include "clorae/random.hpp"

namespace clorae {

inline constexpr std::string_view kDatasetSchema = "clorae-mie/1";
inline constexpr std::size_t kFamilies = 3;
inline constexpr std::size_t kMentions = 2;

namespace tokens {
inline constexpr std::string_view pad = "<pad>";
inline constexpr std::string_view bos = "<bos>";
inline constexpr std::string_view eos = "<eos>";
inline constexpr std::string_view sep = ";";
inline constexpr std::string_view image = "<img>";
inline const std::array<std::string, kFamilies> family{"ner", "re", "ee"};
inline const std::array<std::string, 4> phrasing{"extract", "find", "list", "identify"};
}  // namespace tokens

enum class TokenClass { special, instruction, label, role, word, filler, separator, unknown };

[[nodiscard]] inline TokenClass classify_token(std::string_view t) {
    auto numbered = [&](char prefix) {
        return t.size() >= 2 && t[0] == prefix &&
               std::all_of(t.begin() + 1, t.end(), [](char c) { return c >= '0' && c <= '9'; });
    };
    if (t == tokens::sep) {
        return TokenClass::separator;
    }
    if (t == tokens::pad || t == tokens::bos || t == tokens::eos || t == tokens::image) {
        return TokenClass::special;
    }
    if (numbered('L')) {
        return TokenClass::label;
    }
    if (numbered('R')) {
        return TokenClass::role;
    }
    if (numbered('w')) {
        return TokenClass::word;
    }
    if (numbered('f')) {
        return TokenClass::filler;
    }
    if (std::find(tokens::family.begin(), tokens::family.end(), t) != tokens::family.end() ||
        std::find(tokens::phrasing.begin(), tokens::phrasing.end(), t) != tokens::phrasing.end()) {
        return TokenClass::instruction;
    }
    return TokenClass::unknown;
}

class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> toks) : tokens_(std::move(toks)) {
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            require(ids_.emplace(tokens_[i], static_cast<std::int64_t>(i)).second, ErrorCategory::data,
                    "duplicate vocabulary token " + tokens_[i]);
        }
        require(tokens_.size() >= 3 && tokens_[0] == tokens::pad && tokens_[1] == tokens::bos &&
                    tokens_[2] == tokens::eos,
                ErrorCategory::data, "vocabulary must start with <pad> <bos> <eos>");
    }

    static Vocabulary build(std::size_t n_words, std::size_t n_fillers, std::size_t n_labels, std::size_t n_roles) {
        std::vector<std::string> t{std::string(tokens::pad), std::string(tokens::bos), std::string(tokens::eos),
                                   std::string(tokens::sep), std::string(tokens::image)};
        t.insert(t.end(), tokens::family.begin(), tokens::family.end());
        t.insert(t.end(), tokens::phrasing.begin(), tokens::phrasing.end());
        for (std::size_t i = 0; i < n_labels; ++i) t.push_back("L" + std::to_string(i));
        for (std::size_t i = 0; i < n_roles; ++i) t.push_back("R" + std::to_string(i));
        for (std::size_t i = 0; i < n_words; ++i) t.push_back("w" + std::to_string(i));
        for (std::size_t i = 0; i < n_fillers; ++i) t.push_back("f" + std::to_string(i));
        return Vocabulary(std::move(t));
    }

    [[nodiscard]] std::size_t size() const noexcept { return tokens_.size(); }
    [[nodiscard]] const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    [[nodiscard]] const std::string& token(std::int64_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    [[nodiscard]] std::optional<std::int64_t> find(std::string_view t) const {
        auto it = ids_.find(std::string(t));
        return it == ids_.end() ? std::nullopt : std::optional<std::int64_t>(it->second);
    }
    [[nodiscard]] std::int64_t id(std::string_view t) const {
        auto found = find(t);
        require(found.has_value(), ErrorCategory::data, "token '" + std::string(t) + "' is not in the vocabulary");
        return *found;
    }
    [[nodiscard]] std::int64_t pad() const { return 0; }
    [[nodiscard]] std::int64_t bos() const { return 1; }
    [[nodiscard]] std::int64_t eos() const { return 2; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int64_t> ids_;
};

// One instruction instance.
struct TaskSample {
    std::size_t task = 0;
    std::string dataset;
    std::vector<std::string> instruction;
    std::vector<std::string> text;
    std::vector<std::vector<double>> visual;
    std::vector<std::string> answer;
    std::string id;

    bool operator==(const TaskSample&) const = default;
};

// ---------------------------------------------------------------------------
// Answer grammar

enum class RecordKind { entity, relation, event };

struct ExtractionRecord {
    RecordKind kind = RecordKind::entity;
    std::vector<std::string> slots;  // label first, then the kind's fields

    bool operator==(const ExtractionRecord&) const = default;
    auto operator<=>(const ExtractionRecord&) const = default;
};

struct ParsedAnswer {
    std::vector<ExtractionRecord> records;
    std::size_t malformed_tokens = 0;  // tokens dropped after the valid prefix
};

// Parses the longest grammar-valid prefix. Parsing stops at <eos>; anything
// after the first malformed record is dropped and counted.
inline ParsedAnswer parse_answer(const std::vector<std::string>& toks) {
    ParsedAnswer out;
    std::size_t end = toks.size();
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (toks[i] == tokens::eos) {
            end = i;
            break;
        }
    }
    auto cls = [&](std::size_t i) { return i < end ? classify_token(toks[i]) : TokenClass::unknown; };
    std::size_t i = 0;
    while (i < end) {
        std::optional<ExtractionRecord> rec;
        std::size_t used = 0;
        if (cls(i) == TokenClass::label && cls(i + 1) == TokenClass::word) {
            if (cls(i + 2) == TokenClass::separator) {
                rec = ExtractionRecord{RecordKind::entity, {toks[i], toks[i + 1]}};
                used = 3;
            } else if (cls(i + 2) == TokenClass::word && cls(i + 3) == TokenClass::separator) {
                rec = ExtractionRecord{RecordKind::relation, {toks[i], toks[i + 1], toks[i + 2]}};
                used = 4;
            } else if (cls(i + 2) == TokenClass::role && cls(i + 3) == TokenClass::word &&
                       cls(i + 4) == TokenClass::separator) {
                rec = ExtractionRecord{RecordKind::event, {toks[i], toks[i + 1], toks[i + 2], toks[i + 3]}};
                used = 5;
            }
        }
        if (!rec) {
            out.malformed_tokens = end - i;
            break;
        }
        out.records.push_back(std::move(*rec));
        i += used;
    }
    return out;
}

inline std::vector<std::string> serialize_records(const std::vector<ExtractionRecord>& records) {
    std::vector<std::string> out;
    for (const auto& r : records) {
        out.insert(out.end(), r.slots.begin(), r.slots.end());
        out.emplace_back(tokens::sep);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scoring

struct F1Counts {
    std::size_t true_positive = 0;
    std::size_t predicted = 0;
    std::size_t gold = 0;

    F1Counts& operator+=(const F1Counts& o) noexcept {
        true_positive += o.true_positive;
        predicted += o.predicted;
        gold += o.gold;
        return *this;
    }
};

struct F1Score {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Exact-match record counts for one sample (multiset intersection).
inline F1Counts match_records(std::vector<ExtractionRecord> pred, std::vector<ExtractionRecord> gold) {
    std::sort(pred.begin(), pred.end());
    std::sort(gold.begin(), gold.end());
    std::vector<ExtractionRecord> common;
    std::set_intersection(pred.begin(), pred.end(), gold.begin(), gold.end(), std::back_inserter(common));
    return F1Counts{common.size(), pred.size(), gold.size()};
}

[[nodiscard]] inline F1Score score(const F1Counts& c) {
    if (c.predicted == 0 && c.gold == 0) {
        return F1Score{1.0, 1.0, 1.0};
    }
    F1Score s;
    s.precision = c.predicted == 0 ? 0.0 : static_cast<double>(c.true_positive) / static_cast<double>(c.predicted);
    s.recall = c.gold == 0 ? 0.0 : static_cast<double>(c.true_positive) / static_cast<double>(c.gold);
    s.f1 = (s.precision + s.recall) == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

inline F1Score f1(const std::vector<ExtractionRecord>& pred, const std::vector<ExtractionRecord>& gold) {
    return score(match_records(pred, gold));
}

// ---------------------------------------------------------------------------
// Generator

struct DatasetSpec {
    std::string name;
    std::size_t task = 0;
    std::size_t train = 2000;
    std::size_t dev = 500;
    std::size_t test = 500;
};

struct GeneratorSpec {
    std::uint64_t seed = 1;
    std::vector<DatasetSpec> datasets{{"ner", 0}, {"re", 1}, {"ee", 2}};
    std::size_t n_words = 24;
    std::size_t n_fillers = 16;
    std::size_t n_labels = 4;
    std::size_t n_roles = 3;
    std::size_t n_phrasings = 2;
    std::size_t text_length = 6;
    std::size_t d_visual = 64;
    double conflict_rate = 0.7;
    double visual_dependence = 0.2;
    double visual_noise = 0.05;

    void validate() const {
        require(!datasets.empty(), ErrorCategory::config, "generator needs at least one dataset");
        for (const auto& d : datasets) {
            require(d.train > 0 && d.dev > 0 && d.test > 0, ErrorCategory::config,
                    "dataset '" + d.name + "' needs positive train/dev/test counts");
            require(d.task < kFamilies, ErrorCategory::config,
                    "dataset '" + d.name + "' has task " + std::to_string(d.task) + "; only 3 families exist");
            require(!d.name.empty() && d.name.find_first_of("/\\ ") == std::string::npos, ErrorCategory::config,
                    "dataset names must be non-empty without spaces or slashes");
        }
        require(n_words >= kMentions, ErrorCategory::config, "need at least two content words");
        require(n_labels >= kFamilies, ErrorCategory::config,
                "need at least three labels so conflicting words can differ across all families");
        require(n_roles >= 1 && n_fillers >= 1, ErrorCategory::config, "need at least one role and one filler");
        require(n_phrasings >= 1 && n_phrasings <= tokens::phrasing.size(), ErrorCategory::config,
                "n_phrasings must lie in [1, 4]");
        require(text_length >= kMentions, ErrorCategory::config, "text must hold both mentions");
        require(d_visual >= 1, ErrorCategory::config, "visual width must be positive");
        require(conflict_rate >= 0.0 && conflict_rate <= 1.0, ErrorCategory::config, "conflict rate must lie in [0, 1]");
        require(visual_dependence >= 0.0 && visual_dependence <= 1.0, ErrorCategory::config,
                "visual dependence must lie in [0, 1]");
        require(visual_noise >= 0.0, ErrorCategory::config, "visual noise must be non-negative");
    }
};

// The generator's hidden rules; enough to answer every sample exactly.
struct GeneratorTables {
    std::array<std::vector<std::size_t>, kFamilies> labels;  // labels[family][word]
    std::vector<std::size_t> roles;                          // roles[word]
    std::vector<bool> conflicting;                           // per word
    std::vector<std::vector<double>> codebook;               // per word, d_visual wide
};

struct DatasetSplits {
    DatasetSpec spec;
    std::vector<TaskSample> train;
    std::vector<TaskSample> dev;
    std::vector<TaskSample> test;

    [[nodiscard]] const std::vector<TaskSample>& split(std::string_view name) const {
        if (name == "train") return train;
        if (name == "dev") return dev;
        require(name == "test", ErrorCategory::config, "unknown split '" + std::string(name) + "'");
        return test;
    }
};

struct GeneratedSuite {
    GeneratorSpec spec;
    Vocabulary vocab;
    GeneratorTables tables;
    std::vector<DatasetSplits> datasets;
};

inline std::string word_token(std::size_t w) { return "w" + std::to_string(w); }
inline std::string label_token(std::size_t l) { return "L" + std::to_string(l); }
inline std::string role_token(std::size_t r) { return "R" + std::to_string(r); }

inline GeneratorTables make_tables(const GeneratorSpec& spec) {
    Rng rng(derive_seed(spec.seed, "tables"));
    GeneratorTables t;
    const std::size_t k = spec.n_words;
    std::vector<std::size_t> base(k);
    for (auto& b : base) {
        b = rng.index(spec.n_labels);
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    const auto n_conflict = static_cast<std::size_t>(std::llround(spec.conflict_rate * static_cast<double>(k)));
    t.conflicting.assign(k, false);
    for (std::size_t i = 0; i < n_conflict; ++i) {
        t.conflicting[order[i]] = true;
    }
    for (auto& fam : t.labels) {
        fam = base;
    }
    for (std::size_t w = 0; w < k; ++w) {
        if (!t.conflicting[w]) {
            continue;
        }
        std::vector<std::size_t> perm(spec.n_labels);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        for (std::size_t f = 0; f < kFamilies; ++f) {
            t.labels[f][w] = perm[f];
        }
    }
    t.roles.resize(k);
    for (auto& r : t.roles) {
        r = rng.index(spec.n_roles);
    }
    t.codebook.assign(k, std::vector<double>(spec.d_visual));
    for (auto& code : t.codebook) {
        for (auto& x : code) {
            x = rng.normal();
        }
    }
    return t;
}

// Gold answer for family `task` given the two mentions in text order.
inline std::vector<std::string> gold_answer(const GeneratorTables& t, std::size_t task, std::size_t first,
                                            std::size_t second) {
    switch (task) {
    case 0:
        return {label_token(t.labels[0][first]), word_token(first), std::string(tokens::sep),
                label_token(t.labels[0][second]), word_token(second), std::string(tokens::sep)};
    case 1:
        return {label_token(t.labels[1][first]), word_token(first), word_token(second), std::string(tokens::sep)};
    default:
        return {label_token(t.labels[2][first]), word_token(first), role_token(t.roles[second]), word_token(second),
                std::string(tokens::sep)};
    }
}

inline TaskSample make_sample(const GeneratorSpec& spec, const GeneratorTables& t, const DatasetSpec& ds, Rng& rng,
                              std::string id) {
    TaskSample s;
    s.task = ds.task;
    s.dataset = ds.name;
    s.id = std::move(id);
    s.instruction = {tokens::phrasing[rng.index(spec.n_phrasings)], tokens::family[ds.task]};

    const std::size_t first = rng.index(spec.n_words);
    std::size_t second = rng.index(spec.n_words - 1);
    if (second >= first) {
        ++second;
    }
    std::vector<std::size_t> slots(spec.text_length);
    std::iota(slots.begin(), slots.end(), 0);
    std::shuffle(slots.begin(), slots.end(), rng.engine());
    std::array<std::size_t, kMentions> pos{std::min(slots[0], slots[1]), std::max(slots[0], slots[1])};
    s.text.resize(spec.text_length);
    for (std::size_t i = 0; i < spec.text_length; ++i) {
        s.text[i] = "f" + std::to_string(rng.index(spec.n_fillers));
    }
    s.text[pos[0]] = word_token(first);
    s.text[pos[1]] = word_token(second);
    if (rng.bernoulli(spec.visual_dependence)) {
        s.text[pos[rng.index(kMentions)]] = std::string(tokens::image);
    }
    for (std::size_t w : {first, second}) {
        std::vector<double> v = t.codebook[w];
        for (auto& x : v) {
            x += rng.normal(0.0, spec.visual_noise);
        }
        s.visual.push_back(std::move(v));
    }
    s.answer = gold_answer(t, ds.task, first, second);
    return s;
}

inline GeneratedSuite generate(const GeneratorSpec& spec) {
    spec.validate();
    GeneratedSuite suite;
    suite.spec = spec;
    suite.vocab = Vocabulary::build(spec.n_words, spec.n_fillers, spec.n_labels, spec.n_roles);
    suite.tables = make_tables(spec);
    for (const auto& ds : spec.datasets) {
        DatasetSplits splits;
        splits.spec = ds;
        const std::array<std::pair<std::string_view, std::size_t>, 3> plan{
            {{"train", ds.train}, {"dev", ds.dev}, {"test", ds.test}}};
        for (const auto& [split, count] : plan) {
            Rng rng(derive_seed(spec.seed, "data:" + ds.name + ":" + std::string(split)));
            auto& out = split == "train" ? splits.train : split == "dev" ? splits.dev : splits.test;
            out.reserve(count);
            for (std::size_t i = 0; i < count; ++i) {
                out.push_back(make_sample(spec, suite.tables, ds, rng, ds.name + "-" + std::string(split) + "-" +
                                                                            std::to_string(i)));
            }
        }
        suite.datasets.push_back(std::move(splits));
    }
    return suite;
}

// Answers a sample from the generator's tables. With `use_visual` false the
// <img> placeholder cannot be resolved and the guess `fallback_word` is used.
inline std::vector<std::string> lookup_oracle(const GeneratorTables& t, const TaskSample& s, bool use_visual = true,
                                              std::size_t fallback_word = 0) {
    std::vector<std::size_t> words;
    std::size_t mention = 0;
    for (const auto& tok : s.text) {
        if (classify_token(tok) == TokenClass::word) {
            words.push_back(static_cast<std::size_t>(std::stoul(tok.substr(1))));
            ++mention;
        } else if (tok == tokens::image) {
            if (!use_visual || mention >= s.visual.size()) {
                words.push_back(fallback_word);
            } else {
                const auto& v = s.visual[mention];
                std::size_t best = 0;
                double best_d = std::numeric_limits<double>::infinity();
                for (std::size_t w = 0; w < t.codebook.size(); ++w) {
                    double d = 0.0;
                    for (std::size_t j = 0; j < v.size(); ++j) {
                        d += (v[j] - t.codebook[w][j]) * (v[j] - t.codebook[w][j]);
                    }
                    if (d < best_d) {
                        best_d = d;
                        best = w;
                    }
                }
                words.push_back(best);
            }
            ++mention;
        }
    }
    if (words.size() != kMentions) {
        return {};
    }
    return gold_answer(t, s.task, words[0], words[1]);
}

// ---------------------------------------------------------------------------
// JSON-lines serialization

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::string to_json_line(const TaskSample& s) {
    using nlohmann::json;
    auto str_array = [](const std::vector<std::string>& v) { return json(v).dump(); };
    std::string out;
    out += "{\"schema\":" + json(std::string(kDatasetSchema)).dump();
    out += ",\"task\":" + std::to_string(s.task);
    out += ",\"dataset\":" + json(s.dataset).dump();
    out += ",\"instruction\":" + str_array(s.instruction);
    out += ",\"text\":" + str_array(s.text);
    out += ",\"visual\":[";
    for (std::size_t i = 0; i < s.visual.size(); ++i) {
        out += i ? ",[" : "[";
        for (std::size_t j = 0; j < s.visual[i].size(); ++j) {
            if (j) out += ",";
            out += format_double(s.visual[i][j]);
        }
        out += "]";
    }
    out += "],\"answer\":" + str_array(s.answer);
    out += ",\"id\":" + json(s.id).dump() + "}";
    return out;
}

inline TaskSample from_json_line(std::string_view line) {
    using nlohmann::json;
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        fail(ErrorCategory::data, std::string("malformed dataset line: ") + e.what());
    }
    try {
        require(j.value("schema", std::string()) == kDatasetSchema, ErrorCategory::data,
                "dataset line has schema '" + j.value("schema", std::string()) + "', expected " +
                    std::string(kDatasetSchema));
        TaskSample s;
        s.task = j.at("task").get<std::size_t>();
        s.dataset = j.at("dataset").get<std::string>();
        s.instruction = j.at("instruction").get<std::vector<std::string>>();
        s.text = j.at("text").get<std::vector<std::string>>();
        s.visual = j.at("visual").get<std::vector<std::vector<double>>>();
        s.answer = j.at("answer").get<std::vector<std::string>>();
        s.id = j.at("id").get<std::string>();
        return s;
    } catch (const json::exception& e) {
        fail(ErrorCategory::data, std::string("dataset line does not match the schema: ") + e.what());
    }
}

inline void write_jsonl(std::ostream& os, const std::vector<TaskSample>& samples) {
    for (const auto& s : samples) {
        os << to_json_line(s) << '\n';
    }
}

inline std::vector<TaskSample> read_jsonl(std::istream& is) {
    std::vector<TaskSample> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        out.push_back(from_json_line(line));
    }
    return out;
}

inline nlohmann::json tables_to_json(const GeneratorTables& t) {
    nlohmann::json j;
    j["labels"] = t.labels;
    j["roles"] = t.roles;
    j["conflicting"] = t.conflicting;
    j["codebook"] = t.codebook;
    return j;
}

inline GeneratorTables tables_from_json(const nlohmann::json& j) {
    GeneratorTables t;
    t.labels = j.at("labels").get<std::array<std::vector<std::size_t>, kFamilies>>();
    t.roles = j.at("roles").get<std::vector<std::size_t>>();
    t.conflicting = j.at("conflicting").get<std::vector<bool>>();
    t.codebook = j.at("codebook").get<std::vector<std::vector<double>>>();
    return t;
}

}  // namespace clorae
