// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <map>
#include <set>
#include <sstream>

#include "clorae/taskgen.hpp"

using namespace clorae;
using Catch::Approx;

namespace {

GeneratorSpec small_spec(double kappa, std::uint64_t seed = 5) {
    GeneratorSpec s;
    s.seed = seed;
    s.conflict_rate = kappa;
    s.d_visual = 16;
    s.datasets = {{"ner", 0, 300, 60, 60}, {"re", 1, 300, 60, 60}, {"ee", 2, 300, 60, 60}};
    return s;
}

std::string serialize(const GeneratedSuite& suite) {
    std::ostringstream os;
    for (const auto& d : suite.datasets) {
        write_jsonl(os, d.train);
        write_jsonl(os, d.dev);
        write_jsonl(os, d.test);
    }
    return os.str();
}

// Word -> label table per family, read off the gold answers alone.
std::map<std::size_t, std::map<std::string, std::string>> observed_tables(const GeneratedSuite& suite) {
    std::map<std::size_t, std::map<std::string, std::string>> out;
    for (const auto& d : suite.datasets) {
        for (const auto& s : d.train) {
            for (const auto& r : parse_answer(s.answer).records) {
                auto [it, fresh] = out[s.task].emplace(r.slots[1], r.slots[0]);
                REQUIRE((fresh || it->second == r.slots[0]));
            }
        }
    }
    return out;
}

// Can one word -> label table explain both families?
bool single_table_fits(const std::map<std::string, std::string>& a, const std::map<std::string, std::string>& b) {
    for (const auto& [w, l] : a) {
        auto it = b.find(w);
        if (it != b.end() && it->second != l) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("same spec gives byte-identical datasets", "[taskgen]") {
    const auto a = generate(small_spec(0.7));
    const auto b = generate(small_spec(0.7));
    CHECK(serialize(a) == serialize(b));
    const auto c = generate(small_spec(0.7, 6));
    CHECK(serialize(a) != serialize(c));
}

TEST_CASE("generator rejects empty splits and unknown families", "[taskgen]") {
    auto s = small_spec(0.5);
    s.datasets[1].dev = 0;
    CHECK_THROWS_AS(generate(s), Error);
    s = small_spec(0.5);
    s.datasets[0].task = 3;
    CHECK_THROWS_AS(generate(s), Error);
    s = small_spec(1.5);
    CHECK_THROWS_AS(generate(s), Error);
}

TEST_CASE("kappa zero admits one mapping table for all families", "[taskgen]") {
    const auto t = observed_tables(generate(small_spec(0.0)));
    REQUIRE(t.size() == 3);
    CHECK(single_table_fits(t.at(0), t.at(1)));
    CHECK(single_table_fits(t.at(0), t.at(2)));
    CHECK(single_table_fits(t.at(1), t.at(2)));
}

TEST_CASE("kappa one admits no table shared by two families", "[taskgen]") {
    const auto t = observed_tables(generate(small_spec(1.0)));
    for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t b = a + 1; b < 3; ++b) {
            CHECK_FALSE(single_table_fits(t.at(a), t.at(b)));
            for (const auto& [w, l] : t.at(a)) {
                auto it = t.at(b).find(w);
                if (it != t.at(b).end()) CHECK(it->second != l);
            }
        }
    }
}

TEST_CASE("conflict fraction follows kappa", "[taskgen]") {
    for (double kappa : {0.0, 0.25, 0.5, 0.7, 1.0}) {
        const auto tables = make_tables(small_spec(kappa));
        std::size_t n = 0;
        for (std::size_t w = 0; w < tables.conflicting.size(); ++w) {
            if (tables.conflicting[w]) {
                ++n;
                CHECK(tables.labels[0][w] != tables.labels[1][w]);
                CHECK(tables.labels[0][w] != tables.labels[2][w]);
                CHECK(tables.labels[1][w] != tables.labels[2][w]);
            } else {
                CHECK(tables.labels[0][w] == tables.labels[1][w]);
                CHECK(tables.labels[1][w] == tables.labels[2][w]);
            }
        }
        CHECK(static_cast<double>(n) == Approx(kappa * 24.0).margin(0.5));
    }
}

TEST_CASE("f1 examples", "[taskgen][f1]") {
    const ExtractionRecord a{RecordKind::entity, {"L0", "w1"}};
    const ExtractionRecord b{RecordKind::entity, {"L2", "w3"}};
    const ExtractionRecord c{RecordKind::relation, {"L1", "w1", "w3"}};
    CHECK(f1({a, b}, {a, b}).f1 == 1.0);
    CHECK(f1({c}, {a, b}).f1 == 0.0);
    const auto half = f1({a}, {a, b});
    CHECK(half.precision == 1.0);
    CHECK(half.recall == 0.5);
    CHECK(half.f1 == Approx(0.6667).margin(5e-5));
    CHECK(f1({}, {a}).f1 == 0.0);
    CHECK(f1({a}, {}).f1 == 0.0);
    CHECK(f1({}, {}).f1 == 1.0);
    CHECK(f1({a, a}, {a}).precision == 0.5);
}

TEST_CASE("parser handles each record kind and the empty string", "[taskgen][parser]") {
    const auto two = parse_answer({"L0", "w1", ";", "L2", "w3", ";"});
    CHECK(two.records.size() == 2);
    CHECK(two.malformed_tokens == 0);
    CHECK(parse_answer({}).records.empty());
    const auto rel = parse_answer({"L1", "w2", "w3", ";"});
    REQUIRE(rel.records.size() == 1);
    CHECK(rel.records[0].kind == RecordKind::relation);
    const auto ev = parse_answer({"L1", "w2", "R0", "w4", ";", "<eos>", "junk"});
    REQUIRE(ev.records.size() == 1);
    CHECK(ev.records[0].kind == RecordKind::event);
    CHECK(ev.malformed_tokens == 0);
    const auto bad = parse_answer({"L0", "w1", ";", "w2", "L1", ";"});
    CHECK(bad.records.size() == 1);
    CHECK(bad.malformed_tokens == 3);
}

TEST_CASE("fuzzed token strings parse and re-serialize to valid answers", "[taskgen][parser][property]") {
    const auto vocab = Vocabulary::build(24, 16, 4, 3);
    Rng rng(77);
    for (int trial = 0; trial < 5000; ++trial) {
        std::vector<std::string> toks(rng.index(20));
        for (auto& t : toks) {
            // bias toward grammar tokens so long valid prefixes occur
            const std::size_t pick = rng.index(4);
            if (pick == 0) t = "L" + std::to_string(rng.index(5));
            else if (pick == 1) t = "w" + std::to_string(rng.index(30));
            else if (pick == 2) t = ";";
            else t = vocab.token(static_cast<std::int64_t>(rng.index(vocab.size())));
        }
        const auto parsed = parse_answer(toks);
        const auto again = serialize_records(parsed.records);
        const auto reparsed = parse_answer(again);
        CHECK(reparsed.malformed_tokens == 0);
        CHECK(reparsed.records == parsed.records);
        std::size_t eos = toks.size();
        for (std::size_t i = 0; i < toks.size(); ++i) {
            if (toks[i] == "<eos>") {
                eos = i;
                break;
            }
        }
        CHECK(again.size() + parsed.malformed_tokens == eos);
    }
}

TEST_CASE("gold answers round-trip through the grammar", "[taskgen][parser]") {
    const auto suite = generate(small_spec(0.7));
    for (const auto& d : suite.datasets) {
        for (const auto& s : d.test) {
            const auto p = parse_answer(s.answer);
            CHECK(p.malformed_tokens == 0);
            CHECK(serialize_records(p.records) == s.answer);
            CHECK(p.records.size() == (s.task == 0 ? 2u : 1u));
        }
    }
}

TEST_CASE("lookup oracle scores F1 of one on every split for every kappa", "[taskgen][property]") {
    for (double kappa : {0.0, 0.3, 0.7, 1.0}) {
        auto spec = small_spec(kappa);
        spec.visual_dependence = 0.5;
        const auto suite = generate(spec);
        for (const auto& d : suite.datasets) {
            for (const char* split : {"train", "dev", "test"}) {
                F1Counts c;
                for (const auto& s : d.split(split)) {
                    c += match_records(parse_answer(lookup_oracle(suite.tables, s)).records,
                                       parse_answer(s.answer).records);
                }
                INFO(d.spec.name << " " << split << " kappa " << kappa);
                CHECK(score(c).f1 == 1.0);
            }
        }
    }
}

TEST_CASE("sample ids never repeat across splits", "[taskgen]") {
    const auto suite = generate(small_spec(0.7));
    std::set<std::string> ids;
    std::size_t total = 0;
    for (const auto& d : suite.datasets) {
        for (const char* split : {"train", "dev", "test"}) {
            for (const auto& s : d.split(split)) {
                ids.insert(s.id);
                ++total;
            }
        }
    }
    CHECK(ids.size() == total);
}

TEST_CASE("a text-only oracle fails on records whose word is hidden", "[taskgen][property]") {
    auto spec = small_spec(0.7);
    spec.visual_dependence = 0.3;
    spec.datasets = {{"ner", 0, 2000, 10, 10}, {"re", 1, 2000, 10, 10}, {"ee", 2, 2000, 10, 10}};
    const auto suite = generate(spec);
    std::size_t records = 0, hidden = 0, samples = 0, with_image = 0;
    F1Counts text_only;
    for (const auto& d : suite.datasets) {
        for (const auto& s : d.train) {
            ++samples;
            const bool img = std::find(s.text.begin(), s.text.end(), "<img>") != s.text.end();
            const auto gold = parse_answer(s.answer).records;
            records += gold.size();
            if (img) {
                ++with_image;
                ++hidden;  // exactly one record names the hidden word
            }
            const auto guess = parse_answer(lookup_oracle(suite.tables, s, false)).records;
            if (!img) CHECK(f1(guess, gold).f1 == 1.0);
            text_only += match_records(guess, gold);
        }
    }
    const double v = static_cast<double>(with_image) / static_cast<double>(samples);
    CHECK(v == Approx(0.3).margin(0.03));
    const double chance = 1.0 / 24.0;
    const double ceiling = 1.0 - static_cast<double>(hidden) / static_cast<double>(records) * (1.0 - chance);
    CHECK(score(text_only).f1 <= ceiling + 0.01);
    CHECK(score(text_only).f1 < 1.0);
}

TEST_CASE("every sample token is in the vocabulary", "[taskgen]") {
    const auto suite = generate(small_spec(0.7));
    for (const auto& d : suite.datasets) {
        for (const auto& s : d.train) {
            for (const auto* seq : {&s.instruction, &s.text, &s.answer}) {
                for (const auto& t : *seq) CHECK(suite.vocab.find(t).has_value());
            }
            CHECK(s.visual.size() == 2);
            CHECK(s.visual[0].size() == 16);
        }
    }
    CHECK(suite.vocab.token(0) == "<pad>");
    CHECK(suite.vocab.id("<eos>") == 2);
    CHECK_THROWS_AS(suite.vocab.id("nope"), Error);
}

TEST_CASE("JSON lines round-trip bit-exactly", "[taskgen][io]") {
    const auto suite = generate(small_spec(0.7));
    std::stringstream ss;
    write_jsonl(ss, suite.datasets[2].dev);
    const std::string bytes = ss.str();
    const auto back = read_jsonl(ss);
    CHECK(back == suite.datasets[2].dev);
    std::ostringstream again;
    write_jsonl(again, back);
    CHECK(again.str() == bytes);

    const auto tables = tables_from_json(tables_to_json(suite.tables));
    CHECK(tables.labels == suite.tables.labels);
    CHECK(tables.codebook == suite.tables.codebook);
    CHECK(bytes.find("\"schema\":\"clorae-mie/1\"") != std::string::npos);
}

TEST_CASE("malformed or foreign dataset lines raise data errors", "[taskgen][io]") {
    auto category = [](const std::string& line) {
        try {
            (void)from_json_line(line);
        } catch (const Error& e) {
            return e.category();
        }
        return ErrorCategory::contract;
    };
    CHECK(category("{not json") == ErrorCategory::data);
    CHECK(category(R"({"schema":"other/2","task":0})") == ErrorCategory::data);
    CHECK(category(R"({"schema":"clorae-mie/1","task":"x"})") == ErrorCategory::data);
}
