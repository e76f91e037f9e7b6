// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "clorae/config.hpp"
#include "helpers.hpp"

using namespace clorae;
using namespace clorae::testing;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

TaskData tiny_data(const RunConfig& rc) { return prepare_data(rc); }

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("clorae_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("zero epochs leaves the model at initialization", "[trainer]") {
    RunConfig rc = tiny_run();
    rc.epochs = 0;
    const TaskData data = tiny_data(rc);
    const auto result = train(rc, data);
    CHECK(result.metrics.empty());
    const Seq2Seq init(resolve_model(rc, data.vocab.size()));
    const auto& a = result.model->parameters().all();
    const auto& b = init.parameters().all();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(std::equal(a[i].tensor.values().begin(), a[i].tensor.values().end(), b[i].tensor.values().begin()));
    }
    const auto enc = encode_data(data, init.config().d_model);
    const auto baseline = evaluate(init, data, enc, "dev", rc.eval_group);
    CHECK(result.dev.macro_f1 == baseline.macro_f1);
}

TEST_CASE("the fully ablated model reproduces a vanilla LoRA run bitwise", "[trainer]") {
    RunConfig rc = tiny_run();
    rc.model.dropout = 0.1;
    const TaskData data = tiny_data(rc);
    rc.ablation = parse_variant("only_ulora+no_gate+no_aml+no_mim");
    const auto collapsed = train(rc, data);
    rc.ablation = parse_variant("vanilla+no_aml");
    const auto vanilla = train(rc, data);
    REQUIRE(collapsed.metrics.size() == 2);
    CHECK(collapsed.metrics == vanilla.metrics);
    CHECK(collapsed.trainable.lora_matrices() == vanilla.trainable.lora_matrices());
}

TEST_CASE("metrics lines carry weights that sum to one", "[trainer]") {
    RunConfig rc = tiny_run();
    rc.epochs = 3;
    const auto result = train(rc, tiny_data(rc));
    REQUIRE(result.metrics.size() == 3);
    for (std::size_t e = 0; e < 3; ++e) {
        const auto j = nlohmann::json::parse(result.metrics[e]);
        CHECK(j.at("epoch") == e);
        double total = 0.0;
        for (const auto& d : j.at("datasets")) {
            total += d.at("weight").get<double>();
            CHECK(d.at("dev_f1").get<double>() >= 0.0);
        }
        CHECK(total == Approx(1.0).epsilon(1e-12));
        if (e == 0) {
            for (const auto& d : j.at("datasets")) CHECK(d.at("weight").get<double>() == Approx(1.0 / 3.0).epsilon(1e-15));
        }
        CHECK(j.at("mim").is_number());
        CHECK(j.at("routing").size() == 3 * 3);
    }
}

TEST_CASE("without AML the weights stay uniform", "[trainer]") {
    RunConfig rc = tiny_run();
    rc.epochs = 3;
    rc.ablation = parse_variant("no_aml");
    const auto result = train(rc, tiny_data(rc));
    for (const auto& line : result.metrics) {
        for (const auto& d : nlohmann::json::parse(line).at("datasets")) {
            CHECK(d.at("weight").get<double>() == Approx(1.0 / 3.0).epsilon(1e-15));
        }
    }
}

TEST_CASE("learning rate halves at each decay boundary", "[trainer]") {
    RunConfig rc = tiny_run();
    rc.epochs = 5;
    rc.decay_every = 2;
    const auto result = train(rc, tiny_data(rc));
    const std::vector<double> expect{1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4};
    for (std::size_t e = 0; e < 5; ++e) {
        CHECK(nlohmann::json::parse(result.metrics[e]).at("learning_rate").get<double>() ==
              Approx(expect[e]).epsilon(1e-15));
    }
}

TEST_CASE("training is reproducible for a fixed seed", "[trainer]") {
    RunConfig rc = tiny_run();
    const TaskData data = tiny_data(rc);
    CHECK(train(rc, data).metrics == train(rc, data).metrics);
    RunConfig other = rc;
    other.seed = 2;
    CHECK(train(other, data).metrics != train(rc, data).metrics);
}

TEST_CASE("a one-sample dataset is learned to F1 one", "[trainer][slow]") {
    RunConfig rc = tiny_run();
    rc.epochs = 200;
    rc.decay_every = 0;
    rc.model.dropout = 0.0;
    const auto suite = generate(rc.data);
    TaskData data;
    data.vocab = suite.vocab;
    const auto& s = suite.datasets[2].train[0];
    data.datasets.push_back(DatasetData{"ee", 2, {s}, {s}, {s}});
    const auto result = train(rc, data);
    CHECK(result.dev.datasets[0].score.f1 == 1.0);
    CHECK(result.test.macro_f1 == 1.0);
}

TEST_CASE("divergent training is reported as a numeric error", "[trainer]") {
    RunConfig rc = tiny_run();
    rc.optimizer.learning_rate = 1e300;
    try {
        (void)train(rc, tiny_data(rc));
        FAIL("expected a numeric error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::numeric);
        CHECK(std::string(e.what()).find("first non-finite parameter") != std::string::npos);
    }
}

TEST_CASE("scoring oracle predictions and empty predictions", "[trainer][eval]") {
    RunConfig rc = tiny_run();
    const TaskData data = tiny_data(rc);
    REQUIRE(data.tables.has_value());
    std::vector<std::vector<std::vector<std::string>>> oracle, empty;
    for (const auto& d : data.datasets) {
        std::vector<std::vector<std::string>> o;
        for (const auto& s : d.test) o.push_back(lookup_oracle(*data.tables, s));
        oracle.push_back(o);
        empty.emplace_back(d.test.size());
    }
    const auto best = score_predictions(data, "test", oracle);
    CHECK(best.macro_f1 == 1.0);
    CHECK(best.all == 3.0);
    const auto worst = score_predictions(data, "test", empty);
    CHECK(worst.macro_f1 == 0.0);
    for (const auto& d : worst.datasets) CHECK(d.counts.predicted == 0);

    oracle[1] = empty[1];
    const auto mixed = score_predictions(data, "test", oracle);
    CHECK(mixed.all == Approx(2.0).epsilon(1e-15));
    CHECK(mixed.macro_f1 == Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(f1_gap(mixed) == 1.0);
}

TEST_CASE("epoch groups cover each training sample once, one task per group", "[trainer]") {
    RunConfig rc = tiny_run();
    rc.data.datasets = {{"ner", 0, 40, 4, 4}, {"re", 1, 10, 4, 4}, {"ee", 2, 20, 4, 4}};
    const TaskData data = tiny_data(rc);
    const auto enc = encode_data(data, 16);
    Rng rng(1);
    const auto groups = epoch_groups(enc, 4, rng);
    std::set<const EncodedSample*> seen;
    std::size_t total = 0;
    for (const auto& g : groups) {
        CHECK(g.size() <= 4);
        for (const auto* s : g) {
            CHECK(s->task == g.front()->task);
            CHECK(s->tokens.size() == g.front()->tokens.size());
            CHECK(s->answer.size() == g.front()->answer.size());
            seen.insert(s);
            ++total;
        }
    }
    CHECK(total == 70);
    CHECK(seen.size() == 70);
    // ner groups are spread across the epoch, not bunched at one end
    std::size_t first_half = 0, ner_groups = 0;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (groups[i].front()->dataset != 0) continue;
        ++ner_groups;
        if (2 * i < groups.size()) ++first_half;
    }
    CHECK(static_cast<double>(first_half) / static_cast<double>(ner_groups) == Approx(0.5).margin(0.15));
}

TEST_CASE("ablation flags resolve to the intended model", "[trainer]") {
    RunConfig rc = tiny_run();
    auto resolved = [&](const std::string& v) {
        RunConfig c = rc;
        c.ablation = parse_variant(v);
        return resolve_model(c, 30);
    };
    const auto ou = resolved("only_ulora");
    CHECK_FALSE(ou.task_experts);
    CHECK_FALSE(ou.learned_gate);
    CHECK(ou.fixed_universal_weight == 1.0);
    CHECK(ou.fixed_task_weight == 0.0);
    CHECK_FALSE(ou.mim_heads);
    const auto ot = resolved("only_tlora");
    CHECK_FALSE(ot.universal);
    CHECK(ot.learned_gate);
    const auto ng = resolved("no_gate");
    CHECK_FALSE(ng.learned_gate);
    CHECK(ng.fixed_universal_weight == 1.0);
    CHECK(ng.fixed_task_weight == 1.0);
    CHECK(ng.mim_heads);
    CHECK_FALSE(resolved("no_mim").mim_heads);
    CHECK(resolved("vanilla").adapter == AdapterKind::lora);
    CHECK_THROWS_AS(parse_variant("only_ulora+only_tlora"), Error);
    CHECK_THROWS_AS(parse_variant("bogus"), Error);

    RunConfig b = rc;
    b.ablation = parse_variant("no_mim");
    CHECK(effective_beta(b) == 0.0);
    CHECK(effective_beta(rc) == rc.beta);
}

TEST_CASE("trainable counts order the variants", "[trainer]") {
    RunConfig rc;
    auto count = [&](const std::string& v) {
        RunConfig c = rc;
        c.ablation = parse_variant(v);
        return Seq2Seq(resolve_model(c, 50)).count_trainable();
    };
    const auto full = count("full");
    const auto ou = count("only_ulora");
    const auto vanilla = count("vanilla");
    CHECK(full.lora_matrices() == 2 * ou.lora_matrices());
    CHECK(ou.lora_matrices() == vanilla.lora_matrices());
    CHECK(count("only_tlora").lora_matrices() == ou.lora_matrices());
    CHECK(count("no_mim").mim_heads == 0);
    CHECK(count("no_gate").gate == 0);
}

TEST_CASE("suites round-trip through a directory", "[trainer][io]") {
    RunConfig rc = tiny_run();
    const auto suite = generate(generator_for(rc));
    const auto dir = scratch_dir("suite");
    write_suite(dir, suite);
    const TaskData back = load_suite(dir);
    const TaskData direct = task_data_from_suite(suite);
    REQUIRE(back.datasets.size() == 3);
    CHECK(back.vocab.tokens() == direct.vocab.tokens());
    for (std::size_t m = 0; m < 3; ++m) {
        CHECK(back.datasets[m].train == direct.datasets[m].train);
        CHECK(back.datasets[m].test == direct.datasets[m].test);
    }
    REQUIRE(back.tables.has_value());
    CHECK(back.tables->labels == suite.tables.labels);

    fs::remove(dir / "re.dev.jsonl");
    try {
        (void)load_suite(dir);
        FAIL("expected an io error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::io);
    }
    fs::remove_all(dir);
}

TEST_CASE("training writes metrics, timing, checkpoint and report", "[trainer][io]") {
    RunConfig rc = tiny_run();
    rc.save_checkpoints = true;
    const auto dir = scratch_dir("run");
    rc.output_dir = dir.string();
    const auto result = train(rc, tiny_data(rc));
    for (const char* f : {"metrics.jsonl", "timing.jsonl", "checkpoint.bin", "report.json"}) {
        CHECK(fs::exists(dir / f));
    }
    Seq2Seq loaded(checkpoint_model_config((dir / "checkpoint.bin").string()));
    load_checkpoint((dir / "checkpoint.bin").string(), loaded);
    const auto& a = loaded.parameters().all();
    const auto& b = result.model->parameters().all();
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(std::equal(a[i].tensor.values().begin(), a[i].tensor.values().end(), b[i].tensor.values().begin()));
    }
    fs::remove_all(dir);
}

TEST_CASE("config text parsing, overrides and errors", "[trainer][config]") {
    std::istringstream text("# comment\n epochs = 7 \nlr=0.002 # trailing\n\nvariant = only_ulora+no_mim\n"
                            "datasets = a:0:10:2:2, b:2:5:1:1\nwrapped = q,k,v\n");
    RunConfig rc;
    for (const auto& [k, v] : parse_config_text(text)) apply_setting(rc, k, v);
    CHECK(rc.epochs == 7);
    CHECK(rc.optimizer.learning_rate == 0.002);
    CHECK(rc.ablation.only_ulora);
    CHECK(rc.ablation.no_mim);
    REQUIRE(rc.data.datasets.size() == 2);
    CHECK(rc.data.datasets[1].task == 2);
    CHECK(rc.model.wrapped == std::vector<std::string>{"q", "k", "v"});

    std::istringstream dumped(dump_config(rc));
    RunConfig again;
    for (const auto& [k, v] : parse_config_text(dumped)) apply_setting(again, k, v);
    CHECK(dump_config(again) == dump_config(rc));

    std::istringstream bad("epochs = 3\nthis line is wrong\n");
    try {
        (void)parse_config_text(bad);
        FAIL("expected a config error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::config);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    CHECK_THROWS_AS(apply_setting(rc, "no_such_key", "1"), Error);
    CHECK_THROWS_AS(apply_setting(rc, "epochs", "-3"), Error);
    CHECK_THROWS_AS(apply_setting(rc, "lr", "fast"), Error);
    CHECK_THROWS_AS(apply_setting(rc, "checkpoints", "maybe"), Error);
    CHECK_THROWS_AS(apply_setting(rc, "datasets", "a:0:1"), Error);
}

TEST_CASE("median and gap helpers", "[trainer]") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0}) == 2.5);
    CHECK_THROWS_AS(median({}), Error);
}
