// SPDX-License-Identifier: Apache-2.0
//
// clorae_cli: gen-data, train, eval, ablate, routing, params.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clorae/clorae.hpp"
#include "clorae/config.hpp"

namespace fs = std::filesystem;
using namespace clorae;

namespace {

struct Common {
    std::string config_file;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
};

void add_settings(CLI::App* app, Common& c) {
    app->add_option("--config", c.config_file, "key = value config file; flags override it");
    for (const auto& s : settings()) {
        c.options[s.key] = app->add_option("--" + s.key, c.values[s.key], s.help);
    }
}

RunConfig resolve(const Common& c) {
    RunConfig rc;
    if (!c.config_file.empty()) {
        apply_config_file(rc, c.config_file);
    }
    for (const auto& [key, opt] : c.options) {
        if (opt->count() > 0) {
            apply_setting(rc, key, c.values.at(key));
        }
    }
    return rc;
}

// Relative output paths resolve under $CLORAE_OUTPUT_ROOT when it is set.
std::string output_path(const std::string& p) {
    if (p.empty()) return p;
    const char* root = std::getenv("CLORAE_OUTPUT_ROOT");
    if (root == nullptr || *root == '\0' || fs::path(p).is_absolute()) return p;
    return (fs::path(root) / p).string();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), ErrorCategory::io, "cannot write " + path.string());
    os << text;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    for (const auto& x : config_detail::split_list(s)) out.push_back(config_detail::to_uint("seeds", x));
    return out;
}

std::unique_ptr<Seq2Seq> load_model(const std::string& checkpoint) {
    auto model = std::make_unique<Seq2Seq>(checkpoint_model_config(checkpoint));
    load_checkpoint(checkpoint, *model);
    return model;
}

int run(int argc, char** argv) {
    CLI::App app{"C-LoRAE: collaborative multi-LoRA experts on synthetic multimodal extraction tasks"};
    app.require_subcommand(1);
    bool as_json = false;
    app.add_flag("--json", as_json, "print JSON instead of a table");

    Common gen_c, train_c, eval_c, ablate_c, routing_c, params_c;
    std::string gen_out, checkpoint, split = "test", variants = "full,only_ulora,only_tlora,no_gate,no_aml,no_mim",
                                           seeds = "1,2,3";

    auto* gen = app.add_subcommand("gen-data", "generate a dataset suite as JSON lines");
    add_settings(gen, gen_c);
    gen->add_option("--out", gen_out, "destination directory")->required();

    auto* tr = app.add_subcommand("train", "train one model");
    add_settings(tr, train_c);

    auto* ev = app.add_subcommand("eval", "score a checkpoint on one split");
    add_settings(ev, eval_c);
    ev->add_option("--checkpoint", checkpoint, "checkpoint.bin")->required();
    ev->add_option("--split", split, "train | dev | test");

    auto* ab = app.add_subcommand("ablate", "train each variant over several seeds and compare");
    add_settings(ab, ablate_c);
    ab->add_option("--variants", variants, "comma list of variants");
    ab->add_option("--seeds", seeds, "comma list of seeds");

    auto* ro = app.add_subcommand("routing", "task-expert gate mass per layer group and task");
    add_settings(ro, routing_c);
    ro->add_option("--checkpoint", checkpoint, "checkpoint.bin")->required();
    ro->add_option("--split", split, "train | dev | test");

    auto* pa = app.add_subcommand("params", "trainable-parameter counts per variant");
    add_settings(pa, params_c);
    pa->add_option("--variants", variants, "comma list of variants");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_code(ErrorCategory::config);
    }

    if (gen->parsed()) {
        const RunConfig rc = resolve(gen_c);
        const auto suite = generate(generator_for(rc));
        const std::string dir = output_path(gen_out);
        write_suite(dir, suite);
        std::cout << "wrote " << suite.datasets.size() << " datasets to " << dir << '\n';
        return 0;
    }

    if (tr->parsed()) {
        RunConfig rc = resolve(train_c);
        rc.output_dir = output_path(rc.output_dir);
        const TaskData data = prepare_data(rc);
        if (!rc.output_dir.empty()) {
            fs::create_directories(rc.output_dir);
            write_text(fs::path(rc.output_dir) / "config.txt", dump_config(rc));
        }
        const auto result = train(rc, data);
        if (as_json) {
            std::cout << nlohmann::json{{"dev", report_to_json(result.dev)},
                                        {"test", report_to_json(result.test)},
                                        {"trainable", count_to_json(result.trainable)}}
                             .dump(1)
                      << '\n';
        } else {
            std::cout << "test split\n" << report_table(result.test);
            std::cout << "trainable parameters: " << result.trainable.total() << '\n';
        }
        return 0;
    }

    if (ev->parsed()) {
        const RunConfig rc = resolve(eval_c);
        const auto model = load_model(checkpoint);
        const TaskData data = prepare_data(rc);
        require(data.vocab.size() == model->config().vocab_size, ErrorCategory::manifest,
                "dataset vocabulary does not match the checkpoint");
        const auto enc = encode_data(data, model->config().d_model);
        const auto report = evaluate(*model, data, enc, split, rc.eval_group);
        std::cout << (as_json ? report_to_json(report).dump(1) + "\n" : report_table(report));
        return 0;
    }

    if (ab->parsed()) {
        RunConfig rc = resolve(ablate_c);
        rc.output_dir = output_path(rc.output_dir);
        const TaskData data = prepare_data(rc);
        const auto vs = config_detail::split_list(variants);
        const auto runs = run_ablation(rc, data, vs, parse_seeds(seeds));
        const auto sums = summarize(runs, vs);
        if (!rc.output_dir.empty()) {
            fs::create_directories(rc.output_dir);
            write_text(fs::path(rc.output_dir) / "ablation.json", ablation_to_json(runs, sums).dump(1) + "\n");
            write_text(fs::path(rc.output_dir) / "ablation.txt", ablation_table(sums));
        }
        std::cout << (as_json ? ablation_to_json(runs, sums).dump(1) + "\n" : ablation_table(sums));
        return 0;
    }

    if (ro->parsed()) {
        const RunConfig rc = resolve(routing_c);
        const auto model = load_model(checkpoint);
        const TaskData data = prepare_data(rc);
        require(data.vocab.size() == model->config().vocab_size, ErrorCategory::manifest,
                "dataset vocabulary does not match the checkpoint");
        const auto enc = encode_data(data, model->config().d_model);
        const auto stats = routing_pass(*model, enc, split, rc.eval_group);
        const auto entries = routing_report(stats, default_layer_groups(model->wrapped_count()));
        if (as_json) {
            std::cout << routing_to_json(entries).dump(1) << '\n';
        } else {
            std::cout << "group     task  task-expert  universal  tokens\n";
            for (const auto& e : entries) {
                std::cout << std::left << std::setw(10) << e.group << std::setw(6) << e.task_id << std::fixed
                          << std::setprecision(4) << std::setw(13) << e.task_proportion << std::setw(11)
                          << e.universal_proportion << e.tokens << '\n';
            }
        }
        return 0;
    }

    if (pa->parsed()) {
        const RunConfig rc = resolve(params_c);
        const auto vocab = Vocabulary::build(rc.data.n_words, rc.data.n_fillers, rc.data.n_labels, rc.data.n_roles);
        nlohmann::json out = nlohmann::json::array();
        for (const auto& v : config_detail::split_list(variants)) {
            RunConfig vc = rc;
            vc.ablation = parse_variant(v);
            const Seq2Seq model(resolve_model(vc, vocab.size()));
            const auto c = model.count_trainable();
            out.push_back({{"variant", v}, {"trainable", count_to_json(c)}});
            if (!as_json) {
                std::cout << std::left << std::setw(36) << v << " total " << std::setw(9) << c.total() << " lora "
                          << std::setw(8) << c.lora_matrices() << " gate " << std::setw(6) << c.gate << " mim "
                          << std::setw(7) << c.mim_heads << " embeddings " << c.embeddings << '\n';
            }
        }
        if (as_json) std::cout << out.dump(1) << '\n';
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error [" << category_name(e.category()) << "]: " << e.what() << '\n';
        return exit_code(e.category());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
