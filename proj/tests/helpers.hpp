// SPDX-License-Identifier: Apache-2.0
//
// Small fixtures shared by the model, trainer and acceptance tests.
#pragma once

#include <vector>

#include "clorae/clorae.hpp"

namespace clorae::testing {

inline GeneratorSpec tiny_generator(std::size_t d_visual = 16, std::uint64_t seed = 3) {
    GeneratorSpec g;
    g.seed = seed;
    g.d_visual = d_visual;
    g.n_words = 8;
    g.n_fillers = 4;
    g.n_labels = 3;
    g.n_roles = 2;
    g.text_length = 4;
    g.datasets = {{"ner", 0, 24, 8, 8}, {"re", 1, 24, 8, 8}, {"ee", 2, 24, 8, 8}};
    return g;
}

inline ModelConfig tiny_model(std::size_t vocab_size, AdapterKind adapter = AdapterKind::clorae) {
    ModelConfig m;
    m.vocab_size = vocab_size;
    m.d_model = 16;
    m.n_heads = 2;
    m.encoder_layers = 1;
    m.decoder_layers = 1;
    m.d_ff = 32;
    m.max_length = 16;
    m.max_answer_length = 8;
    m.adapter = adapter;
    m.rank = 6;
    m.n_tasks = 3;
    m.alpha = 6.0;
    m.dropout = 0.0;
    return m;
}

// Tiny run: small generator, small model, few epochs.
inline RunConfig tiny_run() {
    RunConfig rc;
    rc.data = tiny_generator();
    rc.model = tiny_model(0);
    rc.epochs = 2;
    rc.group_size = 4;
    rc.groups_per_batch = 2;
    rc.eval_group = 16;
    rc.optimizer.learning_rate = 1e-3;
    rc.save_checkpoints = false;
    return rc;
}

// Gives every trainable tensor small random values.
inline void perturb_trainable(ParameterStore& store, std::uint64_t seed, double scale = 0.1) {
    Rng rng(seed);
    for (auto& p : store.all()) {
        if (p.frozen) continue;
        for (std::size_t i = 0; i < p.tensor.size(); ++i) p.tensor.data()[i] += rng.normal(0.0, scale);
    }
}

inline std::vector<const EncodedSample*> pointers(const std::vector<EncodedSample>& v) {
    std::vector<const EncodedSample*> out;
    for (const auto& s : v) out.push_back(&s);
    return out;
}

}  // namespace clorae::testing
