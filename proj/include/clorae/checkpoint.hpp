// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint: a manifest describing the model followed by a flat map
// from qualified parameter name to shape and little-endian f64 payload.
//
//   "CLORAECK" | u32 version | u64 manifest bytes | manifest JSON
//   u64 entries | per entry: u32 name bytes | name | u64 rows | u64 cols | f64[rows*cols]

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clorae/errors.hpp"
#include "clorae/model.hpp"

namespace clorae {

inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'O', 'R', 'A', 'E', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size},
                          {"d_model", c.d_model},
                          {"n_heads", c.n_heads},
                          {"encoder_layers", c.encoder_layers},
                          {"decoder_layers", c.decoder_layers},
                          {"d_ff", c.d_ff},
                          {"max_length", c.max_length},
                          {"max_answer_length", c.max_answer_length},
                          {"adapter", adapter_name(c.adapter)},
                          {"r", c.rank},
                          {"N", c.n_tasks},
                          {"alpha", c.alpha},
                          {"dropout", c.dropout},
                          {"wrapped", c.wrapped},
                          {"universal", c.universal},
                          {"task_experts", c.task_experts},
                          {"learned_gate", c.learned_gate},
                          {"fixed_universal_weight", c.fixed_universal_weight},
                          {"fixed_task_weight", c.fixed_task_weight},
                          {"mim_heads", c.mim_heads},
                          {"tune_embeddings", c.tune_embeddings},
                          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.encoder_layers = j.at("encoder_layers").get<std::size_t>();
        c.decoder_layers = j.at("decoder_layers").get<std::size_t>();
        c.d_ff = j.at("d_ff").get<std::size_t>();
        c.max_length = j.at("max_length").get<std::size_t>();
        c.max_answer_length = j.at("max_answer_length").get<std::size_t>();
        c.adapter = parse_adapter(j.at("adapter").get<std::string>());
        c.rank = j.at("r").get<std::size_t>();
        c.n_tasks = j.at("N").get<std::size_t>();
        c.alpha = j.at("alpha").get<double>();
        c.dropout = j.at("dropout").get<double>();
        c.wrapped = j.at("wrapped").get<std::vector<std::string>>();
        c.universal = j.at("universal").get<bool>();
        c.task_experts = j.at("task_experts").get<bool>();
        c.learned_gate = j.at("learned_gate").get<bool>();
        c.fixed_universal_weight = j.at("fixed_universal_weight").get<double>();
        c.fixed_task_weight = j.at("fixed_task_weight").get<double>();
        c.mim_heads = j.at("mim_heads").get<bool>();
        c.tune_embeddings = j.at("tune_embeddings").get<bool>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCategory::manifest, std::string("checkpoint manifest is incomplete: ") + e.what());
    }
}

inline nlohmann::json checkpoint_manifest(const Seq2Seq& model) {
    nlohmann::json m;
    m["model"] = model_config_to_json(model.config());
    m["wrapped_layers"] = model.wrapped_names();
    return m;
}

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    const U bits = std::bit_cast<U>(v);
    unsigned char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    }
    os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename T>
T get_le(std::istream& is) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    unsigned char bytes[sizeof(U)];
    is.read(reinterpret_cast<char*>(bytes), sizeof(U));
    require(static_cast<bool>(is), ErrorCategory::manifest, "checkpoint is truncated");
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        bits |= static_cast<U>(bytes[i]) << (8 * i);
    }
    return std::bit_cast<T>(bits);
}

inline std::string get_bytes(std::istream& is, std::uint64_t n) {
    require(n < (1ULL << 32), ErrorCategory::manifest, "checkpoint field length is implausible");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    require(static_cast<bool>(is), ErrorCategory::manifest, "checkpoint is truncated");
    return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Seq2Seq& model) {
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    const std::string manifest = checkpoint_manifest(model).dump();
    detail::put_le<std::uint64_t>(os, manifest.size());
    os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    const auto& params = model.parameters().all();
    detail::put_le<std::uint64_t>(os, params.size());
    for (const auto& p : params) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::put_le<std::uint64_t>(os, p.tensor.rows());
        detail::put_le<std::uint64_t>(os, p.tensor.cols());
        for (double v : p.tensor.values()) {
            detail::put_le<double>(os, v);
        }
    }
}

inline void save_checkpoint(const std::string& path, const Seq2Seq& model) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), ErrorCategory::io, "cannot write checkpoint " + path);
    write_checkpoint(os, model);
    require(static_cast<bool>(os), ErrorCategory::io, "failed writing checkpoint " + path);
}

// Reads the manifest only, so a caller can build a matching model.
inline nlohmann::json read_checkpoint_manifest(std::istream& is) {
    char magic[sizeof(kCheckpointMagic)];
    is.read(magic, sizeof(magic));
    require(static_cast<bool>(is) && std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0, ErrorCategory::manifest,
            "not a checkpoint file");
    const auto version = detail::get_le<std::uint32_t>(is);
    require(version == kCheckpointVersion, ErrorCategory::manifest,
            "unsupported checkpoint version " + std::to_string(version));
    const auto n = detail::get_le<std::uint64_t>(is);
    try {
        return nlohmann::json::parse(detail::get_bytes(is, n));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCategory::manifest, std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }
}

// Loads values into `model`; the manifest and every name and shape must match.
inline void read_checkpoint(std::istream& is, Seq2Seq& model) {
    const auto manifest = read_checkpoint_manifest(is);
    const auto expected = checkpoint_manifest(model);
    require(manifest == expected, ErrorCategory::manifest,
            "checkpoint manifest " + manifest.dump() + " does not match model " + expected.dump());
    auto& params = model.parameters().all();
    const auto entries = detail::get_le<std::uint64_t>(is);
    require(entries == params.size(), ErrorCategory::manifest,
            "checkpoint holds " + std::to_string(entries) + " tensors, model has " + std::to_string(params.size()));
    for (auto& p : params) {
        const auto len = detail::get_le<std::uint32_t>(is);
        const std::string name = detail::get_bytes(is, len);
        require(name == p.name, ErrorCategory::manifest, "checkpoint tensor '" + name + "' where '" + p.name + "' expected");
        const auto rows = detail::get_le<std::uint64_t>(is);
        const auto cols = detail::get_le<std::uint64_t>(is);
        require(rows == p.tensor.rows() && cols == p.tensor.cols(), ErrorCategory::manifest,
                "checkpoint tensor '" + name + "' has shape " + shape_string(rows, cols) + ", model expects " +
                    p.tensor.shape_str());
        double* dst = p.tensor.data();
        for (std::size_t i = 0; i < p.tensor.size(); ++i) {
            dst[i] = detail::get_le<double>(is);
        }
    }
}

inline void load_checkpoint(const std::string& path, Seq2Seq& model) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorCategory::io, "cannot open checkpoint " + path);
    read_checkpoint(is, model);
}

inline ModelConfig checkpoint_model_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorCategory::io, "cannot open checkpoint " + path);
    const auto manifest = read_checkpoint_manifest(is);
    require(manifest.contains("model"), ErrorCategory::manifest, "checkpoint manifest has no model section");
    return model_config_from_json(manifest.at("model"));
}

}  // namespace clorae
