// Checkpoint and report serialization.
//
// Checkpoints are a JSON manifest (architecture, normalization metadata,
// seed, tensor shapes) followed by the raw little-endian doubles of every
// parameter in registry order; load is bit-exact. Reports are JSON with a
// schema_version field; loaders reject unknown major versions.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cotmap/networks.hpp"

namespace cotmap {

using json = nlohmann::json;

inline constexpr const char* kSchemaVersion = "1.0";
inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'T', 'M', 'C', 'K', 'P', 'T'};

inline json arch_to_json(const ArchConfig& a) {
    return json{{"input_dim", a.input_dim},
                {"noise_dim", a.noise_dim},
                {"hidden", a.hidden},
                {"t_encoder_blocks", a.t_encoder_blocks},
                {"t_decoder_blocks", a.t_decoder_blocks},
                {"t_latent", a.t_latent},
                {"t_cond_latent", a.t_cond_latent},
                {"f_encoder_blocks", a.f_encoder_blocks},
                {"f_decoder_blocks", a.f_decoder_blocks},
                {"f_latent", a.f_latent},
                {"f_cond_latent", a.f_cond_latent},
                {"conditioning", to_string(a.conditioning)},
                {"n_categories", a.n_categories},
                {"continuous_condition", a.continuous_condition},
                {"cont_encoding", to_string(a.cont_encoding)},
                {"cond_dim", a.cond_dim},
                {"enc_dim", a.enc_dim},
                {"cond_hidden", a.cond_hidden},
                {"hyper_hidden", a.hyper_hidden},
                {"fourier_sigma", a.fourier_sigma},
                {"shared_embeddings", a.shared_embeddings},
                {"resblock_alpha", a.resblock_alpha}};
}

inline ArchConfig arch_from_json(const json& j) {
    ArchConfig a;
    a.input_dim = j.at("input_dim").get<std::size_t>();
    a.noise_dim = j.at("noise_dim").get<std::size_t>();
    a.hidden = j.at("hidden").get<std::size_t>();
    a.t_encoder_blocks = j.at("t_encoder_blocks").get<std::size_t>();
    a.t_decoder_blocks = j.at("t_decoder_blocks").get<std::size_t>();
    a.t_latent = j.at("t_latent").get<std::size_t>();
    a.t_cond_latent = j.at("t_cond_latent").get<std::size_t>();
    a.f_encoder_blocks = j.at("f_encoder_blocks").get<std::size_t>();
    a.f_decoder_blocks = j.at("f_decoder_blocks").get<std::size_t>();
    a.f_latent = j.at("f_latent").get<std::size_t>();
    a.f_cond_latent = j.at("f_cond_latent").get<std::size_t>();
    a.conditioning = cond_kind_from(j.at("conditioning").get<std::string>());
    a.n_categories = j.at("n_categories").get<std::size_t>();
    a.continuous_condition = j.at("continuous_condition").get<bool>();
    a.cont_encoding = cont_encoding_from(j.at("cont_encoding").get<std::string>());
    a.cond_dim = j.at("cond_dim").get<std::size_t>();
    a.enc_dim = j.at("enc_dim").get<std::size_t>();
    a.cond_hidden = j.at("cond_hidden").get<std::size_t>();
    a.hyper_hidden = j.at("hyper_hidden").get<std::size_t>();
    a.fourier_sigma = j.at("fourier_sigma").get<double>();
    a.shared_embeddings = j.at("shared_embeddings").get<bool>();
    a.resblock_alpha = j.at("resblock_alpha").get<double>();
    return a;
}

inline void save_checkpoint(const std::filesystem::path& path, Model& model) {
    auto params = model.all_params();
    json manifest;
    manifest["schema_version"] = kSchemaVersion;
    manifest["arch"] = arch_to_json(model.arch);
    manifest["normalization"] = {{"lo", model.normalization.lo}, {"hi", model.normalization.hi}};
    manifest["seed"] = model.init_seed;
    json shapes = json::array();
    for (auto* p : params) shapes.push_back(p->shape());
    manifest["tensors"] = shapes;
    if (model.arch.conditioning != CondKind::none) {
        // frozen fourier frequencies travel with the checkpoint
        manifest["fourier_freqs_t"] = model.transport.cond.encoder.fourier_freqs;
        manifest["fourier_freqs_f"] = model.critic.cond.encoder.fourier_freqs;
    }
    const std::string text = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (auto* p : params)
        out.write(reinterpret_cast<const char*>(p->data()),
                  static_cast<std::streamsize>(p->numel() * sizeof(double)));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw std::runtime_error("load_checkpoint: not a checkpoint file: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const json manifest = json::parse(text);

    const std::string version = manifest.at("schema_version").get<std::string>();
    if (version.substr(0, version.find('.')) != std::string(kSchemaVersion).substr(0, 1))
        throw std::runtime_error("load_checkpoint: unsupported schema version " + version);

    ArchConfig arch = arch_from_json(manifest.at("arch"));
    const std::uint64_t seed = manifest.at("seed").get<std::uint64_t>();
    Rng rng(seed);
    Model model = Model::init(arch, rng);
    model.normalization.lo = manifest.at("normalization").at("lo").get<double>();
    model.normalization.hi = manifest.at("normalization").at("hi").get<double>();
    if (manifest.contains("fourier_freqs_t")) {
        model.transport.cond.encoder.fourier_freqs =
            manifest.at("fourier_freqs_t").get<std::vector<double>>();
        model.critic.cond.encoder.fourier_freqs =
            manifest.at("fourier_freqs_f").get<std::vector<double>>();
    }

    auto params = model.all_params();
    const auto shapes = manifest.at("tensors");
    if (shapes.size() != params.size())
        throw std::runtime_error("load_checkpoint: tensor count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto shape = shapes[i].get<Shape>();
        if (shape != params[i]->shape())
            throw std::runtime_error("load_checkpoint: tensor " + std::to_string(i) +
                                     " shape mismatch");
        in.read(reinterpret_cast<char*>(params[i]->data()),
                static_cast<std::streamsize>(params[i]->numel() * sizeof(double)));
    }
    if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path.string());
    return model;
}

inline void write_report(const std::filesystem::path& path, json payload) {
    payload["schema_version"] = kSchemaVersion;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_report: cannot open " + path.string());
    out << payload.dump(2) << "\n";
}

inline json load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_report: cannot open " + path.string());
    json j = json::parse(in);
    const std::string version = j.at("schema_version").get<std::string>();
    if (version.substr(0, version.find('.')) != std::string(kSchemaVersion).substr(0, 1))
        throw std::runtime_error("load_report: unsupported schema version " + version);
    return j;
}

} // namespace cotmap
