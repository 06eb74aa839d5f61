#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tealab/components.hpp"

namespace tealab {

/// Checkpoint layout: `manifest.json` describing the architecture and the
/// parameter list, next to `params.bin` holding the raw little-endian
/// 64-bit-float arrays concatenated in manifest order.

namespace detail {

inline std::uint64_t to_little_endian_bits(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap64(bits);
    }
    return bits;
}

inline double from_little_endian_bits(std::uint64_t bits) {
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap64(bits);
    }
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

inline nlohmann::json arch_to_json(const ArchitectureSpec& spec) {
    nlohmann::json j;
    j["kind"] = arch_name(spec.kind);
    j["model"] = spec.model == ModelType::Linear ? "linear" : "gru";
    j["dims"] = {{"static_dim", spec.dims.static_dim},
                 {"temporal_x", spec.dims.temporal_x},
                 {"temporal_y", spec.dims.temporal_y},
                 {"window_x", spec.dims.window_x},
                 {"window_y", spec.dims.window_y}};
    j["latent_dim"] = spec.latent_dim;
    j["gru_layers"] = spec.gru_layers;
    std::string kinds;
    for (VarKind k : spec.target_row_kinds) kinds += k == VarKind::Binary ? 'b' : 'c';
    j["target_row_kinds"] = kinds;
    return j;
}

inline ArchKind arch_from_name(const std::string& s) {
    if (s == "Base") return ArchKind::Base;
    if (s == "Reg") return ArchKind::Reg;
    if (s == "FEA") return ArchKind::Fea;
    if (s == "TEA") return ArchKind::Tea;
    if (s == "FTEA") return ArchKind::Ftea;
    throw IoError("checkpoint: unknown architecture kind '" + s + "'");
}

inline ArchitectureSpec arch_from_json(const nlohmann::json& j) {
    ArchitectureSpec spec;
    spec.kind = arch_from_name(j.at("kind").get<std::string>());
    spec.model = j.at("model").get<std::string>() == "gru" ? ModelType::Gru : ModelType::Linear;
    const auto& d = j.at("dims");
    spec.dims.static_dim = d.at("static_dim").get<std::size_t>();
    spec.dims.temporal_x = d.at("temporal_x").get<std::size_t>();
    spec.dims.temporal_y = d.at("temporal_y").get<std::size_t>();
    spec.dims.window_x = d.at("window_x").get<std::size_t>();
    spec.dims.window_y = d.at("window_y").get<std::size_t>();
    spec.latent_dim = j.at("latent_dim").get<std::size_t>();
    spec.gru_layers = j.at("gru_layers").get<int>();
    for (char c : j.at("target_row_kinds").get<std::string>()) {
        spec.target_row_kinds.push_back(c == 'b' ? VarKind::Binary : VarKind::Continuous);
    }
    return spec;
}

} // namespace detail

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::string stage_reached; // e.g. "stage3" or "direct"
};

inline void save_checkpoint(const ComponentSet& cs, const std::filesystem::path& dir,
                            const CheckpointMeta& meta) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    nlohmann::json manifest;
    manifest["architecture"] = detail::arch_to_json(cs.spec());
    manifest["seed"] = meta.seed;
    manifest["stage_reached"] = meta.stage_reached;
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& p : cs.params()) {
        plist.push_back({{"name", p.name},
                         {"group", p.group},
                         {"shape", p.node->value.shape()}});
    }
    manifest["parameters"] = plist;

    {
        std::ofstream f(dir / "manifest.json");
        if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
        f << manifest.dump(2) << "\n";
    }
    std::ofstream bin(dir / "params.bin", std::ios::binary);
    if (!bin) throw IoError("cannot write " + (dir / "params.bin").string());
    for (const auto& p : cs.params()) {
        for (std::size_t i = 0; i < p.node->value.size(); ++i) {
            const std::uint64_t bits = detail::to_little_endian_bits(p.node->value[i]);
            bin.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
        }
    }
    if (!bin) throw IoError("short write to " + (dir / "params.bin").string());
}

inline ComponentSet load_checkpoint(const std::filesystem::path& dir,
                                    CheckpointMeta* meta_out = nullptr) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw IoError("cannot read " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        f >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest: " + std::string(e.what()));
    }
    ArchitectureSpec spec = detail::arch_from_json(manifest.at("architecture"));
    const std::uint64_t seed = manifest.at("seed").get<std::uint64_t>();
    if (meta_out) {
        meta_out->seed = seed;
        meta_out->stage_reached = manifest.at("stage_reached").get<std::string>();
    }

    std::ifstream bin(dir / "params.bin", std::ios::binary);
    if (!bin) throw IoError("cannot read " + (dir / "params.bin").string());
    std::vector<ComponentSet::Param> params;
    for (const auto& pj : manifest.at("parameters")) {
        const auto shape = pj.at("shape").get<std::vector<std::size_t>>();
        Tensor t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t bits;
            bin.read(reinterpret_cast<char*>(&bits), sizeof(bits));
            if (!bin) throw IoError("truncated params.bin in " + dir.string());
            t[i] = detail::from_little_endian_bits(bits);
        }
        params.push_back({pj.at("name").get<std::string>(),
                          pj.at("group").get<std::string>(), leaf(std::move(t))});
    }
    return component_set_from_params(spec, seed, std::move(params));
}

} // namespace tealab
