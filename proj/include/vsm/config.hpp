#pragma once

#include <string>

#include "json.hpp"
#include "vsm/errors.hpp"

namespace vsm {

enum class GateMode { none, per_layer, shared };
enum class CaSharing { none, kv, qkv };

inline std::string to_string(GateMode m) {
    switch (m) {
        case GateMode::none: return "none";
        case GateMode::per_layer: return "per_layer";
        default: return "shared";
    }
}

inline std::string to_string(CaSharing s) {
    switch (s) {
        case CaSharing::none: return "none";
        case CaSharing::kv: return "kv";
        default: return "qkv";
    }
}

inline GateMode gate_mode_from(const std::string& s) {
    if (s == "none") return GateMode::none;
    if (s == "per_layer") return GateMode::per_layer;
    if (s == "shared") return GateMode::shared;
    throw ConfigError("unknown gate mode '" + s + "'");
}

inline CaSharing ca_sharing_from(const std::string& s) {
    if (s == "none") return CaSharing::none;
    if (s == "kv") return CaSharing::kv;
    if (s == "qkv") return CaSharing::qkv;
    throw ConfigError("unknown cross-attention sharing '" + s + "'");
}

struct ModelConfig {
    size_t d_model = 128;
    size_t n_layers = 4;
    size_t n_heads = 4;
    size_t ffn_mult = 4;
    size_t q_levels = 4;
    size_t depth_layers = 2;
    size_t depth_heads = 4;
    int text_vocab = 512;
    int audio_vocab = 64;
    size_t max_context = 512;
    size_t patch = 8;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;

    void validate() const {
        if (d_model % n_heads != 0) throw ConfigError("d_model not divisible by n_heads");
        if (d_model % (2 * n_heads) != 0) throw ConfigError("head dim must be even for rotary positions");
        if (d_model % 4 != 0) throw ConfigError("d_model must be divisible by 4");
        if (q_levels < 2) throw ConfigError("q_levels must be at least 2");
        if (depth_layers < 1) throw ConfigError("depth transformer needs a layer");
        if (d_model % depth_heads != 0) throw ConfigError("d_model not divisible by depth_heads");
        if (text_vocab < 8 || audio_vocab < 2) throw ConfigError("vocab too small");
        if (max_context < 2) throw ConfigError("max_context too small");
    }
};

struct AdapterConfig {
    GateMode gate_mode = GateMode::per_layer;
    CaSharing ca_sharing = CaSharing::qkv;
    size_t gate_reduction = 8;

    void validate() const {
        if (gate_reduction < 1) throw ConfigError("gate_reduction must be >= 1");
    }
};

// The 3x3 gate/sharing ablation grid collapses to 7 runnable cells: the
// ungated row pairs with every sharing mode, the gated rows only with the
// shared-projection modes.
inline std::vector<AdapterConfig> ablation_cells() {
    std::vector<AdapterConfig> cells;
    for (CaSharing s : {CaSharing::none, CaSharing::kv, CaSharing::qkv})
        cells.push_back({GateMode::none, s, 8});
    for (GateMode gm : {GateMode::per_layer, GateMode::shared})
        for (CaSharing s : {CaSharing::kv, CaSharing::qkv}) cells.push_back({gm, s, 8});
    return cells;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"d_model", c.d_model},       {"n_layers", c.n_layers},
         {"n_heads", c.n_heads},       {"ffn_mult", c.ffn_mult},
         {"q_levels", c.q_levels},     {"depth_layers", c.depth_layers},
         {"depth_heads", c.depth_heads},
         {"text_vocab", c.text_vocab}, {"audio_vocab", c.audio_vocab},
         {"max_context", c.max_context}, {"patch", c.patch},
         {"rope_base", c.rope_base},   {"norm_eps", c.norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.d_model = j.value("d_model", d.d_model);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
    c.q_levels = j.value("q_levels", d.q_levels);
    c.depth_layers = j.value("depth_layers", d.depth_layers);
    c.depth_heads = j.value("depth_heads", d.depth_heads);
    c.text_vocab = j.value("text_vocab", d.text_vocab);
    c.audio_vocab = j.value("audio_vocab", d.audio_vocab);
    c.max_context = j.value("max_context", d.max_context);
    c.patch = j.value("patch", d.patch);
    c.rope_base = j.value("rope_base", d.rope_base);
    c.norm_eps = j.value("norm_eps", d.norm_eps);
}

inline void to_json(nlohmann::json& j, const AdapterConfig& c) {
    j = {{"gate_mode", to_string(c.gate_mode)},
         {"ca_sharing", to_string(c.ca_sharing)},
         {"gate_reduction", c.gate_reduction}};
}

inline void from_json(const nlohmann::json& j, AdapterConfig& c) {
    AdapterConfig d;
    c.gate_mode = gate_mode_from(j.value("gate_mode", to_string(d.gate_mode)));
    c.ca_sharing = ca_sharing_from(j.value("ca_sharing", to_string(d.ca_sharing)));
    c.gate_reduction = j.value("gate_reduction", d.gate_reduction);
}

}  // namespace vsm
