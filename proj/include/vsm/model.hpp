#pragma once

#include <atomic>
#include <string>
#include <vector>

#include "vsm/config.hpp"
#include "vsm/graph.hpp"
#include "vsm/rng.hpp"
#include "vsm/streams.hpp"
#include "vsm/vision.hpp"

namespace vsm {

template <typename To, typename From>
inline Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out(t.shape());
    for (size_t i = 0; i < t.size(); ++i) out.at(i) = To(t.at(i));
    return out;
}

// The full parameter set: frozen backbone (embeddings, self-attention, FFN,
// heads, depth transformer) plus the trainable adapters (cross-attention
// projections, their norms, and the gates). Weight init is keyed on the
// parameter name, so the backbone is identical across adapter configs for a
// given seed.
template <typename T>
class Model {
public:
    Model(ModelConfig cfg, AdapterConfig adapter, uint64_t seed)
        : cfg(cfg), adapter(adapter), seed(seed) {
        cfg.validate();
        adapter.validate();
        build();
        vision = PatchEncoder::init(cfg.d_model, cfg.patch, Rng(seed).split("vision"));
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    ModelConfig cfg;
    AdapterConfig adapter;
    uint64_t seed;
    ParamStore<T> params;
    PatchEncoder vision;  // frozen, kept outside the differentiable store

    size_t head_dim() const { return cfg.d_model / cfg.n_heads; }
    size_t gate_hidden() const { return std::max<size_t>(1, cfg.d_model / adapter.gate_reduction); }

    // --- parameter names ----------------------------------------------------

    static std::string layer_prefix(size_t l) { return "layers." + std::to_string(l) + "."; }

    std::string ca_wq_name(size_t l) const {
        return adapter.ca_sharing == CaSharing::qkv ? "ca.wq" : layer_prefix(l) + "ca.wq";
    }
    std::string ca_wk_name(size_t l) const {
        return adapter.ca_sharing == CaSharing::none ? layer_prefix(l) + "ca.wk" : "ca.wk";
    }
    std::string ca_wv_name(size_t l) const {
        return adapter.ca_sharing == CaSharing::none ? layer_prefix(l) + "ca.wv" : "ca.wv";
    }
    std::string ca_wo_name(size_t l) const { return layer_prefix(l) + "ca.wo"; }
    std::string ca_norm_name(size_t l) const { return layer_prefix(l) + "ca.norm"; }

    std::string gate_name(size_t l, const char* leaf) const {
        if (adapter.gate_mode == GateMode::shared) return std::string("gate.") + leaf;
        return layer_prefix(l) + "gate." + leaf;
    }

    bool has_gate() const { return adapter.gate_mode != GateMode::none; }

    std::string audio_table_name(int speaker, size_t q) const {
        return std::string("emb.audio.") + (speaker == 0 ? "a" : "u") + std::to_string(q);
    }

    // --- cache build accounting ----------------------------------------------

    uint64_t cache_builds() const { return cache_builds_.load(); }
    void count_cache_build() const { cache_builds_.fetch_add(1); }

    // --- encoding helpers ----------------------------------------------------

    ImageRef encode_image(const RasterImage& img) const {
        return std::make_shared<ImageTokenGrid>(vision.encode(img));
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (size_t i = 0; i < params.count(); ++i)
            if (params.at(i).trainable) out.push_back(params.name(i));
        return out;
    }

private:
    void add(const std::string& name, Shape shape, double sd, bool trainable, double fill = 0.0) {
        Tensor<T> t(shape);
        if (sd > 0.0) {
            Rng r = Rng(seed).split(name);
            for (size_t i = 0; i < t.size(); ++i) t.at(i) = T(r.normal() * sd);
        } else if (fill != 0.0) {
            for (size_t i = 0; i < t.size(); ++i) t.at(i) = T(fill);
        }
        params.add(name, std::move(t), trainable);
    }

    void build() {
        const size_t d = cfg.d_model, f = cfg.ffn_mult * d, gh = gate_hidden();
        const double wsd = 1.0 / std::sqrt(double(d));
        const double fsd = 1.0 / std::sqrt(double(f));

        add("emb.text", {size_t(cfg.text_vocab), d}, 0.5, false);
        for (int spk = 0; spk < 2; ++spk)
            for (size_t q = 0; q < cfg.q_levels; ++q)
                add(audio_table_name(spk, q), {size_t(cfg.audio_vocab), d}, 0.5, false);

        for (size_t l = 0; l < cfg.n_layers; ++l) {
            const std::string p = layer_prefix(l);
            add(p + "attn.norm", {d}, 0.0, false, 1.0);
            add(p + "attn.wq", {d, d}, wsd, false);
            add(p + "attn.wk", {d, d}, wsd, false);
            add(p + "attn.wv", {d, d}, wsd, false);
            add(p + "attn.wo", {d, d}, wsd, false);

            add(ca_norm_name(l), {d}, 0.0, true, 1.0);
            if (!params.contains(ca_wq_name(l))) add(ca_wq_name(l), {d, d}, wsd, true);
            if (!params.contains(ca_wk_name(l))) add(ca_wk_name(l), {d, d}, wsd, true);
            if (!params.contains(ca_wv_name(l))) add(ca_wv_name(l), {d, d}, wsd, true);
            add(ca_wo_name(l), {d, d}, wsd, true);

            if (has_gate() && !params.contains(gate_name(l, "w1"))) {
                add(gate_name(l, "w1"), {d, gh}, 0.02, true);
                add(gate_name(l, "b1"), {gh}, 0.0, true);
                add(gate_name(l, "w2"), {gh, 1}, 0.02, true);
                // bias -4 puts the initial gate near 0.018: close to the bare
                // backbone at step 0
                add(gate_name(l, "b2"), {1}, 0.0, true, -4.0);
            }

            add(p + "ffn.norm", {d}, 0.0, false, 1.0);
            add(p + "ffn.w1", {d, f}, wsd, false);
            add(p + "ffn.w2", {f, d}, fsd, false);
        }

        add("text_head.w", {d, size_t(cfg.text_vocab)}, wsd, false);
        add("text_head.b", {size_t(cfg.text_vocab)}, 0.0, false);

        // depth transformer: position 0 carries the backbone state, position
        // q >= 1 the embedding of the level q-1 token
        add("depth.pos", {cfg.q_levels, d}, 0.5, false);
        for (size_t q = 0; q + 1 < cfg.q_levels; ++q)
            add("depth.emb." + std::to_string(q), {size_t(cfg.audio_vocab), d}, 0.5, false);
        for (size_t l = 0; l < cfg.depth_layers; ++l) {
            const std::string p = "depth.layers." + std::to_string(l) + ".";
            add(p + "attn.norm", {d}, 0.0, false, 1.0);
            add(p + "attn.wq", {d, d}, wsd, false);
            add(p + "attn.wk", {d, d}, wsd, false);
            add(p + "attn.wv", {d, d}, wsd, false);
            add(p + "attn.wo", {d, d}, wsd, false);
            add(p + "ffn.norm", {d}, 0.0, false, 1.0);
            add(p + "ffn.w1", {d, f}, wsd, false);
            add(p + "ffn.w2", {f, d}, fsd, false);
        }
        for (size_t q = 0; q < cfg.q_levels; ++q)
            add("depth.head." + std::to_string(q), {d, size_t(cfg.audio_vocab)}, wsd, false);
    }

    mutable std::atomic<uint64_t> cache_builds_{0};
};

// Per-image KV projections. Sharing modes kv and qkv need a single entry; no
// sharing stores one per layer.
template <typename T>
struct ImageKVCache {
    std::string source_id;
    struct Entry {
        Tensor<T> k, v;  // [N_img x d]
    };
    std::vector<Entry> entries;

    const Entry& for_layer(size_t l, CaSharing s) const {
        return entries[s == CaSharing::none ? l : 0];
    }
};

template <typename T>
ImageKVCache<T> build_image_cache(const Model<T>& m, const ImageTokenGrid& grid) {
    ImageKVCache<T> cache;
    cache.source_id = grid.source_id;
    const Tensor<T> tokens = tensor_cast<T>(grid.tokens);
    const size_t n = m.adapter.ca_sharing == CaSharing::none ? m.cfg.n_layers : 1;
    for (size_t l = 0; l < n; ++l) {
        typename ImageKVCache<T>::Entry e;
        e.k = matmul(tokens, m.params[m.ca_wk_name(l)].value);
        e.v = matmul(tokens, m.params[m.ca_wv_name(l)].value);
        cache.entries.push_back(std::move(e));
    }
    m.count_cache_build();
    return cache;
}

}  // namespace vsm
