#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "vsm/model.hpp"

namespace vsm {

template <typename T>
inline Tensor<T> causal_mask(size_t n) {
    Tensor<T> m({n, n});
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) m.at(i, j) = T(-1e9);
    return m;
}

// Attention over pre-projected q/k/v, heads split along channels. The
// additive mask (-1e9 on blocked pairs) keeps everything finite in f32.
template <typename T>
typename Graph<T>::Var mh_attention(Graph<T>& g, typename Graph<T>::Var q, typename Graph<T>::Var k,
                                    typename Graph<T>::Var v, size_t n_heads, const Tensor<T>* mask) {
    const size_t d = g.value(q).cols(), dh = d / n_heads;
    const T inv = T(1) / std::sqrt(T(dh));
    std::vector<typename Graph<T>::Var> heads;
    for (size_t h = 0; h < n_heads; ++h) {
        auto qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        auto kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        auto s = g.scale(g.matmul(qh, g.transpose(kh)), inv);
        if (mask) s = g.add_const(s, *mask);
        heads.push_back(g.matmul(g.softmax_rows(s), vh));
    }
    return g.concat_cols(heads);
}

template <typename T>
struct ForwardOptions {
    bool force_zero_gate = false;  // test hook for the backbone-recovery property
};

template <typename T>
struct ForwardResult {
    typename Graph<T>::Var hidden;  // [T x d] residual stream after the last block
    GateTrace trace;
};

// Gate MLP: sigmoid(W2 relu(W1 c + b1) + b2), one scalar per token.
template <typename T>
typename Graph<T>::Var gate_values(Graph<T>& g, const Model<T>& m, size_t l, typename Graph<T>::Var c) {
    auto h = g.relu(g.add_rowvec(g.matmul(c, g.param(m.gate_name(l, "w1"))), g.param(m.gate_name(l, "b1"))));
    auto z = g.add_rowvec(g.matmul(h, g.param(m.gate_name(l, "w2"))), g.param(m.gate_name(l, "b2")));
    return g.sigmoid(z);
}

// One transformer block: MHSA -> gated cross-attention adapter -> FFN, all
// pre-norm residual.
template <typename T>
std::pair<typename Graph<T>::Var, Tensor<T>> taped_block(Graph<T>& g, const Model<T>& m, size_t l,
                                                         typename Graph<T>::Var x,
                                                         std::optional<typename Graph<T>::Var> image_tokens,
                                                         const Tensor<T>& mask,
                                                         const ForwardOptions<T>& opt) {
    const std::string p = Model<T>::layer_prefix(l);
    const T eps = T(m.cfg.norm_eps);
    const size_t rows = g.value(x).rows();

    auto n1 = g.rms_norm(x, g.param(p + "attn.norm"), eps);
    auto q = g.rope(g.matmul(n1, g.param(p + "attn.wq")), m.cfg.n_heads, 0, T(m.cfg.rope_base));
    auto k = g.rope(g.matmul(n1, g.param(p + "attn.wk")), m.cfg.n_heads, 0, T(m.cfg.rope_base));
    auto v = g.matmul(n1, g.param(p + "attn.wv"));
    auto att = mh_attention<T>(g, q, k, v, m.cfg.n_heads, &mask);
    auto x1 = g.add(x, g.matmul(att, g.param(p + "attn.wo")));

    Tensor<T> gate_out({rows, 1});  // all-zeros convention when no image
    auto x2 = x1;
    if (image_tokens) {
        auto nc = g.rms_norm(x1, g.param(m.ca_norm_name(l)), eps);
        auto qc = g.matmul(nc, g.param(m.ca_wq_name(l)));
        auto kc = g.matmul(*image_tokens, g.param(m.ca_wk_name(l)));
        auto vc = g.matmul(*image_tokens, g.param(m.ca_wv_name(l)));
        auto ctx = mh_attention<T>(g, qc, kc, vc, m.cfg.n_heads, nullptr);
        auto c = g.matmul(ctx, g.param(m.ca_wo_name(l)));
        if (opt.force_zero_gate) {
            auto zero = g.input(Tensor<T>({rows, 1}));
            x2 = g.add(x1, g.mul_colvec(c, zero));
        } else if (!m.has_gate()) {
            x2 = g.add(x1, c);
            gate_out = Tensor<T>::full({rows, 1}, T(1));
        } else {
            auto gv = gate_values(g, m, l, c);
            gate_out = g.value(gv).clone();
            x2 = g.add(x1, g.mul_colvec(c, gv));
        }
    }

    auto n3 = g.rms_norm(x2, g.param(p + "ffn.norm"), eps);
    auto ffn = g.matmul(g.gelu(g.matmul(n3, g.param(p + "ffn.w1"))), g.param(p + "ffn.w2"));
    return {g.add(x2, ffn), std::move(gate_out)};
}

// Stacks every block over an already-embedded stream. The same weights serve
// the speech path (summed token embeddings) and the speechless path (text
// embeddings only).
template <typename T>
ForwardResult<T> backbone_forward(Graph<T>& g, const Model<T>& m, typename Graph<T>::Var x,
                                  const ImageTokenGrid* image, const ForwardOptions<T>& opt = {}) {
    const size_t rows = g.value(x).rows();
    if (rows > m.cfg.max_context)
        throw CapacityError("backbone_forward: " + std::to_string(rows) + " frames exceed context of " +
                            std::to_string(m.cfg.max_context));
    std::optional<typename Graph<T>::Var> img;
    if (image) img = g.input(tensor_cast<T>(image->tokens));

    const Tensor<T> mask = causal_mask<T>(rows);
    ForwardResult<T> out;
    out.trace.n_layers = m.cfg.n_layers;
    out.trace.gates.assign(rows, std::vector<float>(m.cfg.n_layers, 0.f));
    auto h = x;
    for (size_t l = 0; l < m.cfg.n_layers; ++l) {
        auto [nh, gate] = taped_block(g, m, l, h, img, mask, opt);
        h = nh;
        for (size_t t = 0; t < rows; ++t) out.trace.gates[t][l] = float(gate.at(t, 0));
    }
    out.hidden = h;
    return out;
}

template <typename T>
typename Graph<T>::Var embed_text_tokens(Graph<T>& g, const Model<T>& m, const std::vector<int>& tokens) {
    return g.embed_rows(g.param("emb.text"), tokens);
}

// Speech-token embedding: per frame, text row plus all 2Q audio rows.
// Summation order is text, assistant levels, user levels.
template <typename T>
typename Graph<T>::Var embed_speech_sample(Graph<T>& g, const Model<T>& m, const SpeechSample& s) {
    auto acc = g.embed_rows(g.param("emb.text"), s.text);
    for (size_t q = 0; q < s.assistant_audio.size(); ++q)
        acc = g.add(acc, g.embed_rows(g.param(m.audio_table_name(0, q)), s.assistant_audio[q]));
    for (size_t q = 0; q < s.user_audio.size(); ++q)
        acc = g.add(acc, g.embed_rows(g.param(m.audio_table_name(1, q)), s.user_audio[q]));
    return acc;
}

// Plain linear projection; greedy decoding breaks ties toward the lowest id.
template <typename T>
typename Graph<T>::Var text_logits(Graph<T>& g, const Model<T>& m, typename Graph<T>::Var hidden) {
    return g.add_rowvec(g.matmul(hidden, g.param("text_head.w")), g.param("text_head.b"));
}

// ---------------------------------------------------------------------------
// Depth transformer (training path): teacher-forced levels 0 and 1 for all
// frames at once. Rows 0..n-1 hold position-0 inputs (backbone states), rows
// n..2n-1 hold position-1 inputs (level-0 target embeddings); the mask keeps
// each frame's two positions isolated and causal.

template <typename T>
inline Tensor<T> depth_pair_mask(size_t n) {
    Tensor<T> m = Tensor<T>::full({2 * n, 2 * n}, T(-1e9));
    for (size_t i = 0; i < n; ++i) {
        m.at(i, i) = T(0);
        m.at(n + i, i) = T(0);
        m.at(n + i, n + i) = T(0);
    }
    return m;
}

template <typename T>
typename Graph<T>::Var depth_blocks(Graph<T>& g, const Model<T>& m, typename Graph<T>::Var x,
                                    const Tensor<T>& mask) {
    const T eps = T(m.cfg.norm_eps);
    auto h = x;
    for (size_t l = 0; l < m.cfg.depth_layers; ++l) {
        const std::string p = "depth.layers." + std::to_string(l) + ".";
        auto n1 = g.rms_norm(h, g.param(p + "attn.norm"), eps);
        auto q = g.matmul(n1, g.param(p + "attn.wq"));
        auto k = g.matmul(n1, g.param(p + "attn.wk"));
        auto v = g.matmul(n1, g.param(p + "attn.wv"));
        auto att = mh_attention<T>(g, q, k, v, m.cfg.depth_heads, &mask);
        auto x1 = g.add(h, g.matmul(att, g.param(p + "attn.wo")));
        auto n3 = g.rms_norm(x1, g.param(p + "ffn.norm"), eps);
        auto ffn = g.matmul(g.gelu(g.matmul(n3, g.param(p + "ffn.w1"))), g.param(p + "ffn.w2"));
        h = g.add(x1, ffn);
    }
    return h;
}

template <typename T>
std::pair<typename Graph<T>::Var, typename Graph<T>::Var> depth_teacher_logits(
    Graph<T>& g, const Model<T>& m, typename Graph<T>::Var hidden_rows, const std::vector<int>& level0_targets) {
    const size_t n = g.value(hidden_rows).rows();
    if (level0_targets.size() != n) throw ShapeError("depth_teacher_logits: target count mismatch");
    auto pos = g.param("depth.pos");
    auto pos0 = g.slice_rows(pos, 0, 1);
    auto pos1 = g.slice_rows(pos, 1, 2);
    auto x0 = g.add_rowvec(hidden_rows, pos0);
    auto x1 = g.add_rowvec(g.embed_rows(g.param("depth.emb.0"), level0_targets), pos1);
    auto x = g.concat_rows({x0, x1});
    const Tensor<T> mask = depth_pair_mask<T>(n);
    auto h = depth_blocks(g, m, x, mask);
    auto l0 = g.matmul(g.slice_rows(h, 0, n), g.param("depth.head.0"));
    auto l1 = g.matmul(g.slice_rows(h, n, 2 * n), g.param("depth.head.1"));
    return {l0, l1};
}

// Single-frame depth logits for audio level q = prev_tokens.size(), raw path.
template <typename T>
Tensor<T> depth_level_logits(const Model<T>& m, const Tensor<T>& hidden_row,
                             const std::vector<int>& prev_tokens) {
    const size_t q = prev_tokens.size();
    if (q >= m.cfg.q_levels)
        throw IndexError("depth_level_logits: level " + std::to_string(q) + " beyond " +
                         std::to_string(m.cfg.q_levels));
    const size_t rows = q + 1;
    Graph<T> g(const_cast<ParamStore<T>*>(&m.params), /*record=*/false);
    auto pos = g.param("depth.pos");
    std::vector<typename Graph<T>::Var> parts;
    parts.push_back(g.add_rowvec(g.input(hidden_row), g.slice_rows(pos, 0, 1)));
    for (size_t j = 0; j < q; ++j) {
        auto e = g.embed_rows(g.param("depth.emb." + std::to_string(j)), {prev_tokens[j]});
        parts.push_back(g.add_rowvec(e, g.slice_rows(pos, j + 1, j + 2)));
    }
    auto x = parts.size() == 1 ? parts[0] : g.concat_rows(parts);
    const Tensor<T> mask = causal_mask<T>(rows);
    auto h = depth_blocks(g, m, x, mask);
    auto logits = g.matmul(g.slice_rows(h, rows - 1, rows), g.param("depth.head." + std::to_string(q)));
    return g.value(logits).clone();
}

// ---------------------------------------------------------------------------
// Per-sample loss with the next-token shift. Speech samples supervise the
// assistant text stream plus audio levels 0 and 1; speechless samples
// supervise masked text tokens only.

struct LossWeights {
    double text = 1.0;
    double audio = 1.0;
};

template <typename T>
typename Graph<T>::Var taped_sample_loss(Graph<T>& g, const Model<T>& m, const TrainingSample& ts,
                                         const LossWeights& w = {}, const ForwardOptions<T>& opt = {}) {
    if (!ts.is_speech()) {
        const SpeechlessSample& s = ts.speechless();
        const size_t n = s.tokens.size();
        auto x = embed_text_tokens(g, m, s.tokens);
        auto fwd = backbone_forward(g, m, x, s.image.get(), opt);
        if (n < 2) return g.input(Tensor<T>::scalar(T(0)));
        auto logits = text_logits(g, m, g.slice_rows(fwd.hidden, 0, n - 1));
        std::vector<int> targets(s.tokens.begin() + 1, s.tokens.end());
        std::vector<uint8_t> mask(s.loss_mask.begin() + 1, s.loss_mask.end());
        return g.scale(g.cross_entropy(logits, targets, mask), T(w.text));
    }

    const SpeechSample& s = ts.speech();
    const size_t n = s.frames();
    auto x = embed_speech_sample(g, m, s);
    auto fwd = backbone_forward(g, m, x, s.image.get(), opt);
    if (n < 2) return g.input(Tensor<T>::scalar(T(0)));

    auto hprev = g.slice_rows(fwd.hidden, 0, n - 1);
    auto tlogits = text_logits(g, m, hprev);
    std::vector<int> ttargets(s.text.begin() + 1, s.text.end());
    std::vector<uint8_t> tmask(s.text_loss_mask.begin() + 1, s.text_loss_mask.end());
    auto loss = g.scale(g.cross_entropy(tlogits, ttargets, tmask), T(w.text));

    std::vector<int> a0(s.assistant_audio[0].begin() + 1, s.assistant_audio[0].end());
    std::vector<int> a1(s.assistant_audio[1].begin() + 1, s.assistant_audio[1].end());
    std::vector<uint8_t> amask(s.audio_loss_mask.begin() + 1, s.audio_loss_mask.end());
    auto [l0, l1] = depth_teacher_logits(g, m, hprev, a0);
    auto aloss = g.add(g.cross_entropy(l0, a0, amask), g.cross_entropy(l1, a1, amask));
    return g.add(loss, g.scale(aloss, T(w.audio)));
}

}  // namespace vsm
