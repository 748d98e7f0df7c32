#pragma once

#include <memory>
#include <vector>

#include "vsm/backbone.hpp"
#include "vsm/model.hpp"

namespace vsm {

template <typename T>
inline int sample_from_logits(const Tensor<T>& logits, double temperature, Rng* rng) {
    const size_t n = logits.size();
    if (temperature <= 0.0 || rng == nullptr) return int(argmax_row(logits.data(), n));
    Tensor<T> scaled({1, n});
    for (size_t j = 0; j < n; ++j) scaled.at(j) = T(double(logits.at(j)) / temperature);
    Tensor<T> p = softmax_rows(scaled);
    double u = rng->next_double(), acc = 0.0;
    for (size_t j = 0; j < n; ++j) {
        acc += double(p.at(j));
        if (u < acc) return int(j);
    }
    return int(n - 1);
}

// One generation/evaluation session: owns the growing self-attention history
// and a reference to the per-image KV cache. Weights are shared and
// read-only; each session must stay single-owner.
template <typename T>
class Session {
public:
    Session(const Model<T>& m, ImageRef image = {}, std::shared_ptr<const ImageKVCache<T>> cache = {})
        : m_(m) {
        if (cache) {
            if (image && cache->source_id != image->source_id)
                throw CacheError("session: cache built for image " + cache->source_id +
                                 " used with image " + image->source_id);
            cache_ = std::move(cache);
        } else if (image) {
            cache_ = std::make_shared<ImageKVCache<T>>(build_image_cache(m, *image));
        }
        hist_.resize(m.cfg.n_layers);
        const size_t d = m.cfg.d_model;
        for (auto& h : hist_) {
            h.k.reserve(m.cfg.max_context * d);
            h.v.reserve(m.cfg.max_context * d);
        }
        trace_.n_layers = m.cfg.n_layers;
    }

    const Model<T>& model() const { return m_; }
    size_t frames() const { return frame_; }
    const GateTrace& trace() const { return trace_; }
    const Tensor<T>& last_hidden() const {
        if (!primed_) throw ContractError("session: no frames processed yet");
        return last_hidden_;
    }
    const std::shared_ptr<const ImageKVCache<T>>& cache() const { return cache_; }

    // --- core step -----------------------------------------------------------

    Tensor<T> step_embedded(const Tensor<T>& x_row) {
        if (frame_ >= m_.cfg.max_context)
            throw CapacityError("session: context of " + std::to_string(m_.cfg.max_context) + " frames full");
        const size_t d = m_.cfg.d_model, nh = m_.cfg.n_heads, dh = d / nh;
        const T eps = T(m_.cfg.norm_eps);
        const T inv = T(1) / std::sqrt(T(dh));
        std::vector<float> gates_this_frame(m_.cfg.n_layers, 0.f);

        Tensor<T> x = x_row.clone();
        for (size_t l = 0; l < m_.cfg.n_layers; ++l) {
            const std::string p = Model<T>::layer_prefix(l);
            Tensor<T> n1 = rms_norm(x, m_.params[p + "attn.norm"].value, eps);
            Tensor<T> q = matmul(n1, m_.params[p + "attn.wq"].value);
            Tensor<T> k = matmul(n1, m_.params[p + "attn.wk"].value);
            Tensor<T> v = matmul(n1, m_.params[p + "attn.wv"].value);
            rope_rows_inplace(q, nh, frame_, T(m_.cfg.rope_base));
            rope_rows_inplace(k, nh, frame_, T(m_.cfg.rope_base));
            auto& H = hist_[l];
            H.k.insert(H.k.end(), k.data(), k.data() + d);
            H.v.insert(H.v.end(), v.data(), v.data() + d);
            const size_t ctx = frame_ + 1;

            Tensor<T> att({1, d});
            std::vector<T> scores(ctx), weights(ctx);
            for (size_t h = 0; h < nh; ++h) {
                const T* qh = q.data() + h * dh;
                for (size_t j = 0; j < ctx; ++j) {
                    const T* kj = H.k.data() + j * d + h * dh;
                    T acc = T(0);
                    for (size_t c = 0; c < dh; ++c) acc += qh[c] * kj[c];
                    scores[j] = acc * inv;
                }
                softmax_row_into(scores.data(), weights.data(), ctx);
                T* out = att.data() + h * dh;
                for (size_t j = 0; j < ctx; ++j) {
                    const T* vj = H.v.data() + j * d + h * dh;
                    const T w = weights[j];
                    for (size_t c = 0; c < dh; ++c) out[c] += w * vj[c];
                }
            }
            Tensor<T> x1 = matmul(att, m_.params[p + "attn.wo"].value);
            for (size_t c = 0; c < d; ++c) x1.at(c) += x.at(c);

            Tensor<T> x2 = x1;
            if (cache_) {
                const auto& entry = cache_->for_layer(l, m_.adapter.ca_sharing);
                Tensor<T> nc = rms_norm(x1, m_.params[m_.ca_norm_name(l)].value, eps);
                Tensor<T> qc = matmul(nc, m_.params[m_.ca_wq_name(l)].value);
                const size_t nimg = entry.k.rows();
                Tensor<T> ctxv({1, d});
                std::vector<T> s2(nimg), w2(nimg);
                for (size_t h = 0; h < nh; ++h) {
                    const T* qh = qc.data() + h * dh;
                    for (size_t j = 0; j < nimg; ++j) {
                        const T* kj = entry.k.data() + j * d + h * dh;
                        T acc = T(0);
                        for (size_t c = 0; c < dh; ++c) acc += qh[c] * kj[c];
                        s2[j] = acc * inv;
                    }
                    softmax_row_into(s2.data(), w2.data(), nimg);
                    T* out = ctxv.data() + h * dh;
                    for (size_t j = 0; j < nimg; ++j) {
                        const T* vj = entry.v.data() + j * d + h * dh;
                        const T w = w2[j];
                        for (size_t c = 0; c < dh; ++c) out[c] += w * vj[c];
                    }
                }
                Tensor<T> c = matmul(ctxv, m_.params[m_.ca_wo_name(l)].value);
                if (!m_.has_gate()) {
                    x2 = x1.clone();
                    for (size_t j = 0; j < d; ++j) x2.at(j) += c.at(j);
                    gates_this_frame[l] = 1.f;
                } else {
                    Tensor<T> pre = matmul(c, m_.params[m_.gate_name(l, "w1")].value);
                    for (size_t j = 0; j < pre.size(); ++j) pre.at(j) += m_.params[m_.gate_name(l, "b1")].value.at(j);
                    Tensor<T> hred = relu(pre);
                    Tensor<T> z = matmul(hred, m_.params[m_.gate_name(l, "w2")].value);
                    z.at(0) += m_.params[m_.gate_name(l, "b2")].value.at(0);
                    const T gate = sigmoid_scalar(z.at(0));
                    gates_this_frame[l] = float(gate);
                    x2 = x1.clone();
                    for (size_t j = 0; j < d; ++j) x2.at(j) += gate * c.at(j);
                }
            }

            Tensor<T> n3 = rms_norm(x2, m_.params[p + "ffn.norm"].value, eps);
            Tensor<T> ffn = matmul(gelu(Tensor<T>(matmul(n3, m_.params[p + "ffn.w1"].value))),
                                   m_.params[p + "ffn.w2"].value);
            for (size_t c = 0; c < d; ++c) ffn.at(c) += x2.at(c);
            x = std::move(ffn);
        }
        trace_.gates.push_back(std::move(gates_this_frame));
        ++frame_;
        primed_ = true;
        last_hidden_ = x.clone();
        return x;
    }

    // --- speech mode -----------------------------------------------------------

    Tensor<T> embed_frame_row(const MultiStreamFrame& f) const {
        const size_t d = m_.cfg.d_model;
        auto row = [&](const Tensor<T>& table, int id) {
            if (id < 0 || size_t(id) >= table.rows())
                throw IndexError("embed: id " + std::to_string(id) + " outside table");
            return table.data() + size_t(id) * d;
        };
        Tensor<T> x({1, d});
        const T* t = row(m_.params["emb.text"].value, f.text);
        for (size_t j = 0; j < d; ++j) x.at(j) = t[j];
        for (size_t q = 0; q < f.assistant_audio.size(); ++q) {
            const T* a = row(m_.params[m_.audio_table_name(0, q)].value, f.assistant_audio[q]);
            for (size_t j = 0; j < d; ++j) x.at(j) += a[j];
        }
        for (size_t q = 0; q < f.user_audio.size(); ++q) {
            const T* u = row(m_.params[m_.audio_table_name(1, q)].value, f.user_audio[q]);
            for (size_t j = 0; j < d; ++j) x.at(j) += u[j];
        }
        return x;
    }

    Tensor<T> prime_speech_frame(const MultiStreamFrame& f) { return step_embedded(embed_frame_row(f)); }

    // One inference step: decode the next assistant frame from the current
    // state, then feed it back together with the incoming user audio.
    MultiStreamFrame generate_step(const std::vector<int>& user_audio, double temperature = 0.0,
                                   Rng* rng = nullptr) {
        if (!primed_) throw ContractError("generate_step: prime the prompt first");
        if (user_audio.size() != m_.cfg.q_levels)
            throw ShapeError("generate_step: expected " + std::to_string(m_.cfg.q_levels) + " user levels");
        Tensor<T> tl = head_logits(last_hidden_);
        MultiStreamFrame f;
        f.text = sample_from_logits(tl, temperature, rng);
        for (size_t q = 0; q < m_.cfg.q_levels; ++q) {
            Tensor<T> al = depth_level_logits(m_, last_hidden_, f.assistant_audio);
            f.assistant_audio.push_back(sample_from_logits(al, temperature, rng));
        }
        f.user_audio = user_audio;
        step_embedded(embed_frame_row(f));
        return f;
    }

    // --- text (speechless) mode --------------------------------------------------

    Tensor<T> prime_text_token(int tok) {
        const size_t d = m_.cfg.d_model;
        const auto& table = m_.params["emb.text"].value;
        if (tok < 0 || size_t(tok) >= table.rows()) throw IndexError("prime_text_token: token out of range");
        Tensor<T> x({1, d});
        for (size_t j = 0; j < d; ++j) x.at(j) = table.at(size_t(tok), j);
        return step_embedded(x);
    }

    int generate_text_token(double temperature = 0.0, Rng* rng = nullptr) {
        if (!primed_) throw ContractError("generate_text_token: prime the prompt first");
        Tensor<T> tl = head_logits(last_hidden_);
        const int tok = sample_from_logits(tl, temperature, rng);
        prime_text_token(tok);
        return tok;
    }

    Tensor<T> head_logits(const Tensor<T>& hidden_row) const {
        Tensor<T> l = matmul(hidden_row, m_.params["text_head.w"].value);
        const auto& b = m_.params["text_head.b"].value;
        for (size_t j = 0; j < l.size(); ++j) l.at(j) += b.at(j);
        return l;
    }

    // Latency harness: fabricate `n` frames of self-attention history without
    // running the model; content is irrelevant to timing structure.
    void prefill_synthetic_history(size_t n, uint64_t seed) {
        const size_t d = m_.cfg.d_model;
        Rng rng = Rng(seed).split("prefill");
        for (auto& h : hist_) {
            const size_t base = h.k.size();
            h.k.resize(base + n * d);
            h.v.resize(base + n * d);
            for (size_t i = base; i < h.k.size(); ++i) {
                h.k[i] = T(rng.normal() * 0.1);
                h.v[i] = T(rng.normal() * 0.1);
            }
        }
        frame_ += n;
        Tensor<T> hrow({1, d});
        for (size_t j = 0; j < d; ++j) hrow.at(j) = T(rng.normal() * 0.1);
        last_hidden_ = hrow;
        primed_ = true;
    }

private:
    struct LayerHist {
        std::vector<T> k, v;  // frame-major rows of width d
    };

    const Model<T>& m_;
    std::shared_ptr<const ImageKVCache<T>> cache_;
    std::vector<LayerHist> hist_;
    size_t frame_ = 0;
    bool primed_ = false;
    Tensor<T> last_hidden_;
    GateTrace trace_;
};

}  // namespace vsm
