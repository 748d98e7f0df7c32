#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "vsm/errors.hpp"
#include "vsm/rng.hpp"
#include "vsm/tensor.hpp"
#include "vsm/vision.hpp"

namespace vsm {

// 12.5 Hz multi-stream vocabulary: one text stream plus Q audio codebook
// levels for each of the two speakers.
struct StreamVocab {
    int text_vocab = 512;
    int audio_vocab = 64;
    int q_levels = 4;
    double frame_rate = 12.5;

    static constexpr int PAD = 0;
    static constexpr int BOS = 1;
    static constexpr int EOS = 2;
    static constexpr int USER = 3;       // role delimiter, speechless only
    static constexpr int ASSISTANT = 4;  // role delimiter, speechless only
    static constexpr int FIRST_WORD = 5;

    void validate() const {
        if (text_vocab <= FIRST_WORD) throw ConfigError("text vocab too small for reserved tokens");
        if (audio_vocab < 1) throw ConfigError("audio vocab must be positive");
        if (q_levels < 2) throw ConfigError("need at least two audio levels");
    }
};

// Deterministic word-level tokenizer: registered words get stable dense ids,
// anything else falls into a hash bucket above the registry.
class TextTokenizer {
public:
    explicit TextTokenizer(const StreamVocab& vocab) : vocab_(vocab) { vocab_.validate(); }

    int register_word(const std::string& w) {
        auto it = ids_.find(w);
        if (it != ids_.end()) return it->second;
        const int id = StreamVocab::FIRST_WORD + int(words_.size());
        if (id >= vocab_.text_vocab) throw ConfigError("tokenizer registry exceeded text vocab");
        ids_[w] = id;
        words_.push_back(w);
        return id;
    }

    int word_id(const std::string& w) const {
        auto it = ids_.find(w);
        if (it != ids_.end()) return it->second;
        const int lo = StreamVocab::FIRST_WORD + int(words_.size());
        const int span = vocab_.text_vocab - lo;
        if (span <= 0) throw ConfigError("tokenizer has no hash space left");
        return lo + int(hash_str(w) % uint64_t(span));
    }

    std::string word_of(int id) const {
        if (id == StreamVocab::PAD) return "_";
        if (id == StreamVocab::BOS) return "<bos>";
        if (id == StreamVocab::EOS) return "<eos>";
        if (id == StreamVocab::USER) return "<user>";
        if (id == StreamVocab::ASSISTANT) return "<assistant>";
        const int k = id - StreamVocab::FIRST_WORD;
        if (k >= 0 && size_t(k) < words_.size()) return words_[size_t(k)];
        return "<w" + std::to_string(id) + ">";
    }

    static std::vector<std::string> split_words(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : text) {
            if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '\'') {
                cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
            } else if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        for (const auto& w : split_words(text)) ids.push_back(word_id(w));
        return ids;
    }

    const StreamVocab& vocab() const { return vocab_; }

private:
    StreamVocab vocab_;
    std::map<std::string, int> ids_;
    std::vector<std::string> words_;
};

// One timestep of the joint stream.
struct MultiStreamFrame {
    int text = StreamVocab::PAD;
    std::vector<int> assistant_audio;
    std::vector<int> user_audio;
};

struct SpeechSample {
    std::vector<int> text;                         // aligned, PAD-filled
    std::vector<std::vector<int>> assistant_audio; // [Q][T]
    std::vector<std::vector<int>> user_audio;      // [Q][T]
    ImageRef image;
    std::vector<uint8_t> text_loss_mask;
    std::vector<uint8_t> audio_loss_mask;

    size_t frames() const { return text.size(); }

    MultiStreamFrame frame(size_t t) const {
        MultiStreamFrame f;
        f.text = text[t];
        for (const auto& lvl : assistant_audio) f.assistant_audio.push_back(lvl[t]);
        for (const auto& lvl : user_audio) f.user_audio.push_back(lvl[t]);
        return f;
    }

    void validate(const StreamVocab& v) const {
        const size_t T = text.size();
        if (assistant_audio.size() != size_t(v.q_levels) || user_audio.size() != size_t(v.q_levels))
            throw ShapeError("speech sample: expected " + std::to_string(v.q_levels) + " audio levels");
        for (const auto& lvl : assistant_audio)
            if (lvl.size() != T) throw ShapeError("speech sample: assistant audio not aligned with text");
        for (const auto& lvl : user_audio)
            if (lvl.size() != T) throw ShapeError("speech sample: user audio not aligned with text");
        if (text_loss_mask.size() != T || audio_loss_mask.size() != T)
            throw ShapeError("speech sample: loss masks not aligned");
        for (int id : text)
            if (id < 0 || id >= v.text_vocab) throw IndexError("speech sample: text id out of range");
        for (const auto& stream : {&assistant_audio, &user_audio})
            for (const auto& lvl : *stream)
                for (int id : lvl)
                    if (id < 0 || id >= v.audio_vocab) throw IndexError("speech sample: audio id out of range");
    }
};

struct SpeechlessSample {
    std::vector<int> tokens;  // role-delimited plain text, no PAD
    ImageRef image;
    std::vector<uint8_t> loss_mask;

    void validate(const StreamVocab& v) const {
        if (tokens.size() != loss_mask.size()) throw ShapeError("speechless sample: mask not aligned");
        for (int id : tokens) {
            if (id < 0 || id >= v.text_vocab) throw IndexError("speechless sample: token out of range");
            if (id == StreamVocab::PAD) throw ContractError("speechless sample: contains PAD");
        }
    }
};

struct TrainingSample {
    std::variant<SpeechSample, SpeechlessSample> value;

    bool is_speech() const { return std::holds_alternative<SpeechSample>(value); }
    SpeechSample& speech() { return std::get<SpeechSample>(value); }
    const SpeechSample& speech() const { return std::get<SpeechSample>(value); }
    SpeechlessSample& speechless() { return std::get<SpeechlessSample>(value); }
    const SpeechlessSample& speechless() const { return std::get<SpeechlessSample>(value); }

    const ImageRef& image() const { return is_speech() ? speech().image : speechless().image; }
};

// Per-frame, per-layer gate activations recorded during a forward pass.
struct GateTrace {
    size_t n_layers = 0;
    std::vector<std::vector<float>> gates;  // [frame][layer]

    float frame_mean(size_t t) const {
        float s = 0;
        for (float g : gates[t]) s += g;
        return gates[t].empty() ? 0.f : s / float(gates[t].size());
    }
};

// ---------------------------------------------------------------------------
// Transcripts and the deterministic TTS stand-in.

enum class Role { user, assistant };

struct Turn {
    Role role;
    std::string text;
    std::string instruction_id;  // provenance only
};

using Transcript = std::vector<Turn>;

struct TimedWord {
    std::vector<int> tokens;
    size_t duration = 0;  // frames
};

// Places each word's tokens at its onset frame; remaining frames are PAD.
inline std::vector<int> align_transcript(const std::vector<TimedWord>& words,
                                         int pad_id = StreamVocab::PAD) {
    size_t total = 0;
    for (const auto& w : words) total += w.duration;
    std::vector<int> out(total, pad_id);
    size_t onset = 0;
    for (const auto& w : words) {
        if (w.tokens.size() > w.duration)
            throw AlignmentError("align_transcript: word with " + std::to_string(w.tokens.size()) +
                                 " tokens does not fit in " + std::to_string(w.duration) + " frames");
        for (size_t i = 0; i < w.tokens.size(); ++i) out[onset + i] = w.tokens[i];
        onset += w.duration;
    }
    return out;
}

// The documented audio-token hash: a chain of mix64 rounds over
// (seed, speaker, level, frame, word). Speaker is 0 for the assistant and 1
// for the user; silent frames use word id 0.
inline int audio_token_hash(uint64_t seed, int speaker, int level, size_t frame, int word_id,
                            int audio_vocab) {
    uint64_t h = mix64(seed);
    h = mix64(h ^ uint64_t(speaker));
    h = mix64(h ^ uint64_t(level));
    h = mix64(h ^ uint64_t(frame));
    h = mix64(h ^ uint64_t(word_id));
    return int(h % uint64_t(audio_vocab));
}

// Deterministic alignment stub standing in for a TTS system. Every word
// spans 1 + token-count frames, so each word has at least one trailing PAD.
// Only the assistant's words enter the text stream; the user's words exist
// as audio tokens alone.
inline SpeechSample tts_stub(const Transcript& transcript, const TextTokenizer& tok, uint64_t seed) {
    if (transcript.empty()) throw ContractError("tts_stub: empty transcript");
    const StreamVocab& v = tok.vocab();

    struct FrameInfo {
        int speaker_word[2] = {0, 0};  // word id being voiced, 0 = silent
    };
    std::vector<TimedWord> text_words;
    std::vector<FrameInfo> frames;

    for (const auto& turn : transcript) {
        const int spk = turn.role == Role::assistant ? 0 : 1;
        for (const auto& w : TextTokenizer::split_words(turn.text)) {
            const int id = tok.word_id(w);
            const std::vector<int> word_tokens = {id};
            const size_t dur = 1 + word_tokens.size();  // duration model: token count + 1
            TimedWord tw;
            tw.duration = dur;
            if (spk == 0) tw.tokens = word_tokens;
            text_words.push_back(tw);
            for (size_t i = 0; i < dur; ++i) {
                FrameInfo fi;
                fi.speaker_word[size_t(spk)] = id;
                frames.push_back(fi);
            }
        }
    }

    SpeechSample s;
    s.text = align_transcript(text_words, StreamVocab::PAD);
    const size_t T = s.text.size();
    s.assistant_audio.assign(size_t(v.q_levels), std::vector<int>(T));
    s.user_audio.assign(size_t(v.q_levels), std::vector<int>(T));
    for (size_t t = 0; t < T; ++t) {
        for (int q = 0; q < v.q_levels; ++q) {
            s.assistant_audio[size_t(q)][t] =
                audio_token_hash(seed, 0, q, t, frames[t].speaker_word[0], v.audio_vocab);
            s.user_audio[size_t(q)][t] =
                audio_token_hash(seed, 1, q, t, frames[t].speaker_word[1], v.audio_vocab);
        }
    }
    s.text_loss_mask.assign(T, 1);
    s.audio_loss_mask.assign(T, 1);
    return s;
}

// Word duration model used by tts_stub (1 token per word + 1 padding frame).
inline size_t stub_frames_for_words(size_t n_words) { return 2 * n_words; }

// Role-delimited plain-text sample: <USER> q words <ASSISTANT> a words ... <eos>.
// Loss lands on assistant-turn words and the final EOS.
inline SpeechlessSample speechless_from_transcript(const Transcript& transcript,
                                                   const TextTokenizer& tok, ImageRef image = {}) {
    SpeechlessSample s;
    s.image = std::move(image);
    s.tokens.push_back(StreamVocab::BOS);
    s.loss_mask.push_back(0);
    for (const auto& turn : transcript) {
        const bool asst = turn.role == Role::assistant;
        s.tokens.push_back(asst ? StreamVocab::ASSISTANT : StreamVocab::USER);
        s.loss_mask.push_back(0);
        for (int id : tok.encode(turn.text)) {
            s.tokens.push_back(id);
            s.loss_mask.push_back(asst ? 1 : 0);
        }
    }
    s.tokens.push_back(StreamVocab::EOS);
    s.loss_mask.push_back(1);
    return s;
}

// ---------------------------------------------------------------------------
// Concatenation augmentation: with probability p_concat, wrap the visual
// dialogue between trimmed unrelated prefix/suffix dialogues. The prefix
// keeps its tail, the dialogue and suffix keep their heads.

struct ConcatConfig {
    double p_concat = 0.0;
    size_t min_keep = 4;
};

namespace detail {

inline void append_span(SpeechSample& dst, const SpeechSample& src, size_t from, size_t len) {
    dst.text.insert(dst.text.end(), src.text.begin() + long(from), src.text.begin() + long(from + len));
    for (size_t q = 0; q < src.assistant_audio.size(); ++q)
        dst.assistant_audio[q].insert(dst.assistant_audio[q].end(),
                                      src.assistant_audio[q].begin() + long(from),
                                      src.assistant_audio[q].begin() + long(from + len));
    for (size_t q = 0; q < src.user_audio.size(); ++q)
        dst.user_audio[q].insert(dst.user_audio[q].end(), src.user_audio[q].begin() + long(from),
                                 src.user_audio[q].begin() + long(from + len));
    dst.text_loss_mask.insert(dst.text_loss_mask.end(), src.text_loss_mask.begin() + long(from),
                              src.text_loss_mask.begin() + long(from + len));
    dst.audio_loss_mask.insert(dst.audio_loss_mask.end(), src.audio_loss_mask.begin() + long(from),
                               src.audio_loss_mask.begin() + long(from + len));
}

inline size_t sample_keep(Rng& rng, size_t full, size_t min_keep) {
    const size_t lo = std::min(full, min_keep);
    return lo + rng.next_below(full - lo + 1);
}

}  // namespace detail

inline SpeechSample concat_augment(const SpeechSample& dialogue,
                                   const std::vector<SpeechSample>& prefix_pool,
                                   const std::vector<SpeechSample>& suffix_pool,
                                   const ConcatConfig& cfg, Rng& rng) {
    if (cfg.p_concat <= 0.0) return dialogue;
    if (prefix_pool.empty() || suffix_pool.empty())
        throw ConfigError("concat_augment: empty pool with p_concat > 0");
    if (!rng.bernoulli(cfg.p_concat)) return dialogue;

    const SpeechSample& pre = prefix_pool[rng.next_below(prefix_pool.size())];
    const SpeechSample& suf = suffix_pool[rng.next_below(suffix_pool.size())];
    const size_t keep_pre = detail::sample_keep(rng, pre.frames(), cfg.min_keep);
    const size_t keep_mid = detail::sample_keep(rng, dialogue.frames(), cfg.min_keep);
    const size_t keep_suf = detail::sample_keep(rng, suf.frames(), cfg.min_keep);

    SpeechSample out;
    out.image = dialogue.image;  // visual dialogue owns the image
    out.assistant_audio.assign(dialogue.assistant_audio.size(), {});
    out.user_audio.assign(dialogue.user_audio.size(), {});
    detail::append_span(out, pre, pre.frames() - keep_pre, keep_pre);
    detail::append_span(out, dialogue, 0, keep_mid);
    detail::append_span(out, suf, 0, keep_suf);
    return out;
}

// Sum of the text embedding row and all 2Q audio embedding rows for a frame.
// Order is fixed: text, assistant levels 0..Q-1, user levels 0..Q-1.
inline TensorF embed_frame(const MultiStreamFrame& f, const TensorF& text_table,
                           const std::vector<TensorF>& assistant_tables,
                           const std::vector<TensorF>& user_tables) {
    const size_t d = text_table.cols();
    auto pick = [&](const TensorF& table, int id) -> const float* {
        if (id < 0 || size_t(id) >= table.rows())
            throw IndexError("embed_frame: id " + std::to_string(id) + " outside table of " +
                             std::to_string(table.rows()));
        return table.data() + size_t(id) * d;
    };
    TensorF out({d});
    const float* t = pick(text_table, f.text);
    for (size_t j = 0; j < d; ++j) out.at(j) = t[j];
    for (size_t q = 0; q < assistant_tables.size(); ++q) {
        const float* a = pick(assistant_tables[q], f.assistant_audio[q]);
        for (size_t j = 0; j < d; ++j) out.at(j) += a[j];
    }
    for (size_t q = 0; q < user_tables.size(); ++q) {
        const float* u = pick(user_tables[q], f.user_audio[q]);
        for (size_t j = 0; j < d; ++j) out.at(j) += u[j];
    }
    return out;
}

}  // namespace vsm
