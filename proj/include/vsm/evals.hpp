#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vsm/checkpoint.hpp"
#include "vsm/dialogue.hpp"
#include "vsm/infer.hpp"
#include "vsm/toytasks.hpp"
#include "vsm/train.hpp"

namespace vsm {

enum class EvalMode { text, audio };

inline EvalMode eval_mode_from(const std::string& s) {
    if (s == "text") return EvalMode::text;
    if (s == "audio") return EvalMode::audio;
    throw ConfigError("unknown eval mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// Turning toy items into training and evaluation material.

struct PreparedItem {
    Transcript train_transcript;  // greeting + question + answer
    Transcript eval_transcript;   // greeting + question
    std::vector<int> gold_tokens;
    std::vector<int> answer_vocab;  // restricted candidates for QA tasks
    ImageRef image;
    nlohmann::json meta;
};

template <typename T>
PreparedItem prepare_item(const toy::Item& item, const TextTokenizer& tok, const Model<T>* m,
                          bool greeting, uint64_t seed) {
    PreparedItem p;
    BenchmarkItem b;
    if (item.question.empty()) {
        std::string caption;
        for (size_t i = 0; i < item.answer.size(); ++i) caption += (i ? " " : "") + item.answer[i];
        b.caption = caption;
    } else {
        b.question = item.question;
        b.answer = item.answer[0];
    }
    p.train_transcript = benchmark_to_dialogue(b, /*eval=*/false, greeting, seed);
    p.eval_transcript = benchmark_to_dialogue(b, /*eval=*/true, greeting, seed);
    for (const auto& w : item.answer) p.gold_tokens.push_back(tok.word_id(w));
    if (!item.question.empty()) {
        const auto vocab = item.meta.value("task", "") == "distractor" ? toy::answer_vocab_codes()
                                                                       : toy::answer_vocab_colors();
        for (const auto& w : vocab) p.answer_vocab.push_back(tok.word_id(w));
    }
    if (m && item.meta.value("task", "") != "distractor") {
        p.image = m->encode_image(toy::render_scene(item.scene));
    }
    p.meta = item.meta;
    return p;
}

inline TrainingSample speechless_training_sample(const PreparedItem& p, const TextTokenizer& tok) {
    TrainingSample ts;
    ts.value = speechless_from_transcript(p.train_transcript, tok, p.image);
    return ts;
}

inline TrainingSample speech_training_sample(const PreparedItem& p, const TextTokenizer& tok,
                                             uint64_t tts_seed) {
    TrainingSample ts;
    auto s = tts_stub(p.train_transcript, tok, tts_seed);
    s.image = p.image;
    ts.value = std::move(s);
    return ts;
}

// Prompt tokens for speechless decoding: everything up to and including the
// final assistant marker that cues the answer.
inline std::vector<int> prompt_tokens(const Transcript& eval_transcript, const TextTokenizer& tok) {
    std::vector<int> out{StreamVocab::BOS};
    for (const auto& turn : eval_transcript) {
        out.push_back(turn.role == Role::assistant ? StreamVocab::ASSISTANT : StreamVocab::USER);
        for (int id : tok.encode(turn.text)) out.push_back(id);
    }
    out.push_back(StreamVocab::ASSISTANT);
    return out;
}

// ---------------------------------------------------------------------------
// Per-item protocols.

struct AudioGenStats {
    double nll_sum = 0;  // over chosen assistant audio tokens, levels 0..1
    size_t count = 0;
    double perplexity() const { return count ? std::exp(nll_sum / double(count)) : 0.0; }
};

template <typename T>
std::vector<int> decode_text_answer(const Model<T>& m, const PreparedItem& p, const TextTokenizer& tok,
                                    size_t max_tokens) {
    Session<T> sess(m, p.image);
    for (int id : prompt_tokens(p.eval_transcript, tok)) sess.prime_text_token(id);
    std::vector<int> out;
    for (size_t i = 0; i < max_tokens; ++i) {
        const int tokid = sess.generate_text_token();
        if (tokid == StreamVocab::EOS) break;
        out.push_back(tokid);
    }
    return out;
}

template <typename T>
std::vector<int> decode_audio_text_stream(const Model<T>& m, const PreparedItem& p,
                                          const TextTokenizer& tok, size_t horizon,
                                          uint64_t prompt_tts_seed, AudioGenStats* stats = nullptr,
                                          Tensor<T>* mean_answer_logits = nullptr,
                                          const std::vector<int>* answer_vocab = nullptr) {
    auto prompt = tts_stub(p.eval_transcript, tok, prompt_tts_seed);
    Session<T> sess(m, p.image);
    for (size_t t = 0; t < prompt.frames(); ++t) sess.prime_speech_frame(prompt.frame(t));

    const std::vector<int> silence(m.cfg.q_levels, 0);
    std::vector<int> text;
    Tensor<T> acc;
    if (answer_vocab) acc = Tensor<T>({1, answer_vocab->size()});
    for (size_t i = 0; i < horizon; ++i) {
        MultiStreamFrame f;
        const Tensor<T> tl = sess.head_logits(sess.last_hidden());
        f.text = int(argmax_row(tl.data(), tl.size()));
        if (answer_vocab)
            for (size_t j = 0; j < answer_vocab->size(); ++j)
                acc.at(0, j) += tl.at(size_t((*answer_vocab)[j]));
        for (size_t q = 0; q < m.cfg.q_levels; ++q) {
            const Tensor<T> al = depth_level_logits(m, sess.last_hidden(), f.assistant_audio);
            const int pick = int(argmax_row(al.data(), al.size()));
            if (stats && q < 2) {
                const Tensor<T> sm = softmax_rows(Tensor<T>({1, al.size()},
                                                            std::vector<T>(al.data(), al.data() + al.size())));
                stats->nll_sum += -std::log(std::max(double(sm.at(size_t(pick))), 1e-12));
                stats->count += 1;
            }
            f.assistant_audio.push_back(pick);
        }
        f.user_audio = silence;
        if (f.text != StreamVocab::PAD) text.push_back(f.text);
        sess.step_embedded(sess.embed_frame_row(f));
    }
    if (mean_answer_logits && answer_vocab) {
        for (size_t j = 0; j < answer_vocab->size(); ++j) acc.at(0, j) /= T(horizon);
        *mean_answer_logits = acc;
    }
    return text;
}

// Restricted argmax over the answer vocabulary at the cue position.
template <typename T>
int qa_predict_text(const Model<T>& m, const PreparedItem& p, const TextTokenizer& tok) {
    Session<T> sess(m, p.image);
    for (int id : prompt_tokens(p.eval_transcript, tok)) sess.prime_text_token(id);
    const Tensor<T> tl = sess.head_logits(sess.last_hidden());
    size_t best = 0;
    for (size_t j = 1; j < p.answer_vocab.size(); ++j)
        if (tl.at(size_t(p.answer_vocab[j])) > tl.at(size_t(p.answer_vocab[best]))) best = j;
    return p.answer_vocab[best];
}

template <typename T>
int qa_predict_audio(const Model<T>& m, const PreparedItem& p, const TextTokenizer& tok,
                     uint64_t prompt_tts_seed, AudioGenStats* stats = nullptr, size_t horizon = 8) {
    Tensor<T> mean_logits;
    decode_audio_text_stream(m, p, tok, horizon, prompt_tts_seed, stats, &mean_logits, &p.answer_vocab);
    size_t best = 0;
    for (size_t j = 1; j < p.answer_vocab.size(); ++j)
        if (mean_logits.at(0, j) > mean_logits.at(0, best)) best = j;
    return p.answer_vocab[best];
}

// ---------------------------------------------------------------------------
// Whole-task evaluation.

struct EvalReport {
    double score = 0;  // exact match (caption) or restricted accuracy (QA)
    size_t n = 0;
    AudioGenStats audio_stats;
};

template <typename T>
EvalReport eval_task(const Model<T>& m, const std::vector<PreparedItem>& items, const TextTokenizer& tok,
                     EvalMode mode, uint64_t seed = 0) {
    EvalReport rep;
    rep.n = items.size();
    size_t hits = 0;
    for (size_t i = 0; i < items.size(); ++i) {
        const auto& p = items[i];
        const uint64_t item_seed = mix64(seed ^ (0x517cc1b727220a95ull + i));
        if (!p.answer_vocab.empty()) {
            const int want = p.gold_tokens.at(0);
            const int got = mode == EvalMode::text
                                ? qa_predict_text(m, p, tok)
                                : qa_predict_audio(m, p, tok, item_seed, &rep.audio_stats);
            hits += got == want ? 1 : 0;
        } else {
            std::vector<int> got;
            if (mode == EvalMode::text) {
                got = decode_text_answer(m, p, tok, p.gold_tokens.size() + 2);
            } else {
                const size_t horizon = stub_frames_for_words(p.gold_tokens.size());
                got = decode_audio_text_stream(m, p, tok, horizon, item_seed, &rep.audio_stats);
            }
            hits += got == p.gold_tokens ? 1 : 0;
        }
    }
    rep.score = items.empty() ? 0.0 : double(hits) / double(items.size());
    return rep;
}

// ---------------------------------------------------------------------------
// Context-switch protocol: prepend L irrelevant question-answer turns and
// report score(L) / score(0).

struct ContextSwitchSpec {
    std::string direction = "v2nv";      // v2nv: image talk before text QA；nv2v: chatter before captions
    std::vector<size_t> prefix_lengths{0, 1, 2, 4};
    EvalMode probe_mode = EvalMode::audio;
    uint64_t seed = 0;
};

struct SwitchPoint {
    size_t prefix_len;
    double score;
    double relative;
};

// prefix_pool: transcripts of single QA turns to draw from (their image, when
// present, is the one the model sees).
template <typename T>
std::vector<SwitchPoint> context_switch_eval(const Model<T>& m,
                                             const std::vector<PreparedItem>& probe_items,
                                             const std::vector<Transcript>& prefix_pool,
                                             const TextTokenizer& tok, const ContextSwitchSpec& spec) {
    if (prefix_pool.empty()) throw ConfigError("context_switch_eval: empty prefix pool");
    std::vector<SwitchPoint> out;
    double score0 = -1;
    for (size_t L : spec.prefix_lengths) {
        size_t hits = 0;
        Rng rng = Rng(spec.seed).split("switch").split(L);
        for (size_t i = 0; i < probe_items.size(); ++i) {
            PreparedItem p = probe_items[i];
            Transcript prefixed;
            for (size_t k = 0; k < L; ++k) {
                const Transcript& extra = prefix_pool[rng.next_below(prefix_pool.size())];
                prefixed.insert(prefixed.end(), extra.begin(), extra.end());
            }
            prefixed.insert(prefixed.end(), p.eval_transcript.begin(), p.eval_transcript.end());
            p.eval_transcript = std::move(prefixed);
            const uint64_t item_seed = mix64(spec.seed ^ (L * 1315423911ull + i));
            if (!p.answer_vocab.empty()) {
                const int got = spec.probe_mode == EvalMode::text
                                    ? qa_predict_text(m, p, tok)
                                    : qa_predict_audio(m, p, tok, item_seed);
                hits += got == p.gold_tokens.at(0) ? 1 : 0;
            } else {
                std::vector<int> got;
                if (spec.probe_mode == EvalMode::text) {
                    got = decode_text_answer(m, p, tok, p.gold_tokens.size() + 2);
                } else {
                    got = decode_audio_text_stream(m, p, tok, stub_frames_for_words(p.gold_tokens.size()),
                                                   item_seed);
                }
                hits += got == p.gold_tokens ? 1 : 0;
            }
        }
        const double score = probe_items.empty() ? 0.0 : double(hits) / double(probe_items.size());
        if (L == spec.prefix_lengths.front() && L == 0) score0 = score;
        SwitchPoint pt;
        pt.prefix_len = L;
        pt.score = score;
        pt.relative = L == 0 ? 1.0 : (score0 > 0 ? score / score0 : std::nan(""));
        out.push_back(pt);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gate trace export.

template <typename T>
void gate_trace_csv(const Model<T>& m, const SpeechSample& sample, const TextTokenizer& tok,
                    std::ostream& out) {
    if (!m.has_gate()) throw ConfigError("gate_trace: model has gate_mode none");
    if (!sample.image) throw ConfigError("gate_trace: sample carries no image");
    Graph<T> g(const_cast<ParamStore<T>*>(&m.params), false);
    auto x = embed_speech_sample(g, m, sample);
    auto fwd = backbone_forward(g, m, x, sample.image.get());
    out << "# schema=vsm.gatetrace.v1\n";
    out << "frame,token_id,token,layer,gate,frame_mean\n";
    for (size_t t = 0; t < sample.frames(); ++t) {
        const float mean = fwd.trace.frame_mean(t);
        for (size_t l = 0; l < m.cfg.n_layers; ++l)
            out << t << "," << sample.text[t] << "," << tok.word_of(sample.text[t]) << "," << l << ","
                << fwd.trace.gates[t][l] << "," << mean << "\n";
    }
}

// ---------------------------------------------------------------------------
// Sweeps: one adapter set trained per cell with shared seeds, scores per
// mode, machine-readable rows plus a summary CSV.

struct SweepCell {
    std::string label;                    // short cell tag, e.g. "p_audio=0.25"
    nlohmann::json config;                // resolved knobs for this cell
    std::map<std::string, double> scores;
    bool diverged = false;
    std::string error;
};

inline void write_sweep_outputs(const std::string& dir, const std::vector<SweepCell>& cells,
                                const nlohmann::json& resolved_base) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream rows(fs::path(dir) / "results.jsonl");
    if (!rows) throw IoError("sweep: cannot open results.jsonl under " + dir);
    std::vector<std::string> score_keys;
    for (const auto& c : cells)
        for (const auto& [k, v] : c.scores)
            if (std::find(score_keys.begin(), score_keys.end(), k) == score_keys.end())
                score_keys.push_back(k);
    std::sort(score_keys.begin(), score_keys.end());
    for (const auto& c : cells) {
        nlohmann::json j{{"schema", "vsm.sweep.v1"},
                         {"label", c.label},
                         {"base", resolved_base},
                         {"cell", c.config},
                         {"scores", c.scores},
                         {"diverged", c.diverged}};
        if (!c.error.empty()) j["error"] = c.error;
        rows << j.dump() << "\n";
    }
    std::ofstream csv(fs::path(dir) / "summary.csv");
    csv << "# schema=vsm.sweep.v1\ncell";
    for (const auto& k : score_keys) csv << "," << k;
    csv << ",diverged\n";
    for (const auto& c : cells) {
        csv << c.label;
        for (const auto& k : score_keys) {
            csv << ",";
            auto it = c.scores.find(k);
            if (it != c.scores.end())
                csv << it->second;
            else
                csv << "not-measured";
        }
        csv << "," << (c.diverged ? 1 : 0) << "\n";
    }
}

// One adapter set trained per cell with a shared seed. Three axes:
//   p_audio    - caption task with a speech/speechless mix per value
//   imbalance  - caption in speech form vs attribute QA in text form,
//                weighted by the value
//   ablation   - the 7-cell gate/sharing grid at a fixed mix
struct SweepBudget {
    size_t n_train = 48;
    size_t n_eval = 24;
    size_t steps = 150;
    size_t batch_size = 8;
    double lr = 2e-3;
    size_t warmup = 15;
};

struct SweepRequest {
    std::string axis = "p_audio";
    std::vector<double> values{0.0, 0.25};
    ModelConfig model;
    AdapterConfig adapter;
    SweepBudget budget;
    uint64_t seed = 1;
};

namespace detail {

template <typename T>
std::map<std::string, double> sweep_eval(const Model<T>& m,
                                         const std::vector<std::vector<PreparedItem>>& tasks,
                                         const std::vector<std::string>& names,
                                         const TextTokenizer& tok, uint64_t seed) {
    std::map<std::string, double> out;
    for (size_t k = 0; k < tasks.size(); ++k) {
        out[names[k] + ".text"] = eval_task(m, tasks[k], tok, EvalMode::text, seed).score;
        out[names[k] + ".audio"] = eval_task(m, tasks[k], tok, EvalMode::audio, seed).score;
    }
    return out;
}

}  // namespace detail

inline std::vector<SweepCell> run_sweep(const SweepRequest& req, const TextTokenizer& tok) {
    std::vector<SweepCell> cells;

    auto caption_items = toy::make_caption_items(req.budget.n_train, req.seed);
    auto caption_eval = toy::make_caption_items(req.budget.n_eval, req.seed);  // training slice reuse
    auto qa_items = toy::make_attr_qa_items(req.budget.n_train, req.seed + 1);
    auto qa_eval = toy::make_attr_qa_items(req.budget.n_eval, req.seed + 1);

    auto run_cell = [&](const std::string& label, const AdapterConfig& adapter, double p_audio,
                        bool two_tasks, double task_a_weight) {
        SweepCell cell;
        cell.label = label;
        cell.config = {{"adapter", adapter}, {"p_audio", p_audio}, {"seed", req.seed}};
        if (two_tasks) cell.config["task_a_weight"] = task_a_weight;
        try {
            Model<float> m(req.model, adapter, req.seed);
            std::vector<DatasetPool> pools;
            if (!two_tasks) {
                DatasetPool speech{"caption_speech", true, {}}, text{"caption_text", false, {}};
                for (size_t i = 0; i < caption_items.size(); ++i) {
                    auto p = prepare_item(caption_items[i], tok, &m, true, req.seed);
                    speech.samples.push_back(speech_training_sample(p, tok, mix64(req.seed ^ i)));
                    text.samples.push_back(speechless_training_sample(p, tok));
                }
                pools = {speech, text};
            } else {
                DatasetPool speech{"caption_speech", true, {}}, text{"qa_text", false, {}};
                for (size_t i = 0; i < caption_items.size(); ++i) {
                    auto p = prepare_item(caption_items[i], tok, &m, true, req.seed);
                    speech.samples.push_back(speech_training_sample(p, tok, mix64(req.seed ^ i)));
                }
                for (size_t i = 0; i < qa_items.size(); ++i) {
                    auto p = prepare_item(qa_items[i], tok, &m, true, req.seed);
                    text.samples.push_back(speechless_training_sample(p, tok));
                }
                pools = {speech, text};
            }
            TrainRunConfig rc;
            rc.optim.lr = req.budget.lr;
            rc.optim.warmup_steps = req.budget.warmup;
            rc.optim.total_steps = req.budget.steps;
            rc.batch.batch_size = req.budget.batch_size;
            rc.batch.p_audio = p_audio;
            rc.batch.seed = req.seed;
            run_training(m, pools, {}, rc);

            std::vector<std::vector<PreparedItem>> eval_tasks;
            std::vector<std::string> names;
            auto prep = [&](const std::vector<toy::Item>& items) {
                std::vector<PreparedItem> out;
                for (const auto& it : items) out.push_back(prepare_item(it, tok, &m, true, req.seed));
                return out;
            };
            eval_tasks.push_back(prep(caption_eval));
            names.push_back("caption");
            if (two_tasks) {
                eval_tasks.push_back(prep(qa_eval));
                names.push_back("attr_qa");
            }
            cell.scores = detail::sweep_eval(m, eval_tasks, names, tok, req.seed);
        } catch (const DivergenceError& e) {
            cell.diverged = true;
            cell.error = e.what();
        }
        cells.push_back(std::move(cell));
    };

    if (req.axis == "p_audio") {
        for (double v : req.values)
            run_cell("p_audio=" + std::to_string(v), req.adapter, v, false, 0);
    } else if (req.axis == "imbalance") {
        for (double v : req.values)
            run_cell("task_a=" + std::to_string(v), req.adapter, v, true, v);
    } else if (req.axis == "ablation") {
        for (const auto& ad : ablation_cells())
            run_cell("gate=" + to_string(ad.gate_mode) + ";ca=" + to_string(ad.ca_sharing), ad, 0.5,
                     false, 0);
    } else {
        throw ConfigError("unknown sweep axis '" + req.axis + "'");
    }
    return cells;
}

}  // namespace vsm
