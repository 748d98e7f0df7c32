#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vsm/data.hpp"
#include "vsm/digest.hpp"
#include "vsm/instructions.hpp"
#include "vsm/streams.hpp"

namespace vsm {

struct ChatMessage {
    std::string role;  // "user" | "assistant"
    std::string content;
};

class ChatClient {
public:
    virtual ~ChatClient() = default;
    virtual std::string complete(const std::string& system_prompt, const std::vector<ChatMessage>& history,
                                 uint64_t seed) = 0;
    virtual std::string identity() const = 0;
};

// ---------------------------------------------------------------------------
// Scripted stand-in for the hosted LLMs: template-filled from the caption it
// finds in its system prompt, deterministic in (prompt digest, seed).

namespace detail {

inline std::string extract_caption(const std::string& prompt) {
    // the three template families embed the caption differently
    auto between = [&](const std::string& a, const std::string& b) -> std::string {
        const size_t i = prompt.find(a);
        if (i == std::string::npos) return "";
        const size_t j = prompt.find(b, i + a.size());
        if (j == std::string::npos) return "";
        return prompt.substr(i + a.size(), j - i - a.size());
    };
    std::string c = between("\"\"\"", "\"\"\"");
    if (c.empty()) c = between("IMAGE DESCRIPTION START\n", "\nIMAGE DESCRIPTION END");
    if (c.empty()) c = between("described in detail by the following description:\n", "\n\n");
    while (!c.empty() && (c.front() == '\n' || c.front() == ' ')) c.erase(c.begin());
    while (!c.empty() && (c.back() == '\n' || c.back() == ' ')) c.pop_back();
    return c;
}

}  // namespace detail

class ScriptedMockClient : public ChatClient {
public:
    explicit ScriptedMockClient(Role role) : role_(role) {}

    std::string identity() const override {
        return role_ == Role::user ? "mock-user" : "mock-assistant";
    }

    std::string complete(const std::string& prompt, const std::vector<ChatMessage>& history,
                         uint64_t seed) override {
        std::string transcript = prompt;
        for (const auto& m : history) transcript += "\n[" + m.role + "] " + m.content;
        Rng rng = Rng(seed).split(hash_str(transcript));
        const std::string caption = detail::extract_caption(prompt);
        auto words = TextTokenizer::split_words(caption);
        if (words.empty()) words = {"something"};
        const std::string& noun = words[rng.next_below(words.size())];

        if (role_ == Role::user) {
            // steer the question family by prompt keywords, like the real
            // instructions would
            if (prompt.find("spatial relations") != std::string::npos)
                return "where is the " + noun + " in the image";
            if (prompt.find("COLOR of object") != std::string::npos)
                return "what color is the " + noun;
            if (prompt.find("NUMBER of objects") != std::string::npos)
                return "how many " + noun + " do you see";
            if (prompt.find("mislead") != std::string::npos)
                return "do you see a zebra next to the " + noun;
            switch (rng.next_below(3)) {
                case 0: return "what is in the image";
                case 1: return "what do you see in the image";
                default: return "can you tell me about the " + noun;
            }
        }
        // assistant role
        if (history.empty() || history.size() <= 1) return "i see " + caption;
        const std::string& q = history.back().content;
        if (q.rfind("do you see a zebra", 0) == 0) return "no there is no zebra i see " + caption;
        if (q.rfind("where is", 0) == 0) return "the " + noun + " is in the picture near the middle";
        if (q.rfind("what color", 0) == 0) return "it looks " + words[0] + " to me";
        if (q.rfind("how many", 0) == 0) return "i can see one " + noun;
        return "well i see " + caption;
    }

private:
    Role role_;
};

// ---------------------------------------------------------------------------
// Dialogue orchestration.

struct DialogueRecord {
    std::string caption_id;
    std::vector<Turn> turns;  // strictly alternating, user first
    uint64_t seed = 0;
    std::string user_client, assistant_client;
    std::string forced_start;       // scaffolding, never exported
    std::vector<size_t> comb_branches;  // branch picks of the forced start
};

struct PartialDialogueError : ClientError {
    PartialDialogueError(const std::string& msg, DialogueRecord partial)
        : ClientError(msg), partial(std::move(partial)) {}
    DialogueRecord partial;
};

struct DialoguePolicy {
    // single-instruction id, or "comb" for COMB-then-random
    std::string mode = "comb";
    std::vector<std::string> random_pool{"LOC", "PROP", "NUM", "LEAD1", "TS1", "TS2"};
    size_t min_turns = 8, max_turns = 16;
    size_t retry_budget = 2;
};

// Runs one two-model dialogue: the user model asks, the assistant model
// answers, 8..16 question-answer turns, a fresh instruction sampled per turn
// under the comb policy. The forced start seeds turn 0 and is then dropped
// from the replayed history.
inline DialogueRecord run_dialogue(const InstructionSet& set, const std::string& caption,
                                   const std::string& caption_id, const DialoguePolicy& policy,
                                   ChatClient& user_client, ChatClient& assistant_client,
                                   uint64_t seed) {
    DialogueRecord rec;
    rec.caption_id = caption_id;
    rec.seed = seed;
    rec.user_client = user_client.identity();
    rec.assistant_client = assistant_client.identity();

    Rng rng = Rng(seed).split("dialogue");
    const size_t n_turns = policy.min_turns + rng.next_below(policy.max_turns - policy.min_turns + 1);
    const bool comb = policy.mode == "comb";

    auto instruction_for_turn = [&](size_t turn) -> std::string {
        if (!comb) return policy.mode;
        if (turn == 0) return "COMB";
        return policy.random_pool[rng.next_below(policy.random_pool.size())];
    };

    auto ask = [&](ChatClient& client, const std::string& prompt,
                   const std::vector<ChatMessage>& history, uint64_t turn_seed) {
        for (size_t attempt = 0;; ++attempt) {
            try {
                return client.complete(prompt, history, turn_seed);
            } catch (const std::exception& e) {
                if (attempt >= policy.retry_budget)
                    throw PartialDialogueError(std::string("dialogue client failed: ") + e.what(), rec);
            }
        }
    };

    for (size_t turn = 0; turn < n_turns; ++turn) {
        const std::string iid = instruction_for_turn(turn);
        const uint64_t turn_seed = mix64(seed ^ (turn * 2 + 1));

        std::string user_prompt;
        if (turn == 0) {
            user_prompt = render_instruction(set, iid, Role::user, caption, seed,
                                             /*forced_start=*/true, &rec.comb_branches);
            Rng fs = Rng(seed).split("forced_start");
            rec.forced_start = resolve_forced_start(set.get(iid), fs);
        } else {
            user_prompt = render_instruction(set, iid, Role::user, caption, seed);
        }

        // the user model sees its own questions as "assistant" turns
        std::vector<ChatMessage> user_history;
        for (const auto& t : rec.turns)
            user_history.push_back({t.role == Role::user ? "assistant" : "user", t.text});
        const std::string question = ask(user_client, user_prompt, user_history, turn_seed);
        rec.turns.push_back({Role::user, question, iid});

        const std::string asst_prompt = render_instruction(set, iid, Role::assistant, caption, seed);
        std::vector<ChatMessage> asst_history;
        for (const auto& t : rec.turns)
            asst_history.push_back({t.role == Role::user ? "user" : "assistant", t.text});
        const std::string answer = ask(assistant_client, asst_prompt, asst_history, turn_seed + 1);
        rec.turns.push_back({Role::assistant, answer, iid});
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Benchmark-to-dialogue reformatting: wraps a bare item as a short spoken
// conversation. Evaluation mode withholds the answer turn.

struct BenchmarkItem {
    std::string question;  // empty for caption items
    std::string answer;
    std::string caption;   // caption items carry the target text here
};

inline Transcript benchmark_to_dialogue(const BenchmarkItem& item, bool eval_mode,
                                        bool greeting = true, uint64_t seed = 0) {
    if (item.caption.empty() && item.question.empty())
        throw ContractError("benchmark_to_dialogue: empty item");
    Transcript tr;
    if (greeting) {
        static const char* greetings[] = {"hey how are you doing", "hi there how are you",
                                          "hey good morning"};
        Rng rng = Rng(seed).split("greeting");
        tr.push_back({Role::assistant, greetings[rng.next_below(3)], ""});
    }
    const bool caption_item = item.question.empty();
    tr.push_back({Role::user, caption_item ? "can you tell me what is in the image" : item.question, ""});
    if (!eval_mode)
        tr.push_back({Role::assistant, caption_item ? "i see " + item.caption : item.answer, ""});
    return tr;
}

// ---------------------------------------------------------------------------
// Transcript file and dataset export.

inline nlohmann::json transcript_json(const DialogueRecord& rec) {
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& t : rec.turns)
        turns.push_back({{"role", t.role == Role::user ? "user" : "assistant"},
                         {"text", t.text},
                         {"instruction_id", t.instruction_id}});
    return {{"caption_id", rec.caption_id}, {"turns", turns}, {"seed", rec.seed}};
}

inline void write_transcripts(const std::string& path, const std::vector<DialogueRecord>& recs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_transcripts: cannot open " + path);
    for (const auto& r : recs) out << transcript_json(r).dump() << "\n";
}

struct ExportConfig {
    std::string out_dir;
    bool emit_speech = true;
    uint64_t tts_seed = 0;
};

struct ExportResult {
    std::string speechless_path;
    std::string speech_path;
    size_t records = 0;
};

// Emits each record once as a speechless sample and, when enabled, once as a
// speech sample through the TTS stub. Image references travel as ppm files.
inline ExportResult export_dataset(const std::vector<DialogueRecord>& records,
                                   const std::map<std::string, RasterImage>& images,
                                   const TextTokenizer& tok, const PatchEncoder* encoder,
                                   const ExportConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    fs::create_directories(fs::path(cfg.out_dir) / "images");

    std::vector<DatasetEntry> speechless, speech;
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        Transcript tr;
        for (const auto& t : rec.turns) tr.push_back(t);

        ImageRef grid;
        std::string ppm_rel;
        auto it = images.find(rec.caption_id);
        if (it != images.end() && encoder) {
            ppm_rel = "images/" + rec.caption_id + ".ppm";
            const auto ppm_abs = (fs::path(cfg.out_dir) / ppm_rel).string();
            if (!fs::exists(ppm_abs)) it->second.save_ppm(ppm_abs);
            grid = std::make_shared<ImageTokenGrid>(encoder->encode(it->second));
        }

        DatasetEntry e;
        e.meta = {{"caption_id", rec.caption_id}, {"seed", rec.seed}};
        e.image_ppm = ppm_rel;
        e.sample.value = speechless_from_transcript(tr, tok, grid);
        speechless.push_back(e);

        if (cfg.emit_speech) {
            DatasetEntry se;
            se.meta = e.meta;
            se.image_ppm = ppm_rel;
            auto sp = tts_stub(tr, tok, mix64(cfg.tts_seed ^ rec.seed));
            sp.image = grid;
            se.sample.value = std::move(sp);
            speech.push_back(std::move(se));
        }
    }

    ExportResult res;
    res.records = records.size();
    res.speechless_path = (fs::path(cfg.out_dir) / "dialogues.speechless.jsonl").string();
    write_dataset_jsonl(res.speechless_path, speechless);
    if (cfg.emit_speech) {
        res.speech_path = (fs::path(cfg.out_dir) / "dialogues.speech.jsonl").string();
        write_dataset_jsonl(res.speech_path, speech);
    }
    return res;
}

}  // namespace vsm
