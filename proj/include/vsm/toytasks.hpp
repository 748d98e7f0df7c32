#pragma once

#include <array>
#include <string>
#include <vector>

#include "json.hpp"
#include "vsm/rng.hpp"
#include "vsm/streams.hpp"
#include "vsm/vision.hpp"

namespace vsm {

// Procedurally rendered single-object scenes. The gold answer for every item
// is a pure function of the construction parameters, so an independent
// rule-based oracle can re-derive it without looking at pixels.

namespace toy {

inline const std::array<const char*, 8>& color_names() {
    static const std::array<const char*, 8> n{"red",  "green",   "blue",  "yellow",
                                              "pink", "cyan", "white", "orange"};
    return n;
}

inline const std::array<std::array<float, 3>, 8>& color_values() {
    static const std::array<std::array<float, 3>, 8> v{{{0.9f, 0.1f, 0.1f},
                                                        {0.1f, 0.8f, 0.1f},
                                                        {0.15f, 0.2f, 0.9f},
                                                        {0.9f, 0.9f, 0.1f},
                                                        {0.95f, 0.3f, 0.8f},
                                                        {0.1f, 0.85f, 0.85f},
                                                        {0.95f, 0.95f, 0.95f},
                                                        {0.95f, 0.55f, 0.1f}}};
    return v;
}

inline const std::array<const char*, 4>& shape_names() {
    static const std::array<const char*, 4> n{"square", "circle", "triangle", "cross"};
    return n;
}

// 3x3 grid cells, named by two position words (row word, column word).
inline const std::array<std::pair<const char*, const char*>, 9>& cell_names() {
    static const std::array<std::pair<const char*, const char*>, 9> n{{{"top", "left"},
                                                                       {"top", "middle"},
                                                                       {"top", "right"},
                                                                       {"center", "left"},
                                                                       {"center", "middle"},
                                                                       {"center", "right"},
                                                                       {"bottom", "left"},
                                                                       {"bottom", "middle"},
                                                                       {"bottom", "right"}}};
    return n;
}

struct Scene {
    int color = 0;  // index into color_names
    int shape = 0;  // index into shape_names
    int cell = 0;   // index into cell_names

    int key() const { return (color * 4 + shape) * 9 + cell; }
    static Scene from_key(int k) {
        Scene s;
        s.cell = k % 9;
        s.shape = (k / 9) % 4;
        s.color = k / 36;
        return s;
    }
    static constexpr int key_space() { return 8 * 4 * 9; }
};

inline RasterImage render_scene(const Scene& s, size_t size = 32) {
    RasterImage im = RasterImage::blank(size, size);
    for (auto& p : im.pixels) p = 0.08f;
    const size_t cell = size / 3;
    const size_t oy = size_t(s.cell / 3) * cell, ox = size_t(s.cell % 3) * cell;
    const auto& rgb = color_values()[size_t(s.color)];
    auto put = [&](size_t y, size_t x) {
        for (size_t c = 0; c < 3; ++c) im.at(oy + y, ox + x, c) = rgb[c];
    };
    const size_t n = cell;  // draw within the whole cell
    const float mid = float(n - 1) / 2.f;
    for (size_t y = 0; y < n; ++y) {
        for (size_t x = 0; x < n; ++x) {
            const float dy = float(y) - mid, dx = float(x) - mid;
            bool on = false;
            switch (s.shape) {
                case 0: on = std::abs(dy) <= mid - 1 && std::abs(dx) <= mid - 1; break;   // square
                case 1: on = dy * dy + dx * dx <= (mid - 0.5f) * (mid - 0.5f); break;     // circle
                case 2: on = dy >= -mid + 1 && std::abs(dx) <= (dy + mid) * 0.5f; break;  // triangle
                default: on = std::abs(dy) <= 1.2f || std::abs(dx) <= 1.2f; break;        // cross
            }
            if (on) put(y, x);
        }
    }
    return im;
}

// Rule-based gold oracle: derives the answer words from the scene parameters.
inline std::vector<std::string> oracle_caption_words(const Scene& s) {
    const auto& cell = cell_names()[size_t(s.cell)];
    return {"a", color_names()[size_t(s.color)], shape_names()[size_t(s.shape)],
            "at", cell.first, cell.second};
}

inline std::string oracle_color_word(const Scene& s) { return color_names()[size_t(s.color)]; }

struct Item {
    Scene scene;
    std::string question;             // empty for the caption task
    std::vector<std::string> answer;  // gold words
    nlohmann::json meta;
};

// Caption task: image -> full caption. Scenes are sampled without
// replacement, so gold captions are pairwise distinct.
inline std::vector<Item> make_caption_items(size_t n, uint64_t seed) {
    if (n > size_t(Scene::key_space())) throw ConfigError("caption task: not enough distinct scenes");
    std::vector<int> keys(size_t(Scene::key_space()));
    for (size_t i = 0; i < keys.size(); ++i) keys[i] = int(i);
    Rng rng = Rng(seed).split("caption_items");
    for (size_t i = keys.size(); i > 1; --i) std::swap(keys[i - 1], keys[rng.next_below(i)]);
    std::vector<Item> out;
    for (size_t i = 0; i < n; ++i) {
        Item it;
        it.scene = Scene::from_key(keys[i]);
        it.answer = oracle_caption_words(it.scene);
        it.meta = {{"task", "caption"}, {"scene_key", it.scene.key()}};
        out.push_back(std::move(it));
    }
    return out;
}

// Attribute QA: image + "what color is the <shape>" -> color word. The
// answer depends on the image alone; the question only names the shape.
inline std::vector<Item> make_attr_qa_items(size_t n, uint64_t seed) {
    Rng rng = Rng(seed).split("attr_qa_items");
    std::vector<Item> out;
    for (size_t i = 0; i < n; ++i) {
        Item it;
        it.scene.color = int(rng.next_below(8));
        it.scene.shape = int(rng.next_below(4));
        it.scene.cell = int(rng.next_below(9));
        it.question = std::string("what color is the ") + shape_names()[size_t(it.scene.shape)];
        it.answer = {oracle_color_word(it.scene)};
        it.meta = {{"task", "attr_qa"}, {"scene_key", it.scene.key()}};
        out.push_back(std::move(it));
    }
    return out;
}

// Distractor task: text-only recall with no image relevance. A fixed
// derangement maps key words to code words.
inline const std::array<const char*, 8>& distractor_keys() {
    static const std::array<const char*, 8> k{"alpha", "bravo", "delta", "echo",
                                              "golf",  "hotel", "india", "kilo"};
    return k;
}

inline const std::array<const char*, 8>& distractor_codes() {
    static const std::array<const char*, 8> c{"seven", "stone", "river", "cloud",
                                              "amber", "frost", "ember", "pearl"};
    return c;
}

inline std::vector<Item> make_distractor_items(size_t n, uint64_t seed) {
    Rng rng = Rng(seed).split("distractor_items");
    std::vector<Item> out;
    for (size_t i = 0; i < n; ++i) {
        const size_t k = rng.next_below(8);
        Item it;
        it.question = std::string("recall the code for ") + distractor_keys()[k];
        it.answer = {distractor_codes()[(k + 3) % 8]};
        it.meta = {{"task", "distractor"}, {"key", int(k)}};
        out.push_back(std::move(it));
    }
    return out;
}

inline std::vector<std::string> answer_vocab_colors() {
    std::vector<std::string> v;
    for (const char* c : color_names()) v.push_back(c);
    return v;
}

inline std::vector<std::string> answer_vocab_codes() {
    std::vector<std::string> v;
    for (const char* c : distractor_codes()) v.push_back(c);
    return v;
}

// Registers every word the toy corpus can emit, in one fixed order, so all
// components share one tokenizer layout.
inline void register_toy_words(TextTokenizer& tok) {
    static const std::vector<const char*> words{
        // scene vocabulary
        "a", "at", "the", "is", "in", "what", "color", "shape", "where", "how", "many", "do", "you",
        "see", "i", "tell", "me", "can", "image", "picture", "recall", "code", "for",
        // greetings and chatter
        "hey", "hi", "there", "how", "are", "doing", "good", "morning", "well", "thanks", "yes",
        "no", "sure", "okay", "right", "that", "it", "this", "one", "two", "three", "and", "of",
        "on", "side", "looks", "like", "think", "know", "about", "talk", "weather", "today",
        "nice", "cold", "warm", "rain", "sun", "question", "answer", "so",
    };
    for (const char* w : words) tok.register_word(w);
    for (const char* w : color_names()) tok.register_word(w);
    for (const char* w : shape_names()) tok.register_word(w);
    for (const auto& [a, b] : cell_names()) {
        tok.register_word(a);
        tok.register_word(b);
    }
    for (const char* w : distractor_keys()) tok.register_word(w);
    for (const char* w : distractor_codes()) tok.register_word(w);
}

inline TextTokenizer standard_tokenizer(int q_levels = 4) {
    StreamVocab v;
    v.q_levels = q_levels;
    TextTokenizer tok(v);
    register_toy_words(tok);
    return tok;
}

}  // namespace toy

}  // namespace vsm
