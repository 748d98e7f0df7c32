#include <catch2/catch_amalgamated.hpp>

#include "testutil.hpp"
#include "vsm/backbone.hpp"
#include "vsm/infer.hpp"

using namespace vsm;

namespace {

ModelConfig small_cfg() {
    ModelConfig c;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ffn_mult = 2;
    c.q_levels = 4;
    c.depth_layers = 1;
    c.depth_heads = 2;
    c.text_vocab = 512;
    c.audio_vocab = 64;
    c.max_context = 64;
    c.patch = 8;
    return c;
}

template <typename T>
Tensor<T> forward_hidden(const Model<T>& m, const SpeechSample& s, const ImageTokenGrid* img,
                         bool force_zero = false) {
    Graph<T> g(const_cast<ParamStore<T>*>(&m.params), false);
    auto x = embed_speech_sample(g, m, s);
    ForwardOptions<T> opt;
    opt.force_zero_gate = force_zero;
    auto out = backbone_forward(g, m, x, img, opt);
    return g.value(out.hidden).clone();
}

}  // namespace

TEST_CASE("gate values") {
    auto cfg = small_cfg();
    SECTION("zero weights, bias -4 gives sigmoid(-4) everywhere") {
        Model<double> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 3);
        for (size_t l = 0; l < cfg.n_layers; ++l) {
            for (const char* leaf : {"w1", "w2"}) {
                auto& t = m.params[m.gate_name(l, leaf)].value;
                for (size_t i = 0; i < t.size(); ++i) t.at(i) = 0.0;
            }
        }
        Graph<double> g(&m.params, false);
        Rng rng(5);
        auto c = g.input(tu::randn_d(rng, {6, cfg.d_model}));
        auto gv = gate_values(g, m, 0, c);
        const double want = 1.0 / (1.0 + std::exp(4.0));
        for (size_t t = 0; t < 6; ++t) CHECK(g.value(gv).at(t, 0) == Catch::Approx(want).epsilon(1e-9));
        CHECK(want == Catch::Approx(0.01799).margin(2e-5));
    }
    SECTION("shared mode uses one parameter set") {
        Model<float> m(cfg, {GateMode::shared, CaSharing::qkv, 8}, 3);
        CHECK(m.gate_name(0, "w1") == m.gate_name(cfg.n_layers - 1, "w1"));
        CHECK(&m.params[m.gate_name(0, "w1")] == &m.params[m.gate_name(1, "w1")]);
        Model<float> mp(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 3);
        CHECK(mp.gate_name(0, "w1") != mp.gate_name(1, "w1"));
    }
}

TEST_CASE("image cache layout and build counter") {
    auto cfg = small_cfg();
    Rng rng(9);
    SECTION("qkv sharing stores one pair") {
        Model<float> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 1);
        auto grid = m.encode_image(tu::random_image(rng));
        auto cache = build_image_cache(m, *grid);
        CHECK(cache.entries.size() == 1);
        CHECK(m.cache_builds() == 1);
    }
    SECTION("no sharing stores one pair per layer") {
        Model<float> m(cfg, {GateMode::per_layer, CaSharing::none, 8}, 1);
        auto grid = m.encode_image(tu::random_image(rng));
        auto cache = build_image_cache(m, *grid);
        CHECK(cache.entries.size() == cfg.n_layers);
    }
    SECTION("a 20-frame generation builds the cache exactly once") {
        Model<float> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 1);
        auto grid = m.encode_image(tu::random_image(rng));
        Session<float> sess(m, grid);
        CHECK(m.cache_builds() == 1);
        auto tok = tu::shared_tok();
        auto s = tts_stub({{Role::user, "what is in the image", ""}}, tok, 4);
        for (size_t t = 0; t < s.frames(); ++t) sess.prime_speech_frame(s.frame(t));
        std::vector<int> silence(cfg.q_levels, 0);
        for (int i = 0; i < 20; ++i) sess.generate_step(silence);
        CHECK(m.cache_builds() == 1);
    }
    SECTION("cache coherence is enforced") {
        Model<float> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 1);
        auto grid_a = m.encode_image(tu::random_image(rng));
        auto grid_b = m.encode_image(tu::random_image(rng));
        auto cache_a = std::make_shared<ImageKVCache<float>>(build_image_cache(m, *grid_a));
        CHECK_THROWS_AS(Session<float>(m, grid_b, cache_a), CacheError);
    }
}

TEST_CASE("forced-zero gates recover the adapter-free backbone bitwise (f64)") {
    auto cfg = small_cfg();
    Model<double> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 11);
    auto tok = tu::shared_tok();
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        auto s = tu::random_speech_sample(tok, rng);
        auto grid = m.encode_image(tu::random_image(rng));
        auto with_image = forward_hidden(m, s, grid.get(), /*force_zero=*/true);
        auto without = forward_hidden(m, s, nullptr);
        REQUIRE(with_image.size() == without.size());
        for (size_t i = 0; i < without.size(); ++i) REQUIRE(with_image.at(i) == without.at(i));
    }
}

TEST_CASE("no-image forward is independent of the adapter config") {
    auto cfg = small_cfg();
    auto tok = tu::shared_tok();
    Rng rng(31);
    auto s = tu::random_speech_sample(tok, rng);
    Model<double> a(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 7);
    Model<double> b(cfg, {GateMode::none, CaSharing::none, 8}, 7);
    auto ha = forward_hidden(a, s, nullptr);
    auto hb = forward_hidden(b, s, nullptr);
    for (size_t i = 0; i < ha.size(); ++i) REQUIRE(ha.at(i) == hb.at(i));
}

TEST_CASE("gate none adds the cross-attention residual unmodulated") {
    auto cfg = small_cfg();
    auto tok = tu::shared_tok();
    Rng rng(33);
    auto s = tu::random_speech_sample(tok, rng);
    Model<double> ungated(cfg, {GateMode::none, CaSharing::qkv, 8}, 7);
    Model<double> gated(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 7);
    auto grid = ungated.encode_image(tu::random_image(rng));

    // force every gate to 1 in the gated model: zero weights, huge bias
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        for (const char* leaf : {"w1", "w2"}) {
            auto& t = gated.params[gated.gate_name(l, leaf)].value;
            for (size_t i = 0; i < t.size(); ++i) t.at(i) = 0.0;
        }
        gated.params[gated.gate_name(l, "b2")].value.at(0) = 1e9;
    }
    auto hu = forward_hidden(ungated, s, grid.get());
    auto hg = forward_hidden(gated, s, grid.get());
    for (size_t i = 0; i < hu.size(); ++i) REQUIRE(hu.at(i) == Catch::Approx(hg.at(i)).margin(1e-12));

    // and the trace reports g = 1
    Graph<double> g(&ungated.params, false);
    auto x = embed_speech_sample(g, ungated, s);
    auto out = backbone_forward(g, ungated, x, grid.get());
    for (const auto& row : out.trace.gates)
        for (float v : row) CHECK(v == 1.f);
}

TEST_CASE("zero layers passes embeddings through") {
    auto cfg = small_cfg();
    cfg.n_layers = 0;
    Model<float> m(cfg, {}, 5);
    Graph<float> g(&m.params, false);
    std::vector<int> toks{1, 4, 9, 2};
    auto x = embed_text_tokens(g, m, toks);
    auto out = backbone_forward(g, m, x, nullptr);
    const auto& in = g.value(x);
    const auto& h = g.value(out.hidden);
    for (size_t i = 0; i < in.size(); ++i) REQUIRE(h.at(i) == in.at(i));
}

TEST_CASE("text head") {
    auto cfg = small_cfg();
    Model<double> m(cfg, {}, 6);
    SECTION("zero hidden and zero bias give uniform logits, argmax 0") {
        Graph<double> g(&m.params, false);
        auto h = g.input(TensorD({1, cfg.d_model}));
        auto l = text_logits(g, m, h);
        const auto& lv = g.value(l);
        for (size_t j = 0; j < lv.size(); ++j) CHECK(lv.at(j) == 0.0);
        CHECK(argmax_row(lv.data(), lv.size()) == 0);
    }
    SECTION("one-hot favorable row wins") {
        auto& w = m.params["text_head.w"].value;
        for (size_t i = 0; i < w.size(); ++i) w.at(i) = 0.0;
        w.at(3, 17) = 5.0;  // hidden dim 3 pushes token 17
        Graph<double> g(&m.params, false);
        TensorD hrow({1, cfg.d_model});
        hrow.at(3) = 1.0;
        auto l = text_logits(g, m, g.input(hrow));
        CHECK(argmax_row(g.value(l).data(), g.value(l).size()) == 17);
    }
    SECTION("logits match a matmul oracle") {
        Rng rng(8);
        TensorD hrow = tu::randn_d(rng, {2, cfg.d_model});
        Graph<double> g(&m.params, false);
        auto l = text_logits(g, m, g.input(hrow.clone()));
        const auto& w = m.params["text_head.w"].value;
        const auto& b = m.params["text_head.b"].value;
        for (size_t r = 0; r < 2; ++r)
            for (size_t j = 0; j < size_t(cfg.text_vocab); ++j) {
                double acc = 0;
                for (size_t k = 0; k < cfg.d_model; ++k) acc += hrow.at(r, k) * w.at(k, j);
                acc += b.at(j);
                REQUIRE(std::abs(g.value(l).at(r, j) - acc) <= 1e-12);
            }
    }
}

TEST_CASE("depth transformer level causality") {
    auto cfg = small_cfg();
    Model<double> m(cfg, {}, 12);
    Rng rng(13);
    TensorD h = tu::randn_d(rng, {1, cfg.d_model});

    SECTION("level 0 ignores later-level embedding tables") {
        auto l0 = depth_level_logits(m, h, {});
        auto& emb1 = m.params["depth.emb.1"].value;
        for (size_t i = 0; i < emb1.size(); ++i) emb1.at(i) += 3.0;
        auto l0b = depth_level_logits(m, h, {});
        for (size_t j = 0; j < l0.size(); ++j) REQUIRE(l0.at(j) == l0b.at(j));
    }
    SECTION("level 1 ignores the level-2 token") {
        auto l1 = depth_level_logits(m, h, {5});
        // perturbing a hypothetical later token cannot enter: recompute with
        // a different level-2 choice by comparing level-2 logits inputs only
        auto l2a = depth_level_logits(m, h, {5, 3});
        auto l2b = depth_level_logits(m, h, {5, 9});
        auto l1b = depth_level_logits(m, h, {5});
        for (size_t j = 0; j < l1.size(); ++j) REQUIRE(l1.at(j) == l1b.at(j));
        // and level-2 logits are identical regardless of level-2 token (it is
        // only an input for level 3)
        (void)l2a;
        (void)l2b;
    }
    SECTION("level index past Q rejected") {
        CHECK_THROWS_AS(depth_level_logits(m, h, {1, 2, 3, 4}), IndexError);
    }
    SECTION("teacher-forced training logits match the sequential path") {
        const size_t n = 5;
        TensorD rows = tu::randn_d(rng, {n, cfg.d_model});
        std::vector<int> a0{1, 5, 9, 2, 0};
        Graph<double> g(&m.params, false);
        auto [l0, l1] = depth_teacher_logits(g, m, g.input(rows.clone()), a0);
        for (size_t t = 0; t < n; ++t) {
            TensorD hrow({1, cfg.d_model});
            for (size_t j = 0; j < cfg.d_model; ++j) hrow.at(j) = rows.at(t, j);
            auto s0 = depth_level_logits(m, hrow, {});
            auto s1 = depth_level_logits(m, hrow, {a0[t]});
            for (size_t j = 0; j < s0.size(); ++j) {
                REQUIRE(std::abs(g.value(l0).at(t, j) - s0.at(j)) <= 1e-9);
                REQUIRE(std::abs(g.value(l1).at(t, j) - s1.at(j)) <= 1e-9);
            }
        }
    }
}

TEST_CASE("backbone causality under frame perturbation") {
    auto cfg = small_cfg();
    Model<double> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 14);
    auto tok = tu::shared_tok();
    Rng rng(15);
    auto s = tts_stub({{Role::user, "what is in the image", ""}, {Role::assistant, "red ball left", ""}},
                      tok, 3);
    auto grid = m.encode_image(tu::random_image(rng));
    auto base = forward_hidden(m, s, grid.get());
    const size_t T = s.frames();
    REQUIRE(T >= 6);
    // perturb a late frame's audio token
    SpeechSample s2 = s;
    s2.assistant_audio[0][T - 1] = (s2.assistant_audio[0][T - 1] + 1) % cfg.audio_vocab;
    auto pert = forward_hidden(m, s2, grid.get());
    for (size_t t = 0; t + 1 < T; ++t)
        for (size_t j = 0; j < cfg.d_model; ++j) REQUIRE(base.at(t, j) == pert.at(t, j));
    bool last_changed = false;
    for (size_t j = 0; j < cfg.d_model; ++j)
        if (base.at(T - 1, j) != pert.at(T - 1, j)) last_changed = true;
    CHECK(last_changed);
}

TEST_CASE("incremental generation matches the full forward") {
    auto cfg = small_cfg();
    auto tok = tu::shared_tok();
    for (const auto& ad : ablation_cells()) {
        Model<float> m(cfg, ad, 77);
        Rng rng(99);
        auto s = tu::random_speech_sample(tok, rng);
        while (s.frames() < 12) s = tu::random_speech_sample(tok, rng);
        auto grid = m.encode_image(tu::random_image(rng));

        auto full = forward_hidden(m, s, grid.get());
        Session<float> sess(m, grid);
        float worst = 0.f;
        for (size_t t = 0; t < s.frames(); ++t) {
            auto h = sess.prime_speech_frame(s.frame(t));
            for (size_t j = 0; j < cfg.d_model; ++j)
                worst = std::max(worst, std::abs(h.at(j) - full.at(t, j)));
        }
        INFO("gate=" << to_string(ad.gate_mode) << " ca=" << to_string(ad.ca_sharing));
        CHECK(worst <= 1e-5f);
    }
}

TEST_CASE("cached cross-attention equals recomputation from raw tokens") {
    auto cfg = small_cfg();
    auto tok = tu::shared_tok();
    for (CaSharing sharing : {CaSharing::none, CaSharing::kv, CaSharing::qkv}) {
        Model<float> m(cfg, {GateMode::per_layer, sharing, 8}, 42);
        Rng rng(17);
        auto s = tu::random_speech_sample(tok, rng);
        auto grid = m.encode_image(tu::random_image(rng));

        // cached path: session; recomputed path: fresh K/V from the grid via
        // the taped forward
        auto full = forward_hidden(m, s, grid.get());
        Session<float> sess(m, grid);
        float worst = 0.f;
        for (size_t t = 0; t < s.frames(); ++t) {
            auto h = sess.prime_speech_frame(s.frame(t));
            for (size_t j = 0; j < cfg.d_model; ++j)
                worst = std::max(worst, std::abs(h.at(j) - full.at(t, j)));
        }
        CHECK(worst <= 1e-6f);
    }
}

TEST_CASE("generate_step determinism and history bookkeeping") {
    auto cfg = small_cfg();
    Model<float> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 50);
    auto tok = tu::shared_tok();
    auto s = tts_stub({{Role::user, "what is in the image", ""}}, tok, 5);
    Rng rng(1);
    auto grid = m.encode_image(tu::random_image(rng));
    std::vector<int> silence(cfg.q_levels, 3);

    auto run = [&](size_t steps) {
        Session<float> sess(m, grid);
        for (size_t t = 0; t < s.frames(); ++t) sess.prime_speech_frame(s.frame(t));
        std::vector<MultiStreamFrame> out;
        for (size_t i = 0; i < steps; ++i) {
            const size_t before = sess.frames();
            out.push_back(sess.generate_step(silence));
            REQUIRE(sess.frames() == before + 1);
        }
        return out;
    };
    auto a = run(6), b = run(6);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].text == b[i].text);
        CHECK(a[i].assistant_audio == b[i].assistant_audio);
        REQUIRE(a[i].assistant_audio.size() == cfg.q_levels);
    }
}

TEST_CASE("gate range and trace shape") {
    auto cfg = small_cfg();
    Model<float> m(cfg, {GateMode::shared, CaSharing::kv, 8}, 51);
    auto tok = tu::shared_tok();
    Rng rng(2);
    auto s = tu::random_speech_sample(tok, rng);
    auto grid = m.encode_image(tu::random_image(rng));
    Graph<float> g(&m.params, false);
    auto x = embed_speech_sample(g, m, s);
    auto out = backbone_forward(g, m, x, grid.get());
    REQUIRE(out.trace.gates.size() == s.frames());
    for (const auto& row : out.trace.gates) {
        REQUIRE(row.size() == cfg.n_layers);
        for (float v : row) {
            CHECK(v > 0.f);
            CHECK(v < 1.f);
        }
    }
}

TEST_CASE("context overflow raises capacity errors") {
    auto cfg = small_cfg();
    cfg.max_context = 4;
    Model<float> m(cfg, {}, 52);
    Session<float> sess(m);
    for (int i = 0; i < 4; ++i) sess.prime_text_token(1);
    CHECK_THROWS_AS(sess.prime_text_token(1), CapacityError);

    Graph<float> g(&m.params, false);
    auto x = embed_text_tokens(g, m, {1, 2, 3, 4, 5});
    CHECK_THROWS_AS(backbone_forward(g, m, x, nullptr), CapacityError);
}
