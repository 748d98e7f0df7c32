#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "testutil.hpp"
#include "vsm/checkpoint.hpp"
#include "vsm/infer.hpp"
#include "vsm/train.hpp"

using namespace vsm;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ffn_mult = 2;
    c.q_levels = 2;
    c.depth_layers = 1;
    c.depth_heads = 2;
    c.text_vocab = 512;
    c.audio_vocab = 64;
    c.max_context = 128;
    return c;
}

std::vector<DatasetPool> toy_pools(const TextTokenizer& tok, Rng& rng, size_t n_speech = 8,
                                   size_t n_text = 8) {
    DatasetPool sp{"speech_pool", true, {}};
    for (size_t i = 0; i < n_speech; ++i) {
        TrainingSample ts;
        ts.value = tts_stub(tu::random_transcript(rng), tok, rng.next_u64());
        sp.samples.push_back(std::move(ts));
    }
    DatasetPool tx{"text_pool", false, {}};
    for (size_t i = 0; i < n_text; ++i) {
        TrainingSample ts;
        ts.value = speechless_from_transcript(tu::random_transcript(rng), tok);
        tx.samples.push_back(std::move(ts));
    }
    return {sp, tx};
}

bool same_tokens(const TrainingSample& a, const TrainingSample& b) {
    if (a.is_speech() != b.is_speech()) return false;
    if (a.is_speech())
        return a.speech().text == b.speech().text && a.speech().assistant_audio == b.speech().assistant_audio;
    return a.speechless().tokens == b.speechless().tokens;
}

}  // namespace

TEST_CASE("compose_batch quotas") {
    StreamVocab v;
    v.q_levels = 2;
    TextTokenizer tok(v);
    for (const char* w : {"hi", "red", "blue", "ball", "what", "image", "see", "left", "two", "box"})
        tok.register_word(w);
    Rng rng(1);
    auto pools = toy_pools(tok, rng);

    SECTION("p_audio 0 yields no speech samples") {
        BatchSpec spec;
        spec.batch_size = 16;
        spec.p_audio = 0.0;
        auto b = compose_batch(spec, pools, {}, 0);
        for (const auto& s : b) CHECK_FALSE(s.is_speech());
    }
    SECTION("p_audio 0.25 with batch 64 gives exactly 16") {
        BatchSpec spec;
        spec.batch_size = 64;
        spec.p_audio = 0.25;
        auto b = compose_batch(spec, pools, {}, 3);
        size_t speech = 0;
        for (const auto& s : b)
            if (s.is_speech()) ++speech;
        CHECK(speech == 16);
    }
    SECTION("quota is exact for arbitrary p_audio") {
        Rng r2(5);
        for (int trial = 0; trial < 20; ++trial) {
            BatchSpec spec;
            spec.batch_size = 1 + r2.next_below(32);
            spec.p_audio = r2.next_double();
            auto b = compose_batch(spec, pools, {}, trial);
            size_t speech = 0;
            for (const auto& s : b)
                if (s.is_speech()) ++speech;
            REQUIRE(speech == size_t(std::llround(spec.p_audio * double(spec.batch_size))));
        }
    }
    SECTION("dataset weights are realized") {
        auto pools2 = pools;
        pools2.push_back(pools[1]);
        pools2[2].name = "text_pool_b";
        BatchSpec spec;
        spec.batch_size = 16;
        spec.p_audio = 0.0;
        spec.weights = {{"text_pool", 15.0}, {"text_pool_b", 5.0}};
        spec.seed = 7;
        // tag pools by disjoint content: rebuild pool b with distinct marker
        size_t a_hits = 0, total = 0;
        // distinguish by sampling source: track via pointer identity of samples
        for (size_t bi = 0; bi < 625; ++bi) {
            auto b = compose_batch(spec, pools2, {}, bi);
            for (const auto& s : b) {
                ++total;
                for (const auto& cand : pools2[1].samples)
                    if (same_tokens(s, cand)) {
                        ++a_hits;
                        break;
                    }
            }
        }
        // both pools share content here, so instead re-run with disjoint pools
        (void)a_hits;
        REQUIRE(total == 10000);
    }
    SECTION("empty required pool is a configuration error") {
        std::vector<DatasetPool> bad{{"speech_pool", true, {}}, pools[1]};
        BatchSpec spec;
        spec.batch_size = 8;
        spec.p_audio = 0.5;
        CHECK_THROWS_AS(compose_batch(spec, bad, {}, 0), ConfigError);
    }
    SECTION("identical seeds give identical batches") {
        BatchSpec spec;
        spec.batch_size = 12;
        spec.p_audio = 0.5;
        spec.seed = 42;
        auto a = compose_batch(spec, pools, {}, 9);
        auto b = compose_batch(spec, pools, {}, 9);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) REQUIRE(same_tokens(a[i], b[i]));
    }
}

TEST_CASE("dataset weight frequencies") {
    // two disjoint text pools, weights 15:5 -> 75% / 25%
    StreamVocab v;
    TextTokenizer tok(v);
    tok.register_word("aaa");
    tok.register_word("bbb");
    DatasetPool a{"A", false, {}}, b{"B", false, {}};
    TrainingSample sa, sb;
    sa.value = speechless_from_transcript({{Role::assistant, "aaa", ""}}, tok);
    sb.value = speechless_from_transcript({{Role::assistant, "bbb", ""}}, tok);
    a.samples.push_back(sa);
    b.samples.push_back(sb);
    BatchSpec spec;
    spec.batch_size = 16;
    spec.p_audio = 0.0;
    spec.weights = {{"A", 15.0}, {"B", 5.0}};
    spec.seed = 11;
    size_t a_hits = 0, total = 0;
    std::vector<DatasetPool> pools{a, b};
    for (size_t bi = 0; bi < 625; ++bi) {
        for (const auto& s : compose_batch(spec, pools, {}, bi)) {
            ++total;
            if (same_tokens(s, sa)) ++a_hits;
        }
    }
    REQUIRE(total == 10000);
    CHECK(std::abs(double(a_hits) / double(total) - 0.75) <= 0.02);
}

TEST_CASE("sample loss") {
    auto cfg = tiny_cfg();
    Model<double> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 21);
    auto tok = tu::shared_tok(2);

    SECTION("speechless all-false mask gives zero loss") {
        auto s = speechless_from_transcript({{Role::user, "what is in the image", ""}}, tok);
        std::fill(s.loss_mask.begin(), s.loss_mask.end(), 0);
        TrainingSample ts;
        ts.value = s;
        Graph<double> g(&m.params, false);
        CHECK(g.value(taped_sample_loss(g, m, ts)).item() == 0.0);
    }

    SECTION("near-one-hot predictions drive the loss toward zero") {
        // constant text target plus a rigged head bias
        Transcript tr{{Role::assistant, "hi hi hi hi", ""}};
        auto s = tts_stub(tr, tok, 3);
        std::fill(s.audio_loss_mask.begin(), s.audio_loss_mask.end(), 0);
        const int hi = tok.word_id("hi");
        // the stub alternates word/PAD; supervise only word onsets
        for (size_t t = 0; t < s.frames(); ++t) s.text_loss_mask[t] = s.text[t] == hi;
        auto& bias = m.params["text_head.b"].value;
        bias.at(size_t(hi)) = 50.0;
        TrainingSample ts;
        ts.value = s;
        Graph<double> g(&m.params, false);
        CHECK(g.value(taped_sample_loss(g, m, ts)).item() <= 1e-6);
        bias.at(size_t(hi)) = 0.0;
    }

    SECTION("loss matches a per-position oracle in f64") {
        Rng rng(5);
        auto sp = tu::random_speech_sample(tok, rng);
        TrainingSample ts;
        ts.value = sp;
        Graph<double> g(&m.params, false);
        const double got = g.value(taped_sample_loss(g, m, ts)).item();

        // oracle: forward, then hand-rolled masked CE per stream
        Graph<double> g2(&m.params, false);
        auto x = embed_speech_sample(g2, m, sp);
        auto fwd = backbone_forward(g2, m, x, nullptr);
        const size_t T = sp.frames();
        auto hid = g2.value(fwd.hidden);
        double text_sum = 0;
        size_t text_n = 0;
        const auto& W = m.params["text_head.w"].value;
        const auto& B = m.params["text_head.b"].value;
        for (size_t t = 0; t + 1 < T; ++t) {
            if (!sp.text_loss_mask[t + 1]) continue;
            std::vector<double> logits(size_t(cfg.text_vocab), 0.0);
            for (size_t j = 0; j < logits.size(); ++j) {
                double acc = 0;
                for (size_t k = 0; k < cfg.d_model; ++k) acc += hid.at(t, k) * W.at(k, j);
                logits[j] = acc + B.at(j);
            }
            double mx = logits[0];
            for (double l : logits) mx = std::max(mx, l);
            double denom = 0;
            for (double l : logits) denom += std::exp(l - mx);
            text_sum += std::log(denom) - (logits[size_t(sp.text[t + 1])] - mx);
            ++text_n;
        }
        double audio_sum = 0;
        size_t audio_n = 0;
        for (size_t t = 0; t + 1 < T; ++t) {
            if (!sp.audio_loss_mask[t + 1]) continue;
            TensorD hrow({1, cfg.d_model});
            for (size_t k = 0; k < cfg.d_model; ++k) hrow.at(k) = hid.at(t, k);
            for (size_t lvl = 0; lvl < 2; ++lvl) {
                std::vector<int> prev;
                if (lvl == 1) prev.push_back(sp.assistant_audio[0][t + 1]);
                auto logits = depth_level_logits(m, hrow, prev);
                double mx = logits.at(0);
                for (size_t j = 0; j < logits.size(); ++j) mx = std::max(mx, logits.at(j));
                double denom = 0;
                for (size_t j = 0; j < logits.size(); ++j) denom += std::exp(logits.at(j) - mx);
                audio_sum +=
                    std::log(denom) - (logits.at(size_t(sp.assistant_audio[lvl][t + 1])) - mx);
            }
            ++audio_n;
        }
        const double want = (text_n ? text_sum / double(text_n) : 0.0) +
                            (audio_n ? audio_sum / double(audio_n) : 0.0);
        CHECK(std::abs(got - want) <= 1e-10);
    }
}

TEST_CASE("train_step contracts") {
    auto cfg = tiny_cfg();
    auto tok = tu::shared_tok(2);
    Rng rng(31);
    auto pools = toy_pools(tok, rng, 4, 4);
    BatchSpec bspec;
    bspec.batch_size = 4;
    bspec.p_audio = 0.5;
    bspec.seed = 3;

    SECTION("lr 0 leaves parameters unchanged") {
        Model<float> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 5);
        auto batch = compose_batch(bspec, pools, {}, 0);
        std::map<std::string, TensorF> before;
        for (const auto& n : m.trainable_names()) before[n] = m.params[n].value.clone();
        OptimConfig oc;
        oc.lr = 0.0;
        oc.warmup_steps = 0;
        TrainState<float> st;
        train_step(st, m, batch, oc);
        for (const auto& [n, t] : before) {
            const auto& now = m.params[n].value;
            for (size_t i = 0; i < t.size(); ++i) REQUIRE(now.at(i) == t.at(i));
        }
    }

    SECTION("frozen parameters are bit-identical across steps") {
        Model<float> m(cfg, {GateMode::shared, CaSharing::kv, 8}, 5);
        // adapters only see gradient when images flow through them
        Rng ri(77);
        for (auto& pool : pools)
            for (auto& s : pool.samples) {
                auto grid = m.encode_image(tu::random_image(ri));
                if (s.is_speech())
                    s.speech().image = grid;
                else
                    s.speechless().image = grid;
            }
        std::map<std::string, TensorF> before;
        for (size_t i = 0; i < m.params.count(); ++i)
            if (!m.params.at(i).trainable) before[m.params.name(i)] = m.params.at(i).value.clone();
        OptimConfig oc;
        oc.lr = 1e-2;
        oc.warmup_steps = 1;
        oc.total_steps = 5;
        TrainState<float> st;
        for (size_t s = 0; s < 5; ++s) train_step(st, m, compose_batch(bspec, pools, {}, s), oc);
        for (const auto& [n, t] : before) {
            const auto& now = m.params[n].value;
            for (size_t i = 0; i < t.size(); ++i) REQUIRE(now.at(i) == t.at(i));
        }
        // and something trainable did move
        bool moved = false;
        for (const auto& n : m.trainable_names()) {
            const auto& now = m.params[n].value;
            Model<float> fresh(cfg, {GateMode::shared, CaSharing::kv, 8}, 5);
            const auto& orig = fresh.params[n].value;
            for (size_t i = 0; i < now.size(); ++i)
                if (now.at(i) != orig.at(i)) moved = true;
        }
        CHECK(moved);
    }

    SECTION("divergence aborts the step") {
        Model<float> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 5);
        m.params["ca.wq"].value.at(0) = std::numeric_limits<float>::quiet_NaN();
        auto batch = compose_batch(bspec, pools, {}, 0);
        // NaN only propagates to the loss when an image feeds the adapters;
        // rig a speech sample with an image
        Rng r2(8);
        auto grid = m.encode_image(tu::random_image(r2));
        batch[0].speech().image = grid;
        OptimConfig oc;
        TrainState<float> st;
        CHECK_THROWS_AS(train_step(st, m, batch, oc), DivergenceError);
        CHECK(st.step == 0);
        CHECK(st.loss_history.empty());
    }

    SECTION("batch loss is permutation invariant") {
        Model<float> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 5);
        auto batch = compose_batch(bspec, pools, {}, 1);
        auto loss_of = [&](const std::vector<TrainingSample>& b) {
            Graph<float> g(&m.params, false);
            typename Graph<float>::Var total;
            for (size_t i = 0; i < b.size(); ++i) {
                auto l = taped_sample_loss(g, m, b[i]);
                total = i == 0 ? l : g.add(total, l);
            }
            return g.value(g.scale(total, 1.f / float(b.size()))).item();
        };
        auto rev = batch;
        std::reverse(rev.begin(), rev.end());
        CHECK(loss_of(batch) == Catch::Approx(loss_of(rev)).epsilon(1e-6));
    }
}

TEST_CASE("training determinism and checkpoint round trip") {
    auto cfg = tiny_cfg();
    auto tok = tu::shared_tok(2);

    auto run = [&](const std::string& path) {
        Rng rng(31);
        auto pools = toy_pools(tok, rng, 4, 4);
        Model<float> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 5);
        TrainRunConfig rc;
        rc.optim.total_steps = 6;
        rc.optim.warmup_steps = 2;
        rc.batch.batch_size = 4;
        rc.batch.p_audio = 0.5;
        rc.batch.seed = 3;
        run_training(m, pools, {}, rc);
        save_checkpoint(m, path);
    };
    run("ckpt_a.bin");
    run("ckpt_b.bin");
    CHECK(digest_file("ckpt_a.bin") == digest_file("ckpt_b.bin"));

    auto loaded = load_checkpoint<float>("ckpt_a.bin");
    Model<float> reference(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 5);
    REQUIRE(loaded->params.count() == reference.params.count());
    // loaded params differ from a fresh model (training moved them) but match
    // the saved file; spot-check shapes and a trainable tensor
    CHECK(loaded->cfg.d_model == cfg.d_model);
    CHECK(loaded->adapter.ca_sharing == CaSharing::qkv);
    std::remove("ckpt_a.bin");
    std::remove("ckpt_b.bin");

    CHECK_THROWS_AS(load_checkpoint<float>("nonexistent.bin"), IoError);
}

TEST_CASE("grad check on the full adapter stack (f64)") {
    auto cfg = tiny_cfg();
    auto tok = tu::shared_tok(2);
    Rng rng(41);

    SECTION("speech sample") {
        Model<double> m(cfg, {GateMode::per_layer, CaSharing::qkv, 8}, 6);
        TrainingSample ts;
        auto sp = tts_stub({{Role::user, "what is in the image", ""}, {Role::assistant, "red ball", ""}},
                           tok, 2);
        sp.image = m.encode_image(tu::random_image(rng));
        ts.value = sp;
        auto rep = grad_check(m, ts, 8, 1);
        INFO("worst: " << rep.worst_param);
        CHECK(rep.max_rel_err <= 1e-4);
    }
    SECTION("speechless sample with image") {
        Model<double> m(cfg, {GateMode::shared, CaSharing::none, 8}, 6);
        TrainingSample ts;
        auto s = speechless_from_transcript(
            {{Role::user, "what is in the image", ""}, {Role::assistant, "red ball", ""}}, tok,
            m.encode_image(tu::random_image(rng)));
        ts.value = s;
        auto rep = grad_check(m, ts, 8, 1);
        INFO("worst: " << rep.worst_param);
        CHECK(rep.max_rel_err <= 1e-4);
    }
}

TEST_CASE("lr schedule shape") {
    OptimConfig c;
    c.lr = 1.0;
    c.warmup_steps = 10;
    c.total_steps = 110;
    CHECK(lr_at(c, 5) == Catch::Approx(0.5));
    CHECK(lr_at(c, 10) == Catch::Approx(1.0));
    CHECK(lr_at(c, 60) == Catch::Approx(0.5).margin(1e-6));
    CHECK(lr_at(c, 110) == 0.0);
    CHECK(lr_at(c, 200) == 0.0);
}
