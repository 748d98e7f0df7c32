#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <thread>

#include "testutil.hpp"
#include "vsm/dialogue.hpp"
#include "vsm/http_client.hpp"
#include "vsm/toytasks.hpp"

using namespace vsm;

namespace {
const InstructionSet& instructions() {
    static InstructionSet set = InstructionSet::load_dir(default_instruction_dir());
    return set;
}
}  // namespace

TEST_CASE("render_instruction substitutions") {
    const auto& set = instructions();

    SECTION("caption is embedded verbatim, no slots remain") {
        for (const auto& id : set.ids()) {
            for (Role r : {Role::user, Role::assistant}) {
                auto text = render_instruction(set, id, r, "a red ball", 1);
                CHECK(text.find("{caption}") == std::string::npos);
                CHECK(text.find("{ROLE_SPECIFIC_TEXT}") == std::string::npos);
                if (r == Role::assistant || id == "LOC" || id == "PROP" || id == "NUM" ||
                    id == "TS1" || id == "TS2" || id == "LEAD1" || id == "LEAD2")
                    CHECK(text.find("a red ball") != std::string::npos);
            }
        }
    }
    SECTION("LOC user prompt emphasizes spatial relations") {
        auto text = render_instruction(set, "LOC", Role::user, "a red ball", 1);
        CHECK(text.find("you emphasize the spatial relations") != std::string::npos);
    }
    SECTION("unknown id is a template error") {
        CHECK_THROWS_AS(render_instruction(set, "NOPE", Role::user, "x", 1), TemplateError);
    }
    SECTION("empty caption rejected") {
        CHECK_THROWS_AS(render_instruction(set, "LOC", Role::user, "", 1), TemplateError);
    }
    SECTION("COMB forced start resolves branches from the seed") {
        // find a seed whose four draws all pick the first option
        bool found = false;
        for (uint64_t seed = 0; seed < 400 && !found; ++seed) {
            Rng probe = Rng(seed).split("forced_start");
            if (probe.next_double() < 0.5 && probe.next_double() < 0.5 && probe.next_double() < 0.75 &&
                probe.next_double() < 0.5) {
                auto text = render_instruction(set, "COMB", Role::user, "a red ball", seed, true);
                CHECK(text.find("LESS THAN 8 words") != std::string::npos);
                CHECK(text.find("direct style") != std::string::npos);
                CHECK(text.find("confident assertive tone") != std::string::npos);
                found = true;
            }
        }
        REQUIRE(found);
    }
    SECTION("branch frequencies follow the declared probabilities") {
        size_t counts[3] = {0, 0, 0};
        const int n = 20000;
        for (int i = 0; i < n; ++i) {
            Rng rng = Rng(uint64_t(i)).split("forced_start");
            std::vector<size_t> picks;
            resolve_forced_start(set.get("COMB"), rng, &picks);
            REQUIRE(picks.size() == 4);
            ++counts[picks[0]];
        }
        CHECK(std::abs(double(counts[0]) / n - 0.50) <= 0.01);
        CHECK(std::abs(double(counts[1]) / n - 0.25) <= 0.01);
        CHECK(std::abs(double(counts[2]) / n - 0.25) <= 0.01);
    }
}

TEST_CASE("run_dialogue with the scripted mock") {
    const auto& set = instructions();
    ScriptedMockClient user(Role::user), asst(Role::assistant);
    DialoguePolicy policy;

    SECTION("deterministic under a fixed seed") {
        auto a = run_dialogue(set, "a red ball at top left", "cap1", policy, user, asst, 42);
        auto b = run_dialogue(set, "a red ball at top left", "cap1", policy, user, asst, 42);
        REQUIRE(a.turns.size() == b.turns.size());
        for (size_t i = 0; i < a.turns.size(); ++i) {
            CHECK(a.turns[i].text == b.turns[i].text);
            CHECK(a.turns[i].instruction_id == b.turns[i].instruction_id);
        }
        auto c = run_dialogue(set, "a red ball at top left", "cap1", policy, user, asst, 43);
        bool differs = c.turns.size() != a.turns.size();
        for (size_t i = 0; !differs && i < std::min(a.turns.size(), c.turns.size()); ++i)
            differs = a.turns[i].text != c.turns[i].text;
        CHECK(differs);
    }

    SECTION("turn counts stay in [8,16] and roles alternate from the user") {
        for (uint64_t seed = 0; seed < 300; ++seed) {
            auto rec = run_dialogue(set, "a blue circle at bottom right", "c", policy, user, asst, seed);
            const size_t pairs = rec.turns.size() / 2;
            REQUIRE(rec.turns.size() % 2 == 0);
            REQUIRE(pairs >= 8);
            REQUIRE(pairs <= 16);
            for (size_t i = 0; i < rec.turns.size(); ++i)
                REQUIRE(rec.turns[i].role == (i % 2 == 0 ? Role::user : Role::assistant));
            // forced start is scaffolding only
            for (const auto& t : rec.turns) REQUIRE(t.text.find("ASKING A SINGLE") == std::string::npos);
        }
    }

    SECTION("per-turn instruction sampling is uniform over the pool") {
        std::map<std::string, size_t> counts;
        size_t total = 0;
        for (uint64_t seed = 0; seed < 800; ++seed) {
            auto rec = run_dialogue(set, "a red ball", "c", policy, user, asst, seed);
            for (size_t i = 2; i < rec.turns.size(); i += 2) {  // skip the COMB turn 0
                ++counts[rec.turns[i].instruction_id];
                ++total;
            }
        }
        for (const auto& id : policy.random_pool) {
            const double f = double(counts[id]) / double(total);
            INFO(id << " frequency " << f);
            CHECK(std::abs(f - 1.0 / 6.0) <= 0.01);
        }
    }

    SECTION("single-instruction policy pins every turn") {
        DialoguePolicy p2;
        p2.mode = "TS1";
        auto rec = run_dialogue(set, "a red ball", "c", p2, user, asst, 5);
        for (const auto& t : rec.turns) CHECK(t.instruction_id == "TS1");
    }

    SECTION("client failure surfaces a partial record") {
        struct FlakyClient : ChatClient {
            size_t calls = 0;
            std::string identity() const override { return "flaky"; }
            std::string complete(const std::string&, const std::vector<ChatMessage>&, uint64_t) override {
                if (++calls > 4) throw std::runtime_error("boom");
                return "ok question";
            }
        } flaky;
        DialoguePolicy p3;
        p3.retry_budget = 1;
        try {
            run_dialogue(set, "a red ball", "c", p3, flaky, asst, 5);
            FAIL("expected PartialDialogueError");
        } catch (const PartialDialogueError& e) {
            CHECK(e.partial.turns.size() >= 2);
        }
    }
}

TEST_CASE("benchmark_to_dialogue") {
    SECTION("caption items follow the canonical pattern") {
        BenchmarkItem item;
        item.caption = "a boy holding an umbrella";
        auto tr = benchmark_to_dialogue(item, /*eval=*/false, /*greeting=*/true, 7);
        REQUIRE(tr.size() == 3);
        CHECK(tr[0].role == Role::assistant);
        CHECK(tr[1].role == Role::user);
        CHECK(tr[1].text == "can you tell me what is in the image");
        CHECK(tr[2].text == "i see a boy holding an umbrella");
    }
    SECTION("evaluation mode withholds the answer") {
        BenchmarkItem item;
        item.caption = "a red ball";
        auto tr = benchmark_to_dialogue(item, /*eval=*/true, true, 7);
        REQUIRE(tr.size() == 2);
        CHECK(tr.back().role == Role::user);
    }
    SECTION("greeting can be disabled") {
        BenchmarkItem item;
        item.question = "what color is the square";
        item.answer = "red";
        auto tr = benchmark_to_dialogue(item, false, /*greeting=*/false, 7);
        REQUIRE(tr.size() == 2);
        CHECK(tr[0].role == Role::user);
    }
}

TEST_CASE("export_dataset round trip") {
    const auto& set = instructions();
    ScriptedMockClient user(Role::user), asst(Role::assistant);
    DialoguePolicy policy;
    policy.min_turns = 8;
    policy.max_turns = 9;

    auto tok = toy::standard_tokenizer();
    auto items = toy::make_caption_items(3, 11);
    std::map<std::string, RasterImage> images;
    std::vector<DialogueRecord> records;
    for (size_t i = 0; i < items.size(); ++i) {
        std::string caption;
        for (const auto& w : items[i].answer) caption += w + " ";
        const std::string id = "img" + std::to_string(i);
        images[id] = toy::render_scene(items[i].scene);
        records.push_back(run_dialogue(set, caption, id, policy, user, asst, 100 + i));
    }

    auto enc = PatchEncoder::init(32, 8, Rng(3));
    const std::string dir = "export_test_dir";
    ExportConfig cfg;
    cfg.out_dir = dir;
    auto res = export_dataset(records, images, tok, &enc, cfg);

    auto speechless = load_dataset_jsonl(res.speechless_path, &enc);
    auto speech = load_dataset_jsonl(res.speech_path, &enc);
    REQUIRE(speechless.size() == 3);
    REQUIRE(speech.size() == 3);
    StreamVocab v;
    for (const auto& e : speechless) {
        e.sample.speechless().validate(v);
        REQUIRE(e.sample.image());
    }
    for (const auto& e : speech) e.sample.speech().validate(v);

    // determinism: a second export to another directory produces identical bytes
    const std::string dir2 = "export_test_dir2";
    ExportConfig cfg2 = cfg;
    cfg2.out_dir = dir2;
    auto res2 = export_dataset(records, images, tok, &enc, cfg2);
    CHECK(digest_file(res.speechless_path) == digest_file(res2.speechless_path));
    CHECK(digest_file(res.speech_path) == digest_file(res2.speech_path));

    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("transcript file shape") {
    DialogueRecord rec;
    rec.caption_id = "c0";
    rec.seed = 9;
    rec.turns = {{Role::user, "what is in the image", "COMB"}, {Role::assistant, "i see a ball", "COMB"}};
    auto j = transcript_json(rec);
    CHECK(j.at("caption_id") == "c0");
    CHECK(j.at("turns").size() == 2);
    CHECK(j.at("turns")[0].at("role") == "user");
    CHECK(j.at("seed") == 9);
}

TEST_CASE("http client against a local stub server") {
    httplib::Server srv;
    srv.Post("/v1/chat/completions", [](const httplib::Request& req, httplib::Response& res) {
        auto j = nlohmann::json::parse(req.body);
        const auto& messages = j.at("messages");
        nlohmann::json out{{"choices",
                            {{{"message",
                               {{"role", "assistant"},
                                {"content", "echo:" + messages.back().at("content").get<std::string>()}}}}}}};
        res.set_content(out.dump(), "application/json");
    });
    int port = srv.bind_to_any_port("127.0.0.1");
    std::thread t([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();

    HttpChatClient::Options opt;
    opt.endpoint = "http://127.0.0.1:" + std::to_string(port);
    HttpChatClient client(opt);
    auto reply = client.complete("sys", {{"user", "ping"}}, 0);
    CHECK(reply == "echo:ping");

    srv.stop();
    t.join();

    HttpChatClient::Options bad;
    bad.endpoint = "http://127.0.0.1:1";
    bad.retries = 0;
    HttpChatClient dead(bad);
    CHECK_THROWS_AS(dead.complete("sys", {}, 0), ClientError);
}
