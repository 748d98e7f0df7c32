#pragma once

#include <cstdlib>
#include <semaphore>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "vsm/dialogue.hpp"

namespace vsm {

// Minimal chat-completion wire contract over HTTP: system plus alternating
// messages in, text out. Credentials come from the environment and are never
// persisted. A process-wide semaphore caps concurrent requests.
class HttpChatClient : public ChatClient {
public:
    struct Options {
        std::string endpoint;       // e.g. http://host:port
        std::string path = "/v1/chat/completions";
        std::string model;          // optional model tag passed through
        size_t retries = 2;
        int timeout_s = 30;
        const char* api_key_env = "VSM_API_KEY";
    };

    explicit HttpChatClient(Options opt) : opt_(std::move(opt)) {
        const char* key = std::getenv(opt_.api_key_env);
        if (key) api_key_ = key;
    }

    std::string identity() const override { return "http:" + opt_.endpoint; }

    std::string complete(const std::string& system_prompt, const std::vector<ChatMessage>& history,
                         uint64_t) override {
        nlohmann::json messages = nlohmann::json::array();
        messages.push_back({{"role", "system"}, {"content", system_prompt}});
        for (const auto& m : history) messages.push_back({{"role", m.role}, {"content", m.content}});
        nlohmann::json body{{"messages", messages}};
        if (!opt_.model.empty()) body["model"] = opt_.model;

        static std::counting_semaphore<64> gate(8);  // global concurrency cap
        gate.acquire();
        struct Release {
            std::counting_semaphore<64>& g;
            ~Release() { g.release(); }
        } release{gate};

        std::string last_error;
        for (size_t attempt = 0; attempt <= opt_.retries; ++attempt) {
            httplib::Client cli(opt_.endpoint);
            cli.set_read_timeout(opt_.timeout_s, 0);
            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
            auto res = cli.Post(opt_.path, headers, body.dump(), "application/json");
            if (res && res->status == 200) {
                try {
                    auto j = nlohmann::json::parse(res->body);
                    return j.at("choices").at(0).at("message").at("content").get<std::string>();
                } catch (const std::exception& e) {
                    last_error = std::string("bad response: ") + e.what();
                }
            } else {
                last_error = res ? "status " + std::to_string(res->status)
                                 : "transport error " + httplib::to_string(res.error());
            }
            if (attempt < opt_.retries)
                std::this_thread::sleep_for(std::chrono::milliseconds(50 * (attempt + 1)));
        }
        throw ClientError("http chat client: " + last_error);
    }

private:
    Options opt_;
    std::string api_key_;
};

}  // namespace vsm
