#include "tuneshield/remote_backend.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace tuneshield::backends {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

class HttplibTransport final : public HttpTransport {
public:
    explicit HttplibTransport(std::string host) : host_(std::move(host)) {}

    HttpResponse post(const std::string& path, const std::string& body,
                      const HttpHeaders& headers) override {
        httplib::Client client(host_);
        client.set_connection_timeout(10);
        client.set_read_timeout(60);
        httplib::Headers hh;
        for (const auto& [k, v] : headers) hh.emplace(k, v);
        auto res = client.Post(path, hh, body, "application/json");
        if (!res) throw TransportError("no response from " + host_ + path);
        return {res->status, res->body};
    }

private:
    std::string host_;
};

ordered_json segments_json(const PromptText& prompt) {
    ordered_json segs = ordered_json::array();
    for (const auto& seg : prompt.segments) {
        segs.push_back(ordered_json{{"tag", to_string(seg.tag)}, {"text", seg.text}});
    }
    return segs;
}

}  // namespace

std::unique_ptr<HttpTransport> make_httplib_transport(const std::string& host) {
    return std::make_unique<HttplibTransport>(host);
}

RemoteBackend::RemoteBackend(RemoteBackendConfig config, std::unique_ptr<HttpTransport> transport,
                             Sleeper sleeper)
    : config_(std::move(config)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
    if (!transport_) throw ValidationError("remote backend needs a transport");
    if (!sleeper_) {
        sleeper_ = [](int ms) { std::this_thread::sleep_for(std::chrono::milliseconds(ms)); };
    }
    if (!config_.api_key_env.empty()) {
        if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
    }
}

std::string RemoteBackend::id() const {
    return "remote(" + config_.host + ")";
}

HttpResponse RemoteBackend::post_with_retries(const std::string& path,
                                              const std::string& body) const {
    HttpHeaders headers;
    if (!api_key_.empty()) headers.emplace_back("Authorization", "Bearer " + api_key_);

    int last_status = 0;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) sleeper_(config_.base_delay_ms * (1 << (attempt - 1)));
        HttpResponse res = transport_->post(path, body, headers);
        if (res.status == 429 || res.status >= 500) {
            last_status = res.status;
            continue;
        }
        if (res.status != 200)
            throw TransportError("remote backend returned status " + std::to_string(res.status) +
                                 " for " + path);
        return res;
    }
    throw TransportError("remote backend gave up on " + path + " after " +
                         std::to_string(config_.max_retries + 1) + " attempts (last status " +
                         std::to_string(last_status) + ")");
}

std::vector<ChoiceScore> RemoteBackend::score_choices(const PromptText& prompt,
                                                      const std::vector<std::string>& choices) const {
    ordered_json body;
    body["segments"] = segments_json(prompt);
    body["choices"] = choices;
    HttpResponse res = post_with_retries(config_.score_path, body.dump());

    json j;
    try {
        j = json::parse(res.body);
    } catch (const json::exception& e) {
        throw TransportError(std::string("unparseable score response: ") + e.what());
    }
    if (!j.contains("scores") || !j["scores"].is_array())
        throw TransportError("score response lacks 'scores'");
    std::vector<ChoiceScore> out;
    for (const auto& s : j["scores"]) {
        out.push_back({s.at("choice").get<std::string>(), s.at("log_likelihood").get<double>()});
    }
    return out;
}

std::string RemoteBackend::generate(const PromptText& prompt,
                                    const GenerationParams& params) const {
    ordered_json body;
    body["segments"] = segments_json(prompt);
    body["params"] = ordered_json{{"temperature", params.temperature},
                                  {"max_tokens", params.max_tokens},
                                  {"seed", params.seed}};
    HttpResponse res = post_with_retries(config_.generate_path, body.dump());

    json j;
    try {
        j = json::parse(res.body);
    } catch (const json::exception& e) {
        throw TransportError(std::string("unparseable generate response: ") + e.what());
    }
    if (!j.contains("text") || !j["text"].is_string())
        throw TransportError("generate response lacks 'text'");
    return j["text"].get<std::string>();
}

}  // namespace tuneshield::backends
