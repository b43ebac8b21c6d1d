#include "tuneshield/moderation.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

#include <json.hpp>

namespace tuneshield::classify {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(ModerationStyle style) {
    return style == ModerationStyle::perspective ? "perspective" : "openai-moderation";
}

namespace {

std::string require_env(const char* name) {
    const char* value = std::getenv(name);
    if (!value || !*value)
        throw ValidationError(std::string("environment variable ") + name + " is not set");
    return value;
}

double steady_seconds() {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
}

}  // namespace

ModerationConfig perspective_config_from_env(const std::string& host) {
    ModerationConfig config;
    config.style = ModerationStyle::perspective;
    config.host = host;
    config.path = "/v1alpha1/comments:analyze";
    config.api_key = require_env(kPerspectiveKeyEnv);
    return config;
}

ModerationConfig openai_config_from_env(const std::string& host) {
    ModerationConfig config;
    config.style = ModerationStyle::openai;
    config.host = host;
    config.path = "/v1/moderations";
    config.api_key = require_env(kOpenAiKeyEnv);
    return config;
}

RateLimiter::RateLimiter(double requests_per_second, double burst, Clock clock, Sleeper sleeper)
    : rate_(requests_per_second),
      capacity_(std::max(burst, 1.0)),
      tokens_(std::max(burst, 1.0)),
      clock_(std::move(clock)),
      sleeper_(std::move(sleeper)) {
    if (!clock_) clock_ = steady_seconds;
    if (!sleeper_) {
        sleeper_ = [](double s) {
            std::this_thread::sleep_for(std::chrono::duration<double>(s));
        };
    }
    last_ = clock_();
}

void RateLimiter::acquire() {
    if (rate_ <= 0.0) return;  // unlimited
    const double now = clock_();
    tokens_ = std::min(capacity_, tokens_ + (now - last_) * rate_);
    last_ = now;
    if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
    }
    sleeper_((1.0 - tokens_) / rate_);
    last_ = clock_();
    tokens_ = 0.0;
}

ModerationClient::ModerationClient(ModerationConfig config,
                                   std::unique_ptr<backends::HttpTransport> transport,
                                   backends::RemoteBackend::Sleeper sleeper)
    : config_(std::move(config)),
      transport_(std::move(transport)),
      sleeper_(std::move(sleeper)),
      limiter_(config_.requests_per_second, config_.burst) {
    if (!transport_) throw ValidationError("moderation client needs a transport");
    if (config_.api_key.empty()) throw ValidationError("moderation client needs an API key");
    if (!sleeper_) {
        sleeper_ = [](int ms) { std::this_thread::sleep_for(std::chrono::milliseconds(ms)); };
    }
}

std::string ModerationClient::id() const {
    return to_string(config_.style);
}

std::string ModerationClient::request_body(const corpus::ContextResponsePair& pair) const {
    const std::string text = corpus::render_transcript_with_response(pair);
    if (config_.style == ModerationStyle::perspective) {
        ordered_json body;
        body["comment"] = ordered_json{{"text", text}};
        body["requestedAttributes"] = ordered_json{{"TOXICITY", ordered_json::object()}};
        return body.dump();
    }
    return ordered_json{{"input", text}}.dump();
}

ClassificationVerdict ModerationClient::parse_response(const corpus::ContextResponsePair& pair,
                                                       const std::string& body) const {
    ClassificationVerdict verdict;
    verdict.pair_id = pair.id;
    verdict.classifier_id = id();
    json j = json::parse(body);
    if (config_.style == ModerationStyle::perspective) {
        // Toxicity score stands in for p_no, thresholded the same way.
        const double score =
            j.at("attributeScores").at("TOXICITY").at("summaryScore").at("value").get<double>();
        if (!(score >= 0.0 && score <= 1.0))
            throw ParseError("toxicity score out of range: " + std::to_string(score));
        verdict.p_no = score;
        verdict.is_toxic = score >= 0.5;
    } else {
        const bool flagged = j.at("results").at(0).at("flagged").get<bool>();
        verdict.is_toxic = flagged;
        verdict.p_no = flagged ? 1.0 : 0.0;
    }
    return verdict;
}

ClassificationVerdict ModerationClient::classify(const corpus::ContextResponsePair& pair) {
    limiter_.acquire();

    backends::HttpHeaders headers;
    std::string path = config_.path;
    if (config_.style == ModerationStyle::perspective) {
        path += "?key=" + config_.api_key;  // Perspective-style key-in-query auth
    } else {
        headers.emplace_back("Authorization", "Bearer " + config_.api_key);
    }

    const std::string body = request_body(pair);
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) sleeper_(config_.base_delay_ms * (1 << (attempt - 1)));
        backends::HttpResponse res;
        try {
            res = transport_->post(path, body, headers);
        } catch (const std::exception&) {
            continue;  // transport-level failure counts as a retryable attempt
        }
        if (res.status == 429 || res.status >= 500) continue;
        if (res.status != 200) break;  // non-retryable; surfaced as undetermined below
        try {
            return parse_response(pair, res.body);
        } catch (const std::exception&) {
            break;
        }
    }
    // Bounded retries exhausted: surfaced, never a silent non-toxic verdict.
    return ClassificationVerdict{pair.id, 0.0, false, id(), std::nullopt, true};
}

ClassificationVerdict moderation_api_classify(const corpus::ContextResponsePair& pair,
                                              ModerationClient& client) {
    return client.classify(pair);
}

}  // namespace tuneshield::classify
