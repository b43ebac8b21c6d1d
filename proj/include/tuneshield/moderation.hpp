#pragma once

#include <functional>
#include <memory>
#include <string>

#include "tuneshield/classify.hpp"
#include "tuneshield/remote_backend.hpp"

namespace tuneshield::classify {

enum class ModerationStyle {
    perspective,  // score endpoint: toxicity score in [0,1] maps to p_no, threshold 0.5
    openai,       // flag endpoint: boolean flagged maps to is_toxic, p_no is 1.0 / 0.0
};

std::string to_string(ModerationStyle style);

struct ModerationConfig {
    ModerationStyle style = ModerationStyle::perspective;
    std::string host;
    std::string path;
    std::string api_key;
    int max_retries = 3;
    int base_delay_ms = 200;
    double requests_per_second = 1.0;  // token bucket refill rate
    double burst = 1.0;                // bucket capacity
};

// Fixed environment variable names for credentials.
inline constexpr const char* kPerspectiveKeyEnv = "TS_PERSPECTIVE_KEY";
inline constexpr const char* kOpenAiKeyEnv = "TS_OPENAI_KEY";

// Reads the key from the fixed env var; ValidationError when absent.
ModerationConfig perspective_config_from_env(const std::string& host = "https://commentanalyzer.googleapis.com");
ModerationConfig openai_config_from_env(const std::string& host = "https://api.openai.com");

// Token bucket with injectable clock/sleeper so rate limiting is testable.
class RateLimiter {
public:
    using Clock = std::function<double()>;       // seconds, monotonic
    using Sleeper = std::function<void(double)>; // seconds

    RateLimiter(double requests_per_second, double burst, Clock clock = nullptr,
                Sleeper sleeper = nullptr);

    void acquire();

private:
    double rate_;
    double capacity_;
    double tokens_;
    double last_;
    Clock clock_;
    Sleeper sleeper_;
};

// Moderation-API client. Transport is injectable; real runs use the httplib
// transport. Retries 429/5xx with exponential backoff; when retries are exhausted
// the verdict comes back undetermined rather than throwing.
class ModerationClient {
public:
    ModerationClient(ModerationConfig config, std::unique_ptr<backends::HttpTransport> transport,
                     backends::RemoteBackend::Sleeper sleeper = nullptr);

    ClassificationVerdict classify(const corpus::ContextResponsePair& pair);
    std::string id() const;

private:
    std::string request_body(const corpus::ContextResponsePair& pair) const;
    ClassificationVerdict parse_response(const corpus::ContextResponsePair& pair,
                                         const std::string& body) const;

    ModerationConfig config_;
    std::unique_ptr<backends::HttpTransport> transport_;
    backends::RemoteBackend::Sleeper sleeper_;
    RateLimiter limiter_;
};

ClassificationVerdict moderation_api_classify(const corpus::ContextResponsePair& pair,
                                              ModerationClient& client);

}  // namespace tuneshield::classify
