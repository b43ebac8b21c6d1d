#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tuneshield/backends.hpp"

namespace tuneshield::backends {

struct HttpResponse {
    int status = 0;
    std::string body;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

// Minimal POST transport so wire-format logic is testable without a network.
class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual HttpResponse post(const std::string& path, const std::string& body,
                              const HttpHeaders& headers) = 0;
};

// cpp-httplib transport against a real host.
std::unique_ptr<HttpTransport> make_httplib_transport(const std::string& host);

struct RemoteBackendConfig {
    std::string host;
    std::string score_path = "/v1/score";
    std::string generate_path = "/v1/generate";
    std::string api_key_env = "TS_BACKEND_KEY";  // env var holding the bearer token
    int max_retries = 3;
    int base_delay_ms = 250;
};

// Adapter speaking the remote wire contract: requests carry the serialized prompt
// segments plus either `choices` or generation params; responses carry per-choice
// natural-log likelihoods or generated text. Carries no scoring or sampling math of
// its own. Retries 429/5xx with exponential backoff, then raises TransportError with
// the attempt count and last status.
class RemoteBackend final : public ChoiceScorer, public Generator {
public:
    using Sleeper = std::function<void(int /*ms*/)>;

    RemoteBackend(RemoteBackendConfig config, std::unique_ptr<HttpTransport> transport,
                  Sleeper sleeper = nullptr);

    std::vector<ChoiceScore> score_choices(const PromptText& prompt,
                                           const std::vector<std::string>& choices) const override;
    std::string generate(const PromptText& prompt, const GenerationParams& params) const override;
    std::string id() const override;

private:
    HttpResponse post_with_retries(const std::string& path, const std::string& body) const;

    RemoteBackendConfig config_;
    std::unique_ptr<HttpTransport> transport_;
    Sleeper sleeper_;
    std::string api_key_;
};

}  // namespace tuneshield::backends
