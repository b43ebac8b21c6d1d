#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tuneshield/backends.hpp"
#include "tuneshield/corpus.hpp"
#include "tuneshield/rng.hpp"

namespace tuneshield::backends {

// Tiny trainable chatbot stand-in. For each conditioning key (a serialized
// conversation context) it keeps one logit row per response position over a shared
// vocabulary (at most 64 tokens). Rows that were never touched behave as all-zero
// logits, i.e. a uniform distribution. Exact gradients are cheap, which is what the
// alignment math is verified against.
class TabularPolicy {
public:
    static constexpr std::size_t kMaxVocabulary = 64;

    TabularPolicy() = default;
    explicit TabularPolicy(std::vector<std::string> vocabulary, std::string eos_token = "");

    const std::vector<std::string>& vocabulary() const { return vocab_; }
    const std::string& eos_token() const { return eos_; }
    bool has_eos() const { return !eos_.empty(); }

    bool has_token(const std::string& token) const;
    std::size_t token_index(const std::string& token) const;  // VocabularyError if unknown

    // Mutable logit row for (key, position); materializes zeros on first touch.
    std::vector<double>& logits_row(const std::string& key, std::size_t position);
    // Read-only view; returns nullptr when the row was never materialized.
    const std::vector<double>* find_row(const std::string& key, std::size_t position) const;

    std::vector<double> step_log_probs(const std::string& key, std::size_t position) const;
    std::vector<double> step_probs(const std::string& key, std::size_t position) const;

    // Sum of per-step log-probabilities of `tokens` under this key. Tokens must be
    // in the vocabulary. Empty sequence scores 0.
    double sequence_log_prob(const std::string& key, const std::vector<std::string>& tokens) const;

    // Greedy decode: argmax token per step (lowest index wins ties), stopping at the
    // eos token or max_tokens.
    std::vector<std::string> greedy_decode(const std::string& key, std::size_t max_tokens) const;

    // Temperature sampling; temperature 0 falls back to the greedy path.
    std::vector<std::string> sample_decode(const std::string& key, std::size_t max_tokens,
                                           double temperature, Rng& rng) const;

    // Whitespace tokenizer shared by everything that maps text onto this policy.
    static std::vector<std::string> tokenize(const std::string& text);
    static std::string detokenize(const std::vector<std::string>& tokens);

    // Response tokens as used for training/alignment: tokenize + trailing eos.
    std::vector<std::string> response_tokens(const std::string& response) const;

    nlohmann::ordered_json to_json() const;
    static TabularPolicy from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static TabularPolicy load(const std::filesystem::path& path);

    // Stable digest of the serialized policy; used to prove a reference model was
    // left untouched.
    std::uint64_t checksum() const;

    const std::map<std::string, std::vector<std::vector<double>>>& tables() const { return tables_; }

private:
    std::vector<std::string> vocab_;
    std::map<std::string, std::size_t> index_;
    std::string eos_;
    std::map<std::string, std::vector<std::vector<double>>> tables_;
};

// Scores `response_tokens` conditioned on the key formed by joining
// `context_tokens` with single spaces. Context tokens are key material only and are
// not vocabulary-checked (prompt text is free-form); response tokens must be in the
// vocabulary.
double sequence_logprob(const TabularPolicy& policy, const std::vector<std::string>& context_tokens,
                        const std::vector<std::string>& response_tokens);

struct SftHyper {
    double learning_rate = 0.5;
    std::size_t epochs = 1;
    std::size_t batch_size = 0;  // 0 = full batch
    std::uint64_t seed = 0;
};

struct SftResult {
    TabularPolicy policy;
    std::vector<double> loss_trace;  // mean per-response NLL over the full dataset, once per epoch
};

// Carries the last finite state when the loss goes non-finite mid-run.
class TrainingDiverged : public TrainingError {
public:
    TrainingDiverged(const std::string& what, TabularPolicy last, std::vector<double> trace)
        : TrainingError(what), last_finite(std::move(last)), loss_trace(std::move(trace)) {}

    TabularPolicy last_finite;
    std::vector<double> loss_trace;
};

// Plain (mini)batch gradient descent on mean sequence NLL. Responses are tokenized
// with a trailing eos when the policy has one; contexts condition via
// corpus::context_key. The input policy is not modified.
SftResult sft_train(const TabularPolicy& policy, const corpus::ConversationDataset& dataset,
                    const SftHyper& hyper);

// Choice scorer over a tabular policy; conditions on the full serialized prompt.
class TabularChoiceScorer final : public ChoiceScorer {
public:
    explicit TabularChoiceScorer(TabularPolicy policy, std::string id = "tabular-scorer")
        : policy_(std::move(policy)), id_(std::move(id)) {}

    std::vector<ChoiceScore> score_choices(const PromptText& prompt,
                                           const std::vector<std::string>& choices) const override;
    std::string id() const override { return id_; }

    const TabularPolicy& policy() const { return policy_; }

private:
    TabularPolicy policy_;
    std::string id_;
};

// Generator over a tabular policy; conditions on the concatenated input segments so
// that generation keys line up with the context keys used during fine-tuning.
class TabularGenerator final : public Generator {
public:
    explicit TabularGenerator(TabularPolicy policy, std::string id = "tabular-generator")
        : policy_(std::move(policy)), id_(std::move(id)) {}

    std::string generate(const PromptText& prompt, const GenerationParams& params) const override;
    std::string id() const override { return id_; }

    const TabularPolicy& policy() const { return policy_; }

private:
    TabularPolicy policy_;
    std::string id_;
};

// Prompt wrapping one conversation context for chat generation.
PromptText chat_prompt(const std::vector<corpus::Utterance>& context);

}  // namespace tuneshield::backends
