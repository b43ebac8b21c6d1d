#include "tuneshield/tabular_policy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace tuneshield::backends {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// log softmax with max-shift; keeps everything finite for finite logits.
std::vector<double> log_softmax(const std::vector<double>& logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : logits) mx = std::max(mx, x);
    double sum = 0.0;
    for (double x : logits) sum += std::exp(x - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

std::vector<double> softmax(const std::vector<double>& logits) {
    std::vector<double> out = log_softmax(logits);
    for (double& x : out) x = std::exp(x);
    return out;
}

bool has_space(const std::string& s) {
    return std::any_of(s.begin(), s.end(),
                       [](unsigned char c) { return std::isspace(c) != 0; });
}

}  // namespace

TabularPolicy::TabularPolicy(std::vector<std::string> vocabulary, std::string eos_token)
    : vocab_(std::move(vocabulary)), eos_(std::move(eos_token)) {
    if (vocab_.empty()) throw ValidationError("vocabulary must be non-empty");
    if (vocab_.size() > kMaxVocabulary)
        throw VocabularyError("vocabulary has " + std::to_string(vocab_.size()) +
                              " tokens; the cap is " + std::to_string(kMaxVocabulary));
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
        const std::string& tok = vocab_[i];
        if (tok.empty() || has_space(tok))
            throw VocabularyError("vocabulary tokens must be non-empty and whitespace-free");
        if (!index_.emplace(tok, i).second)
            throw VocabularyError("duplicate vocabulary token '" + tok + "'");
    }
    if (!eos_.empty() && index_.find(eos_) == index_.end())
        throw VocabularyError("eos token '" + eos_ + "' is not in the vocabulary");
}

bool TabularPolicy::has_token(const std::string& token) const {
    return index_.find(token) != index_.end();
}

std::size_t TabularPolicy::token_index(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end())
        throw VocabularyError("token '" + token + "' is not in the vocabulary");
    return it->second;
}

std::vector<double>& TabularPolicy::logits_row(const std::string& key, std::size_t position) {
    auto& rows = tables_[key];
    if (rows.size() <= position) rows.resize(position + 1);
    if (rows[position].empty()) rows[position].assign(vocab_.size(), 0.0);
    return rows[position];
}

const std::vector<double>* TabularPolicy::find_row(const std::string& key,
                                                   std::size_t position) const {
    auto it = tables_.find(key);
    if (it == tables_.end()) return nullptr;
    if (position >= it->second.size() || it->second[position].empty()) return nullptr;
    return &it->second[position];
}

std::vector<double> TabularPolicy::step_log_probs(const std::string& key,
                                                  std::size_t position) const {
    const std::vector<double>* row = find_row(key, position);
    if (!row) {
        // Untouched rows are uniform.
        return std::vector<double>(vocab_.size(), -std::log(static_cast<double>(vocab_.size())));
    }
    return log_softmax(*row);
}

std::vector<double> TabularPolicy::step_probs(const std::string& key, std::size_t position) const {
    const std::vector<double>* row = find_row(key, position);
    if (!row) return std::vector<double>(vocab_.size(), 1.0 / static_cast<double>(vocab_.size()));
    return softmax(*row);
}

double TabularPolicy::sequence_log_prob(const std::string& key,
                                        const std::vector<std::string>& tokens) const {
    double total = 0.0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const std::size_t v = token_index(tokens[t]);
        total += step_log_probs(key, t)[v];
    }
    return total;
}

std::vector<std::string> TabularPolicy::greedy_decode(const std::string& key,
                                                      std::size_t max_tokens) const {
    std::vector<std::string> out;
    for (std::size_t t = 0; t < max_tokens; ++t) {
        std::vector<double> lp = step_log_probs(key, t);
        std::size_t best = 0;
        for (std::size_t v = 1; v < lp.size(); ++v) {
            if (lp[v] > lp[best]) best = v;
        }
        const std::string& tok = vocab_[best];
        if (has_eos() && tok == eos_) break;
        out.push_back(tok);
    }
    return out;
}

std::vector<std::string> TabularPolicy::sample_decode(const std::string& key,
                                                      std::size_t max_tokens, double temperature,
                                                      Rng& rng) const {
    if (temperature < 0.0) throw ValidationError("temperature must be >= 0");
    if (temperature == 0.0) return greedy_decode(key, max_tokens);

    std::vector<std::string> out;
    for (std::size_t t = 0; t < max_tokens; ++t) {
        const std::vector<double>* row = find_row(key, t);
        std::vector<double> scaled;
        if (row) {
            scaled = *row;
            for (double& x : scaled) x /= temperature;
        } else {
            scaled.assign(vocab_.size(), 0.0);
        }
        std::vector<double> probs = softmax(scaled);
        double u = rng.next_unit();
        std::size_t pick = probs.size() - 1;
        double acc = 0.0;
        for (std::size_t v = 0; v < probs.size(); ++v) {
            acc += probs[v];
            if (u < acc) {
                pick = v;
                break;
            }
        }
        const std::string& tok = vocab_[pick];
        if (has_eos() && tok == eos_) break;
        out.push_back(tok);
    }
    return out;
}

std::vector<std::string> TabularPolicy::tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

std::string TabularPolicy::detokenize(const std::vector<std::string>& tokens) {
    std::ostringstream out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out << ' ';
        out << tokens[i];
    }
    return out.str();
}

std::vector<std::string> TabularPolicy::response_tokens(const std::string& response) const {
    std::vector<std::string> toks = tokenize(response);
    if (has_eos()) toks.push_back(eos_);
    return toks;
}

ordered_json TabularPolicy::to_json() const {
    ordered_json j;
    j["vocabulary"] = vocab_;
    j["eos_token"] = eos_;
    ordered_json tables = ordered_json::object();
    for (const auto& [key, rows] : tables_) {
        ordered_json jrows = ordered_json::array();
        for (const auto& row : rows) jrows.push_back(row);
        tables[key] = std::move(jrows);
    }
    j["tables"] = std::move(tables);
    return j;
}

TabularPolicy TabularPolicy::from_json(const json& j) {
    if (!j.contains("vocabulary")) throw ParseError("policy JSON needs 'vocabulary'");
    TabularPolicy policy(j["vocabulary"].get<std::vector<std::string>>(),
                         j.value("eos_token", std::string{}));
    if (j.contains("tables")) {
        for (const auto& [key, rows] : j["tables"].items()) {
            std::size_t pos = 0;
            for (const auto& row : rows) {
                if (row.empty()) {
                    ++pos;
                    continue;
                }
                auto values = row.get<std::vector<double>>();
                if (values.size() != policy.vocab_.size())
                    throw ParseError("logit row width does not match the vocabulary");
                policy.logits_row(key, pos) = std::move(values);
                ++pos;
            }
        }
    }
    return policy;
}

void TabularPolicy::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write policy file: " + path.string());
    out << to_json().dump(2) << '\n';
}

TabularPolicy TabularPolicy::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open policy file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("invalid policy JSON in " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

std::uint64_t TabularPolicy::checksum() const {
    return fnv1a64(to_json().dump());
}

double sequence_logprob(const TabularPolicy& policy, const std::vector<std::string>& context_tokens,
                        const std::vector<std::string>& response_tokens) {
    // Context tokens only form the conditioning key; they are free-form text.
    const std::string key = TabularPolicy::detokenize(context_tokens);
    return policy.sequence_log_prob(key, response_tokens);
}

namespace {

struct TrainItem {
    std::string key;
    std::vector<std::string> tokens;
    std::vector<std::size_t> token_ids;
};

std::vector<TrainItem> make_items(const TabularPolicy& policy,
                                  const corpus::ConversationDataset& dataset) {
    std::vector<TrainItem> items;
    items.reserve(dataset.pairs.size());
    for (const auto& pair : dataset.pairs) {
        TrainItem item;
        item.key = corpus::context_key(pair.context);
        item.tokens = policy.response_tokens(pair.response);
        item.token_ids.reserve(item.tokens.size());
        for (const auto& tok : item.tokens) item.token_ids.push_back(policy.token_index(tok));
        items.push_back(std::move(item));
    }
    return items;
}

double dataset_mean_nll(const TabularPolicy& policy, const std::vector<TrainItem>& items) {
    double total = 0.0;
    for (const auto& item : items) {
        for (std::size_t t = 0; t < item.token_ids.size(); ++t) {
            total -= policy.step_log_probs(item.key, t)[item.token_ids[t]];
        }
    }
    return total / static_cast<double>(items.size());
}

}  // namespace

SftResult sft_train(const TabularPolicy& policy, const corpus::ConversationDataset& dataset,
                    const SftHyper& hyper) {
    if (dataset.pairs.empty()) throw ValidationError("fine-tuning dataset is empty");
    if (hyper.learning_rate < 0.0) throw ValidationError("learning_rate must be >= 0");

    SftResult result;
    result.policy = policy;
    std::vector<TrainItem> items = make_items(result.policy, dataset);

    const std::size_t n = items.size();
    const std::size_t batch =
        (hyper.batch_size == 0 || hyper.batch_size > n) ? n : hyper.batch_size;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    TabularPolicy last_finite = result.policy;
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        Rng rng(mix_seed(hyper.seed, epoch));
        rng.shuffle(order);

        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t end = std::min(start + batch, n);
            const double inv = 1.0 / static_cast<double>(end - start);

            // Accumulate mean cross-entropy gradients per touched row, then step.
            std::map<std::pair<std::string, std::size_t>, std::vector<double>> grads;
            for (std::size_t k = start; k < end; ++k) {
                const TrainItem& item = items[order[k]];
                for (std::size_t t = 0; t < item.token_ids.size(); ++t) {
                    std::vector<double> p = result.policy.step_probs(item.key, t);
                    auto [it, fresh] = grads.try_emplace({item.key, t});
                    if (fresh) it->second.assign(p.size(), 0.0);
                    for (std::size_t v = 0; v < p.size(); ++v) it->second[v] += inv * p[v];
                    it->second[item.token_ids[t]] -= inv;
                }
            }
            for (const auto& [slot, grad] : grads) {
                std::vector<double>& row = result.policy.logits_row(slot.first, slot.second);
                for (std::size_t v = 0; v < row.size(); ++v)
                    row[v] -= hyper.learning_rate * grad[v];
            }
        }

        const double loss = dataset_mean_nll(result.policy, items);
        if (!std::isfinite(loss)) {
            throw TrainingDiverged("training loss became non-finite in epoch " +
                                       std::to_string(epoch + 1),
                                   std::move(last_finite), result.loss_trace);
        }
        result.loss_trace.push_back(loss);
        last_finite = result.policy;
    }
    return result;
}

std::vector<ChoiceScore> TabularChoiceScorer::score_choices(
    const PromptText& prompt, const std::vector<std::string>& choices) const {
    const std::string key = prompt.serialize();
    std::vector<ChoiceScore> out;
    out.reserve(choices.size());
    for (const auto& choice : choices) {
        // Surface forms score as-is: no eos involved.
        out.push_back({choice, policy_.sequence_log_prob(key, TabularPolicy::tokenize(choice))});
    }
    return out;
}

std::string TabularGenerator::generate(const PromptText& prompt,
                                       const GenerationParams& params) const {
    std::ostringstream key;
    bool first = true;
    for (const auto& seg : prompt.segments) {
        if (seg.tag != SegmentTag::input) continue;
        if (!first) key << "\n\n";
        key << seg.text;
        first = false;
    }
    Rng rng(params.seed);
    std::vector<std::string> tokens =
        policy_.sample_decode(key.str(), params.max_tokens, params.temperature, rng);
    return TabularPolicy::detokenize(tokens);
}

PromptText chat_prompt(const std::vector<corpus::Utterance>& context) {
    PromptText prompt;
    prompt.segments.push_back({SegmentTag::input, corpus::context_key(context)});
    prompt.segments.push_back(
        {SegmentTag::instruction, "Reply with the next turn of the conversation."});
    return prompt;
}

}  // namespace tuneshield::backends
