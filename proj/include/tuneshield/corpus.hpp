#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tuneshield/errors.hpp"

namespace tuneshield::corpus {

enum class Speaker { user_a, user_b, bot };

std::string to_string(Speaker s);
Speaker speaker_from_string(const std::string& s);

struct Utterance {
    Speaker speaker = Speaker::user_a;
    std::string text;  // non-empty after trimming
};

enum class GoldLabel { toxic, non_toxic };

std::string to_string(GoldLabel l);
GoldLabel gold_label_from_string(const std::string& s);

enum class Provenance { original, injected, healed };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct ContextResponsePair {
    std::string id;
    std::vector<Utterance> context;
    std::string response;
    std::optional<GoldLabel> gold_label;
    std::optional<std::string> subcategory;
    Provenance provenance = Provenance::original;
};

struct ConversationDataset {
    std::string name;
    std::vector<ContextResponsePair> pairs;
};

struct PoisonSpec {
    std::size_t total_size = 0;
    double injection_rate = 0.0;  // fraction of the final training set that is toxic
    std::uint64_t seed = 0;
};

enum class DatasetFormat { jsonl };

// JSONL, one pair per line, UTF-8, LF. Pairs without an explicit id get a stable
// one derived from line number and content. Duplicate ids are an integrity error;
// parse errors cite the 1-based line number.
ConversationDataset load_dataset(const std::filesystem::path& path,
                                 DatasetFormat format = DatasetFormat::jsonl);
void save_dataset(const ConversationDataset& dataset, const std::filesystem::path& path);

// Builds a training set of exactly spec.total_size pairs of which
// round(rate * total) come from the toxic pool (provenance rewritten to injected)
// and the remainder from the clean pool, then shuffles. Sampling is without
// replacement and fully determined by spec.seed.
ConversationDataset inject_toxic(const ConversationDataset& clean_pool,
                                 const ConversationDataset& toxic_pool,
                                 const PoisonSpec& spec);

// Disjoint, exhaustive partition; split sizes differ from fraction*N by at most 1.
std::vector<ConversationDataset> split(const ConversationDataset& dataset,
                                       const std::vector<double>& fractions,
                                       std::uint64_t seed);

// Canonical conditioning key for a conversation context. Every consumer of the toy
// policy (fine-tuning, alignment, perplexity, generation) must agree on this.
std::string context_key(const std::vector<Utterance>& context);

// Readable transcript ("User A: ..." lines) used when building prompts.
std::string render_transcript(const std::vector<Utterance>& context);

// Speaker of the candidate response: the alternate of the last context turn.
Speaker next_speaker(const std::vector<Utterance>& context);

// Transcript plus the response as the next turn.
std::string render_transcript_with_response(const ContextResponsePair& pair);

// round-half-up for the injected-pair count
std::size_t injected_count(std::size_t total_size, double rate);

nlohmann::ordered_json context_to_json(const std::vector<Utterance>& context);
std::vector<Utterance> context_from_json(const nlohmann::json& j);

// Single-pair (de)serialization used by the dataset files and by fixtures that
// decorate pairs with extra keys. line_no > 0 adds the location to parse errors.
nlohmann::ordered_json pair_to_json(const ContextResponsePair& pair);
ContextResponsePair pair_from_json(const nlohmann::json& j, std::size_t line_no = 0);

void validate_pair(const ContextResponsePair& pair);

}  // namespace tuneshield::corpus
