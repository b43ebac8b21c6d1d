#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tuneshield/backends.hpp"
#include "tuneshield/classify.hpp"
#include "tuneshield/corpus.hpp"

namespace tuneshield::heal {

enum class HealMode { nh, ch };  // non-contextual (canned) vs contextual (generated)

std::string to_string(HealMode mode);
HealMode heal_mode_from_string(const std::string& s);

struct HealingRecord {
    std::string pair_id;
    HealMode mode = HealMode::nh;
    std::string healed_response;
};

// Canned non-contextual replacement. Overridable per run; overrides are recorded in
// run metadata.
inline constexpr std::string_view kCannedResponse =
    "I'm sorry, I'm not sure what to say. Thank you for sharing and talking to me though";

// Contextual-healing prompt template. {context} is the only placeholder and the
// response being replaced never appears in the prompt.
struct ChTemplate {
    std::string text;
    static const ChTemplate& default_template();
};

// The verdict argument enforces the precondition: pair must be flagged toxic (and
// determined) by the classification stage, and ids must line up.
HealingRecord heal_noncontextual(const corpus::ContextResponsePair& pair,
                                 const classify::ClassificationVerdict& verdict,
                                 std::string_view canned = kCannedResponse);

backends::PromptText build_ch_prompt(const corpus::ContextResponsePair& pair,
                                     const ChTemplate& tmpl = ChTemplate::default_template());

// Strips role markers, surrounding quotes and whitespace from generated text.
std::string sanitize_generation(const std::string& text);

struct HealOutcome {
    HealingRecord record;
    bool fell_back_to_nh = false;  // generator kept returning empty text
    int attempts = 0;
};

HealOutcome heal_contextual(const corpus::ContextResponsePair& pair,
                            const classify::ClassificationVerdict& verdict,
                            const backends::Generator& generator,
                            const backends::GenerationParams& params,
                            const ChTemplate& tmpl = ChTemplate::default_template(),
                            int retry_limit = 2, std::string_view canned = kCannedResponse);

// Replaces the responses of flagged pairs with their healing records; everything
// else (ids, contexts, order, size) is preserved. Flagged pairs without a record are
// an integrity error listing the missing ids.
corpus::ConversationDataset apply_healing(const corpus::ConversationDataset& dataset,
                                          const std::vector<classify::ClassificationVerdict>& verdicts,
                                          const std::vector<HealingRecord>& records);

struct PreferenceTriplet {
    std::string pair_id;  // provenance for error reporting
    std::vector<corpus::Utterance> context;
    std::string y_heal;
    std::string y_toxic;
};

struct PreferenceDataset {
    std::vector<PreferenceTriplet> triplets;
};

struct PreferenceBuildResult {
    PreferenceDataset data;
    std::size_t dropped_degenerate = 0;  // y_heal == y_toxic pairs, dropped with a warning count
};

// One triplet per flagged pair: shared context, healed response as the preferred
// side, the original (toxic) response as the rejected side.
PreferenceBuildResult build_preference_set(const corpus::ConversationDataset& dataset,
                                           const std::vector<classify::ClassificationVerdict>& verdicts,
                                           const std::vector<HealingRecord>& records);

void save_records(const std::vector<HealingRecord>& records, const std::filesystem::path& path);
std::vector<HealingRecord> load_records(const std::filesystem::path& path);

void save_preferences(const PreferenceDataset& data, const std::filesystem::path& path);
PreferenceDataset load_preferences(const std::filesystem::path& path);

}  // namespace tuneshield::heal
