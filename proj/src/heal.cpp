#include "tuneshield/heal.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tuneshield/rng.hpp"

namespace tuneshield::heal {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(HealMode mode) {
    return mode == HealMode::nh ? "NH" : "CH";
}

HealMode heal_mode_from_string(const std::string& s) {
    if (s == "NH" || s == "nh") return HealMode::nh;
    if (s == "CH" || s == "ch") return HealMode::ch;
    throw ParseError("unknown healing mode '" + s + "' (expected NH or CH)");
}

const ChTemplate& ChTemplate::default_template() {
    static const ChTemplate tmpl{
        "The following is the recent context of a conversation between two users.\n\n"
        "{context}\n\n"
        "Write the next turn of the conversation: a single response that is contextually "
        "relevant to the conversation while being empathetic and prosocial. Reply with the "
        "response text only."};
    return tmpl;
}

namespace {

void check_flagged(const corpus::ContextResponsePair& pair,
                   const classify::ClassificationVerdict& verdict) {
    if (verdict.pair_id != pair.id)
        throw ValidationError("verdict for pair '" + verdict.pair_id +
                              "' does not match pair '" + pair.id + "'");
    if (verdict.undetermined)
        throw ValidationError("pair '" + pair.id + "' has an undetermined verdict");
    if (!verdict.is_toxic)
        throw ValidationError("pair '" + pair.id + "' was not flagged toxic");
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool strip_prefix_ci(std::string& s, const std::string& prefix) {
    if (s.size() < prefix.size()) return false;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(s[i])) !=
            std::tolower(static_cast<unsigned char>(prefix[i])))
            return false;
    }
    s.erase(0, prefix.size());
    return true;
}

}  // namespace

std::string sanitize_generation(const std::string& text) {
    static const std::vector<std::string> kRoleMarkers = {
        "bot:", "response:", "assistant:", "user a:", "user b:",
    };
    std::string s = trim(text);
    bool changed = true;
    while (changed && !s.empty()) {
        changed = false;
        if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                              (s.front() == '\'' && s.back() == '\''))) {
            s = trim(s.substr(1, s.size() - 2));
            changed = true;
        }
        for (const auto& marker : kRoleMarkers) {
            if (strip_prefix_ci(s, marker)) {
                s = trim(s);
                changed = true;
            }
        }
    }
    return s;
}

HealingRecord heal_noncontextual(const corpus::ContextResponsePair& pair,
                                 const classify::ClassificationVerdict& verdict,
                                 std::string_view canned) {
    check_flagged(pair, verdict);
    if (canned.empty()) throw ValidationError("canned healing response must be non-empty");
    return HealingRecord{pair.id, HealMode::nh, std::string(canned)};
}

backends::PromptText build_ch_prompt(const corpus::ContextResponsePair& pair,
                                     const ChTemplate& tmpl) {
    const std::string placeholder = "{context}";
    const std::size_t at = tmpl.text.find(placeholder);
    if (at == std::string::npos)
        throw ValidationError("contextual healing template lacks the {context} placeholder");
    if (tmpl.text.find(placeholder, at + placeholder.size()) != std::string::npos)
        throw ValidationError("contextual healing template has more than one {context}");

    const std::string prefix = trim(tmpl.text.substr(0, at));
    const std::string suffix = trim(tmpl.text.substr(at + placeholder.size()));
    if (suffix.empty())
        throw ValidationError("contextual healing template needs instruction text after "
                              "{context}");

    // Context only: the flagged response never reaches the healing generator.
    backends::PromptText prompt;
    if (!prefix.empty())
        prompt.segments.push_back({backends::SegmentTag::description, prefix});
    prompt.segments.push_back(
        {backends::SegmentTag::input, corpus::render_transcript(pair.context)});
    prompt.segments.push_back({backends::SegmentTag::instruction, suffix});
    return prompt;
}

HealOutcome heal_contextual(const corpus::ContextResponsePair& pair,
                            const classify::ClassificationVerdict& verdict,
                            const backends::Generator& generator,
                            const backends::GenerationParams& params, const ChTemplate& tmpl,
                            int retry_limit, std::string_view canned) {
    check_flagged(pair, verdict);
    if (retry_limit < 0) throw ValidationError("retry_limit must be >= 0");

    backends::PromptText prompt = build_ch_prompt(pair, tmpl);
    HealOutcome outcome;
    for (int attempt = 0; attempt <= retry_limit; ++attempt) {
        ++outcome.attempts;
        backends::GenerationParams attempt_params = params;
        attempt_params.seed = mix_seed(params.seed, static_cast<std::uint64_t>(attempt));
        std::string text;
        try {
            text = backends::generate(generator, prompt, attempt_params);
        } catch (const std::exception&) {
            continue;  // generator failure burns an attempt, like an empty generation
        }
        text = sanitize_generation(text);
        if (!text.empty()) {
            outcome.record = HealingRecord{pair.id, HealMode::ch, std::move(text)};
            return outcome;
        }
    }
    // Recorded downgrade: the caller sees the NH fallback flag.
    outcome.record = HealingRecord{pair.id, HealMode::nh, std::string(canned)};
    outcome.fell_back_to_nh = true;
    return outcome;
}

namespace {

std::set<std::string> flagged_ids(const std::vector<classify::ClassificationVerdict>& verdicts) {
    std::set<std::string> out;
    for (const auto& v : verdicts) {
        if (v.is_toxic && !v.undetermined) out.insert(v.pair_id);
    }
    return out;
}

std::map<std::string, const HealingRecord*> record_index(const std::vector<HealingRecord>& records) {
    std::map<std::string, const HealingRecord*> out;
    for (const auto& r : records) {
        if (!out.emplace(r.pair_id, &r).second)
            throw IntegrityError("duplicate healing record for pair '" + r.pair_id + "'");
    }
    return out;
}

[[noreturn]] void missing_records(const std::vector<std::string>& missing) {
    std::string ids;
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) {
        if (i) ids += ", ";
        ids += missing[i];
    }
    if (missing.size() > 10) ids += ", ...";
    throw IntegrityError("flagged pairs without healing records: " + ids);
}

}  // namespace

corpus::ConversationDataset apply_healing(const corpus::ConversationDataset& dataset,
                                          const std::vector<classify::ClassificationVerdict>& verdicts,
                                          const std::vector<HealingRecord>& records) {
    const std::set<std::string> flagged = flagged_ids(verdicts);
    const auto index = record_index(records);

    std::vector<std::string> missing;
    for (const auto& id : flagged) {
        if (index.find(id) == index.end()) missing.push_back(id);
    }
    if (!missing.empty()) missing_records(missing);

    corpus::ConversationDataset out;
    out.name = dataset.name;
    out.pairs.reserve(dataset.pairs.size());
    for (const auto& pair : dataset.pairs) {
        corpus::ContextResponsePair copy = pair;
        if (flagged.count(pair.id)) {
            const HealingRecord& record = *index.at(pair.id);
            if (record.healed_response.empty())
                throw ValidationError("healing record for pair '" + pair.id + "' is empty");
            copy.response = record.healed_response;
            copy.provenance = corpus::Provenance::healed;
        }
        out.pairs.push_back(std::move(copy));
    }
    return out;
}

PreferenceBuildResult build_preference_set(const corpus::ConversationDataset& dataset,
                                           const std::vector<classify::ClassificationVerdict>& verdicts,
                                           const std::vector<HealingRecord>& records) {
    const std::set<std::string> flagged = flagged_ids(verdicts);
    const auto index = record_index(records);

    PreferenceBuildResult result;
    std::vector<std::string> missing;
    for (const auto& pair : dataset.pairs) {
        if (!flagged.count(pair.id)) continue;
        auto it = index.find(pair.id);
        if (it == index.end()) {
            missing.push_back(pair.id);
            continue;
        }
        const std::string& healed = it->second->healed_response;
        if (healed == pair.response) {
            ++result.dropped_degenerate;  // nothing to prefer between identical responses
            continue;
        }
        result.data.triplets.push_back({pair.id, pair.context, healed, pair.response});
    }
    if (!missing.empty()) missing_records(missing);
    return result;
}

void save_records(const std::vector<HealingRecord>& records, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write healing records: " + path.string());
    for (const auto& r : records) {
        ordered_json j;
        j["pair_id"] = r.pair_id;
        j["mode"] = to_string(r.mode);
        j["healed_response"] = r.healed_response;
        out << j.dump() << '\n';
    }
}

std::vector<HealingRecord> load_records(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open healing records: " + path.string());
    std::vector<HealingRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            out.push_back({j.at("pair_id").get<std::string>(),
                           heal_mode_from_string(j.at("mode").get<std::string>()),
                           j.at("healed_response").get<std::string>()});
        } catch (const json::exception& e) {
            throw ParseError("invalid healing record on line " + std::to_string(line_no) + ": " +
                             e.what());
        }
    }
    return out;
}

void save_preferences(const PreferenceDataset& data, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write preference set: " + path.string());
    for (const auto& t : data.triplets) {
        ordered_json j;
        j["pair_id"] = t.pair_id;
        j["context"] = corpus::context_to_json(t.context);
        j["y_heal"] = t.y_heal;
        j["y_toxic"] = t.y_toxic;
        out << j.dump() << '\n';
    }
}

PreferenceDataset load_preferences(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open preference set: " + path.string());
    PreferenceDataset out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            out.triplets.push_back({j.at("pair_id").get<std::string>(),
                                    corpus::context_from_json(j.at("context")),
                                    j.at("y_heal").get<std::string>(),
                                    j.at("y_toxic").get<std::string>()});
        } catch (const json::exception& e) {
            throw ParseError("invalid preference triplet on line " + std::to_string(line_no) +
                             ": " + e.what());
        }
    }
    return out;
}

}  // namespace tuneshield::heal
