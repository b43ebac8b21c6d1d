#include "tuneshield/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tuneshield/rng.hpp"

namespace tuneshield::corpus {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(Speaker s) {
    switch (s) {
        case Speaker::user_a: return "user-A";
        case Speaker::user_b: return "user-B";
        case Speaker::bot: return "bot";
    }
    throw ValidationError("unhandled speaker");
}

Speaker speaker_from_string(const std::string& s) {
    if (s == "user-A") return Speaker::user_a;
    if (s == "user-B") return Speaker::user_b;
    if (s == "bot") return Speaker::bot;
    throw ParseError("unknown speaker '" + s + "' (expected user-A, user-B or bot)");
}

std::string to_string(GoldLabel l) {
    return l == GoldLabel::toxic ? "toxic" : "non-toxic";
}

GoldLabel gold_label_from_string(const std::string& s) {
    if (s == "toxic") return GoldLabel::toxic;
    if (s == "non-toxic") return GoldLabel::non_toxic;
    throw ParseError("unknown gold_label '" + s + "' (expected toxic or non-toxic)");
}

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::original: return "original";
        case Provenance::injected: return "injected";
        case Provenance::healed: return "healed";
    }
    throw ValidationError("unhandled provenance");
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "original") return Provenance::original;
    if (s == "injected") return Provenance::injected;
    if (s == "healed") return Provenance::healed;
    throw ParseError("unknown provenance '" + s + "'");
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string speaker_label(Speaker s) {
    switch (s) {
        case Speaker::user_a: return "User A";
        case Speaker::user_b: return "User B";
        case Speaker::bot: return "Bot";
    }
    return "User A";
}

}  // namespace

ContextResponsePair pair_from_json(const json& j, std::size_t line_no) {
    auto where = [line_no] {
        return line_no ? " (line " + std::to_string(line_no) + ")" : std::string();
    };
    if (!j.is_object()) throw ParseError("expected a JSON object" + where());
    if (!j.contains("context") || !j["context"].is_array())
        throw ParseError("missing or non-array 'context'" + where());
    if (!j.contains("response") || !j["response"].is_string())
        throw ParseError("missing or non-string 'response'" + where());

    ContextResponsePair pair;
    if (j.contains("id")) {
        if (!j["id"].is_string()) throw ParseError("non-string 'id'" + where());
        pair.id = j["id"].get<std::string>();
    }
    for (const auto& u : j["context"]) {
        if (!u.is_object() || !u.contains("speaker") || !u.contains("text"))
            throw ParseError("context utterances need 'speaker' and 'text'" + where());
        Utterance utt;
        try {
            utt.speaker = speaker_from_string(u["speaker"].get<std::string>());
        } catch (const ParseError& e) {
            throw ParseError(std::string(e.what()) + where());
        }
        utt.text = u["text"].get<std::string>();
        if (trim(utt.text).empty())
            throw ParseError("utterance text empty after trimming" + where());
        pair.context.push_back(std::move(utt));
    }
    pair.response = j["response"].get<std::string>();
    if (j.contains("gold_label") && !j["gold_label"].is_null()) {
        try {
            pair.gold_label = gold_label_from_string(j["gold_label"].get<std::string>());
        } catch (const ParseError& e) {
            throw ParseError(std::string(e.what()) + where());
        }
    }
    if (j.contains("subcategory") && !j["subcategory"].is_null())
        pair.subcategory = j["subcategory"].get<std::string>();
    if (j.contains("provenance") && !j["provenance"].is_null()) {
        try {
            pair.provenance = provenance_from_string(j["provenance"].get<std::string>());
        } catch (const ParseError& e) {
            throw ParseError(std::string(e.what()) + where());
        }
    }
    return pair;
}

ordered_json pair_to_json(const ContextResponsePair& pair) {
    ordered_json j;
    j["id"] = pair.id;
    ordered_json ctx = ordered_json::array();
    for (const auto& u : pair.context) {
        ctx.push_back(ordered_json{{"speaker", to_string(u.speaker)}, {"text", u.text}});
    }
    j["context"] = std::move(ctx);
    j["response"] = pair.response;
    if (pair.gold_label) j["gold_label"] = to_string(*pair.gold_label);
    if (pair.subcategory) j["subcategory"] = *pair.subcategory;
    j["provenance"] = to_string(pair.provenance);
    return j;
}

void validate_pair(const ContextResponsePair& pair) {
    for (const auto& u : pair.context) {
        if (trim(u.text).empty()) throw ValidationError("utterance text empty after trimming");
    }
}

ConversationDataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
    if (format != DatasetFormat::jsonl) throw ValidationError("unsupported dataset format");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open dataset file: " + path.string());

    ConversationDataset ds;
    ds.name = path.stem().string();
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("invalid JSON on line " + std::to_string(line_no) + ": " + e.what());
        }
        ContextResponsePair pair = pair_from_json(j, line_no);
        if (pair.id.empty()) {
            // Stable synthetic id from position and content.
            std::uint64_t h = mix_seed(fnv1a64(line), line_no);
            char buf[32];
            std::snprintf(buf, sizeof(buf), "p%016llx", static_cast<unsigned long long>(h));
            pair.id = buf;
        }
        if (!seen.insert(pair.id).second)
            throw IntegrityError("duplicate pair id '" + pair.id + "' on line " +
                                 std::to_string(line_no));
        ds.pairs.push_back(std::move(pair));
    }
    return ds;
}

void save_dataset(const ConversationDataset& dataset, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write dataset file: " + path.string());
    for (const auto& pair : dataset.pairs) {
        out << pair_to_json(pair).dump() << '\n';
    }
}

std::size_t injected_count(std::size_t total_size, double rate) {
    return static_cast<std::size_t>(std::floor(rate * static_cast<double>(total_size) + 0.5));
}

ConversationDataset inject_toxic(const ConversationDataset& clean_pool,
                                 const ConversationDataset& toxic_pool, const PoisonSpec& spec) {
    if (!(spec.injection_rate >= 0.0 && spec.injection_rate <= 1.0))
        throw ValidationError("injection_rate must be in [0, 1]");
    if (spec.total_size == 0) throw ValidationError("total_size must be positive");
    for (const auto& pair : toxic_pool.pairs) {
        if (!pair.gold_label || *pair.gold_label != GoldLabel::toxic)
            throw ValidationError("toxic pool pair '" + pair.id + "' is not gold-labeled toxic");
    }

    const std::size_t want_toxic = injected_count(spec.total_size, spec.injection_rate);
    const std::size_t want_clean = spec.total_size - want_toxic;
    if (want_toxic > toxic_pool.pairs.size())
        throw CapacityError("toxic pool too small: need " + std::to_string(want_toxic) +
                            ", have " + std::to_string(toxic_pool.pairs.size()));
    if (want_clean > clean_pool.pairs.size())
        throw CapacityError("clean pool too small: need " + std::to_string(want_clean) +
                            ", have " + std::to_string(clean_pool.pairs.size()));

    Rng rng(spec.seed);
    std::vector<std::size_t> toxic_idx = rng.sample_indices(toxic_pool.pairs.size(), want_toxic);
    std::vector<std::size_t> clean_idx = rng.sample_indices(clean_pool.pairs.size(), want_clean);

    ConversationDataset out;
    out.name = clean_pool.name;
    out.pairs.reserve(spec.total_size);
    for (std::size_t i : toxic_idx) {
        ContextResponsePair p = toxic_pool.pairs[i];
        p.provenance = Provenance::injected;
        out.pairs.push_back(std::move(p));
    }
    for (std::size_t i : clean_idx) out.pairs.push_back(clean_pool.pairs[i]);
    rng.shuffle(out.pairs);

    std::set<std::string> seen;
    for (const auto& pair : out.pairs) {
        if (!seen.insert(pair.id).second)
            throw IntegrityError("pair id '" + pair.id + "' appears in both pools");
    }
    return out;
}

std::vector<ConversationDataset> split(const ConversationDataset& dataset,
                                       const std::vector<double>& fractions, std::uint64_t seed) {
    if (fractions.empty()) throw ValidationError("split needs at least one fraction");
    double sum = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw ValidationError("split fractions must be non-negative");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ValidationError("split fractions must sum to 1 (got " + std::to_string(sum) + ")");

    const std::size_t n = dataset.pairs.size();
    std::vector<std::size_t> counts(fractions.size());
    std::vector<std::pair<double, std::size_t>> remainders;  // (-remainder, index) for stable order
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        double exact = fractions[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[i];
        remainders.emplace_back(-(exact - std::floor(exact)), i);
    }
    std::stable_sort(remainders.begin(), remainders.end());
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) {
        counts[remainders[k % remainders.size()].second] += 1;
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    std::vector<ConversationDataset> out(fractions.size());
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        out[i].name = dataset.name + "/" + std::to_string(i);
        out[i].pairs.reserve(counts[i]);
        for (std::size_t k = 0; k < counts[i]; ++k) {
            out[i].pairs.push_back(dataset.pairs[order[cursor++]]);
        }
    }
    return out;
}

std::string render_transcript(const std::vector<Utterance>& context) {
    std::ostringstream out;
    for (std::size_t i = 0; i < context.size(); ++i) {
        if (i) out << '\n';
        out << speaker_label(context[i].speaker) << ": " << context[i].text;
    }
    return out.str();
}

std::string context_key(const std::vector<Utterance>& context) {
    return render_transcript(context);
}

ordered_json context_to_json(const std::vector<Utterance>& context) {
    ordered_json out = ordered_json::array();
    for (const auto& u : context) {
        out.push_back(ordered_json{{"speaker", to_string(u.speaker)}, {"text", u.text}});
    }
    return out;
}

std::vector<Utterance> context_from_json(const json& j) {
    std::vector<Utterance> out;
    for (const auto& u : j) {
        out.push_back({speaker_from_string(u.at("speaker").get<std::string>()),
                       u.at("text").get<std::string>()});
    }
    return out;
}

Speaker next_speaker(const std::vector<Utterance>& context) {
    if (context.empty()) return Speaker::user_b;
    switch (context.back().speaker) {
        case Speaker::user_a: return Speaker::user_b;
        case Speaker::user_b: return Speaker::user_a;
        case Speaker::bot: return Speaker::user_a;
    }
    return Speaker::user_b;
}

std::string render_transcript_with_response(const ContextResponsePair& pair) {
    std::ostringstream out;
    out << render_transcript(pair.context);
    if (!pair.context.empty()) out << '\n';
    out << speaker_label(next_speaker(pair.context)) << ": " << pair.response;
    return out.str();
}

}  // namespace tuneshield::corpus
