#include "tuneshield/backends.hpp"

#include <cmath>
#include <set>
#include <sstream>

namespace tuneshield::backends {

std::string to_string(SegmentTag tag) {
    switch (tag) {
        case SegmentTag::description: return "description";
        case SegmentTag::input: return "input";
        case SegmentTag::instruction: return "instruction";
    }
    throw ValidationError("unhandled segment tag");
}

SegmentTag segment_tag_from_string(const std::string& s) {
    if (s == "description") return SegmentTag::description;
    if (s == "input") return SegmentTag::input;
    if (s == "instruction") return SegmentTag::instruction;
    throw ParseError("unknown segment tag '" + s + "'");
}

bool PromptText::has_instruction() const {
    for (const auto& seg : segments) {
        if (seg.tag == SegmentTag::instruction) return true;
    }
    return false;
}

bool PromptText::ends_with_instruction_segment() const {
    return !segments.empty() && segments.back().tag == SegmentTag::instruction;
}

std::string PromptText::serialize() const {
    if (!has_instruction())
        throw ValidationError("prompt has no instruction segment");
    std::ostringstream out;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        if (i) out << "\n\n";
        out << segments[i].text;
    }
    return out.str();
}

std::vector<ChoiceScore> score_choices(const ChoiceScorer& backend, const PromptText& prompt,
                                       const std::vector<std::string>& choices) {
    if (choices.empty()) throw ValidationError("score_choices requires at least one choice");
    std::set<std::string> distinct(choices.begin(), choices.end());
    if (distinct.size() != choices.size())
        throw ValidationError("score_choices requires pairwise distinct choices");

    std::vector<ChoiceScore> scores = backend.score_choices(prompt, choices);
    if (scores.size() != choices.size())
        throw CapabilityError("backend '" + backend.id() + "' returned " +
                              std::to_string(scores.size()) + " scores for " +
                              std::to_string(choices.size()) + " choices");
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i].choice != choices[i])
            throw CapabilityError("backend '" + backend.id() +
                                  "' returned scores out of order (got '" + scores[i].choice +
                                  "', expected '" + choices[i] + "')");
        if (!std::isfinite(scores[i].log_likelihood))
            throw NumericError("non-finite log-likelihood for choice '" + choices[i] + "'");
    }
    return scores;
}

std::string generate(const Generator& backend, const PromptText& prompt,
                     const GenerationParams& params) {
    if (params.temperature < 0.0) throw ValidationError("temperature must be >= 0");
    if (params.max_tokens == 0) throw ValidationError("max_tokens must be >= 1");
    return backend.generate(prompt, params);
}

}  // namespace tuneshield::backends
