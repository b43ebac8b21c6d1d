#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tuneshield/errors.hpp"

namespace tuneshield::backends {

enum class SegmentTag { description, input, instruction };

std::string to_string(SegmentTag tag);
SegmentTag segment_tag_from_string(const std::string& s);

struct PromptSegment {
    SegmentTag tag = SegmentTag::input;
    std::string text;
};

// Ordered prompt. Instruction-last layouts are how the classifier prompts defend
// against instructions smuggled into the data sample, so serialization never
// reorders segments.
struct PromptText {
    std::vector<PromptSegment> segments;

    // Segments joined in order with blank lines. Requires at least one
    // instruction segment.
    std::string serialize() const;

    bool has_instruction() const;
    bool ends_with_instruction_segment() const;
};

struct GenerationParams {
    double temperature = 0.9;
    std::size_t max_tokens = 128;
    std::uint64_t seed = 0;
};

struct ChoiceScore {
    std::string choice;
    double log_likelihood;  // natural log; <= 0 on normalized backends
};

class ChoiceScorer {
public:
    virtual ~ChoiceScorer() = default;
    virtual std::vector<ChoiceScore> score_choices(const PromptText& prompt,
                                                   const std::vector<std::string>& choices) const = 0;
    virtual std::string id() const = 0;
};

class Generator {
public:
    virtual ~Generator() = default;
    virtual std::string generate(const PromptText& prompt, const GenerationParams& params) const = 0;
    virtual std::string id() const = 0;
};

// Validating entry points: choices must be non-empty and pairwise distinct;
// params.temperature >= 0 and max_tokens >= 1. Scores come back aligned with the
// input choice order.
std::vector<ChoiceScore> score_choices(const ChoiceScorer& backend, const PromptText& prompt,
                                       const std::vector<std::string>& choices);
std::string generate(const Generator& backend, const PromptText& prompt,
                     const GenerationParams& params);

// Test/glue scorer backed by a callable.
class CallbackScorer final : public ChoiceScorer {
public:
    using Fn = std::function<std::vector<ChoiceScore>(const PromptText&, const std::vector<std::string>&)>;

    CallbackScorer(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}

    std::vector<ChoiceScore> score_choices(const PromptText& prompt,
                                           const std::vector<std::string>& choices) const override {
        return fn_(prompt, choices);
    }
    std::string id() const override { return id_; }

private:
    std::string id_;
    Fn fn_;
};

// Generator that always returns the same text (toy healing backends, tests).
class FixedResponseGenerator final : public Generator {
public:
    explicit FixedResponseGenerator(std::string text, std::string id = "fixed")
        : text_(std::move(text)), id_(std::move(id)) {}

    std::string generate(const PromptText&, const GenerationParams&) const override { return text_; }
    std::string id() const override { return id_; }

private:
    std::string text_;
    std::string id_;
};

}  // namespace tuneshield::backends
