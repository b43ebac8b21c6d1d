#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "tuneshield/heal.hpp"

using namespace tuneshield;
using namespace tuneshield::heal;

namespace {

corpus::ContextResponsePair flagged_pair(std::string id, std::string response) {
    corpus::ContextResponsePair p;
    p.id = std::move(id);
    p.context = {{corpus::Speaker::user_a, "rough commute today"},
                 {corpus::Speaker::user_b, "tell me about it"}};
    p.response = std::move(response);
    p.gold_label = corpus::GoldLabel::toxic;
    return p;
}

classify::ClassificationVerdict toxic_verdict(std::string id) {
    classify::ClassificationVerdict v;
    v.pair_id = std::move(id);
    v.p_no = 0.9;
    v.is_toxic = true;
    v.classifier_id = "test";
    return v;
}

bool same_context(const std::vector<corpus::Utterance>& a,
                  const std::vector<corpus::Utterance>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].speaker != b[i].speaker || a[i].text != b[i].text) return false;
    return true;
}

// Returns the queued texts in order, then empty strings forever.
class ScriptedGenerator final : public backends::Generator {
public:
    explicit ScriptedGenerator(std::vector<std::string> outputs)
        : outputs_(std::move(outputs)) {}

    std::string generate(const backends::PromptText&,
                         const backends::GenerationParams&) const override {
        if (calls_ >= outputs_.size()) return "";
        return outputs_[calls_++];
    }
    std::string id() const override { return "scripted"; }

    std::size_t calls() const { return calls_; }

private:
    std::vector<std::string> outputs_;
    mutable std::size_t calls_ = 0;
};

}  // namespace

TEST_CASE("mode names round-trip") {
    CHECK(to_string(HealMode::nh) == "NH");
    CHECK(to_string(HealMode::ch) == "CH");
    CHECK(heal_mode_from_string("NH") == HealMode::nh);
    CHECK(heal_mode_from_string("ch") == HealMode::ch);
    CHECK_THROWS_AS(heal_mode_from_string("both"), ParseError);
}

TEST_CASE("canned replacement uses the fixed text and checks its preconditions") {
    const auto pair = flagged_pair("p1", "awful stuff");
    const auto record = heal_noncontextual(pair, toxic_verdict("p1"));
    CHECK(record.pair_id == "p1");
    CHECK(record.mode == HealMode::nh);
    CHECK(record.healed_response ==
          "I'm sorry, I'm not sure what to say. Thank you for sharing and talking to me though");

    const auto custom = heal_noncontextual(pair, toxic_verdict("p1"), "let's change the subject");
    CHECK(custom.healed_response == "let's change the subject");

    CHECK_THROWS_AS(heal_noncontextual(pair, toxic_verdict("other")), ValidationError);
    auto clean = toxic_verdict("p1");
    clean.is_toxic = false;
    CHECK_THROWS_AS(heal_noncontextual(pair, clean), ValidationError);
    auto undet = toxic_verdict("p1");
    undet.undetermined = true;
    CHECK_THROWS_AS(heal_noncontextual(pair, undet), ValidationError);
    CHECK_THROWS_AS(heal_noncontextual(pair, toxic_verdict("p1"), ""), ValidationError);
}

TEST_CASE("generation cleanup strips quotes and role prefixes") {
    CHECK(sanitize_generation("  hello there  ") == "hello there");
    CHECK(sanitize_generation("\"hello there\"") == "hello there");
    CHECK(sanitize_generation("Bot: hello there") == "hello there");
    CHECK(sanitize_generation("RESPONSE: 'User B: hello'") == "hello");
    CHECK(sanitize_generation("'\"nested\"'") == "nested");
    CHECK(sanitize_generation("Assistant:") == "");
    CHECK(sanitize_generation("    ") == "");
    // single quotes inside the text survive
    CHECK(sanitize_generation("that's fine") == "that's fine");
}

TEST_CASE("replacement prompt carries the context but never the flagged response") {
    const auto pair = flagged_pair("p1", "dreadful reply text");
    const auto prompt = build_ch_prompt(pair);
    const auto text = prompt.serialize();
    CHECK(text.find("rough commute today") != std::string::npos);
    CHECK(text.find("dreadful reply text") == std::string::npos);
    CHECK(prompt.ends_with_instruction_segment());
    CHECK(text.find("contextually relevant") != std::string::npos);
    CHECK(text.find("empathetic and prosocial") != std::string::npos);

    ChTemplate bad;
    bad.text = "no placeholder here";
    CHECK_THROWS_AS(build_ch_prompt(pair, bad), ValidationError);
    bad.text = "{context} twice {context}";
    CHECK_THROWS_AS(build_ch_prompt(pair, bad), ValidationError);
}

TEST_CASE("contextual healing sanitizes, retries, and falls back to the canned text") {
    const auto pair = flagged_pair("p1", "awful");
    const auto verdict = toxic_verdict("p1");
    backends::GenerationParams params;
    params.seed = 7;

    ScriptedGenerator good({"Bot: 'a kind reply'"});
    auto outcome = heal_contextual(pair, verdict, good, params);
    CHECK(outcome.record.mode == HealMode::ch);
    CHECK(outcome.record.healed_response == "a kind reply");
    CHECK(!outcome.fell_back_to_nh);
    CHECK(outcome.attempts == 1);

    ScriptedGenerator late({"", "''", "finally words"});
    outcome = heal_contextual(pair, verdict, late, params, ChTemplate::default_template(), 2);
    CHECK(outcome.record.healed_response == "finally words");
    CHECK(outcome.attempts == 3);

    ScriptedGenerator hopeless({"", "", ""});
    outcome = heal_contextual(pair, verdict, hopeless, params, ChTemplate::default_template(), 2);
    CHECK(outcome.fell_back_to_nh);
    CHECK(outcome.record.mode == HealMode::nh);
    CHECK(outcome.record.healed_response == std::string(kCannedResponse));
    CHECK(outcome.attempts == 3);
}

TEST_CASE("applying healing replaces exactly the flagged responses") {
    corpus::ConversationDataset data;
    data.pairs.push_back(flagged_pair("a", "bad one"));
    data.pairs.push_back(flagged_pair("b", "harmless"));
    data.pairs.push_back(flagged_pair("c", "bad two"));
    data.pairs[1].gold_label = corpus::GoldLabel::non_toxic;

    std::vector<classify::ClassificationVerdict> verdicts = {
        toxic_verdict("a"), toxic_verdict("b"), toxic_verdict("c")};
    verdicts[1].is_toxic = false;

    std::vector<HealingRecord> records = {
        {"a", HealMode::nh, "replacement one"},
        {"c", HealMode::ch, "replacement two"},
    };

    const auto healed = apply_healing(data, verdicts, records);
    REQUIRE(healed.pairs.size() == 3);
    CHECK(healed.pairs[0].id == "a");
    CHECK(healed.pairs[0].response == "replacement one");
    CHECK(healed.pairs[0].provenance == corpus::Provenance::healed);
    CHECK(same_context(healed.pairs[0].context, data.pairs[0].context));
    CHECK(healed.pairs[1].response == "harmless");
    CHECK(healed.pairs[1].provenance == corpus::Provenance::original);
    CHECK(healed.pairs[2].response == "replacement two");

    SUBCASE("missing a record for a flagged pair") {
        records.pop_back();
        CHECK_THROWS_WITH_AS(apply_healing(data, verdicts, records), doctest::Contains("c"),
                             IntegrityError);
    }
    SUBCASE("duplicate records") {
        records.push_back({"a", HealMode::nh, "again"});
        CHECK_THROWS_AS(apply_healing(data, verdicts, records), IntegrityError);
    }
    SUBCASE("empty healed response") {
        records[0].healed_response = "";
        CHECK_THROWS_AS(apply_healing(data, verdicts, records), ValidationError);
    }
}

TEST_CASE("preference triplets pair each healed response with its original") {
    corpus::ConversationDataset data;
    data.pairs.push_back(flagged_pair("a", "bad one"));
    data.pairs.push_back(flagged_pair("b", "harmless"));
    data.pairs.push_back(flagged_pair("c", "same text"));

    std::vector<classify::ClassificationVerdict> verdicts = {
        toxic_verdict("a"), toxic_verdict("b"), toxic_verdict("c")};
    verdicts[1].is_toxic = false;

    std::vector<HealingRecord> records = {
        {"a", HealMode::nh, "nice one"},
        {"c", HealMode::ch, "same text"},  // degenerate: equals the original
    };

    const auto built = build_preference_set(data, verdicts, records);
    REQUIRE(built.data.triplets.size() == 1);
    CHECK(built.dropped_degenerate == 1);
    const auto& t = built.data.triplets[0];
    CHECK(t.pair_id == "a");
    CHECK(t.y_heal == "nice one");
    CHECK(t.y_toxic == "bad one");
    CHECK(same_context(t.context, data.pairs[0].context));
}

TEST_CASE("healing artifacts round-trip through files") {
    const auto dir = std::filesystem::temp_directory_path();

    std::vector<HealingRecord> records = {
        {"a", HealMode::nh, "canned"},
        {"b", HealMode::ch, "generated"},
    };
    save_records(records, dir / "records_roundtrip.jsonl");
    const auto records_back = load_records(dir / "records_roundtrip.jsonl");
    REQUIRE(records_back.size() == 2);
    CHECK(records_back[0].pair_id == "a");
    CHECK(records_back[0].mode == HealMode::nh);
    CHECK(records_back[1].mode == HealMode::ch);
    CHECK(records_back[1].healed_response == "generated");

    PreferenceDataset prefs;
    PreferenceTriplet t;
    t.pair_id = "a";
    t.context = {{corpus::Speaker::user_a, "hey"}};
    t.y_heal = "good";
    t.y_toxic = "bad";
    prefs.triplets = {t};
    save_preferences(prefs, dir / "prefs_roundtrip.jsonl");
    const auto prefs_back = load_preferences(dir / "prefs_roundtrip.jsonl");
    REQUIRE(prefs_back.triplets.size() == 1);
    CHECK(prefs_back.triplets[0].pair_id == "a");
    CHECK(prefs_back.triplets[0].y_heal == "good");
    CHECK(prefs_back.triplets[0].y_toxic == "bad");
    CHECK(prefs_back.triplets[0].context.size() == 1);
    CHECK(prefs_back.triplets[0].context[0].text == "hey");
}
