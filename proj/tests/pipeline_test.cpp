#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "tuneshield/corpus.hpp"
#include "tuneshield/errors.hpp"
#include "tuneshield/evaluate.hpp"
#include "tuneshield/pipeline.hpp"
#include "tuneshield/rng.hpp"
#include "tuneshield/tabular_policy.hpp"

using namespace tuneshield;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& leaf) {
    const fs::path dir = fs::temp_directory_path() / "ts-pipeline-test" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

corpus::ContextResponsePair make_pair(const std::string& id, const std::string& ctx,
                                      const std::string& response, corpus::GoldLabel gold) {
    corpus::ContextResponsePair p;
    p.id = id;
    p.context = {{corpus::Speaker::user_a, ctx}};
    p.response = response;
    p.gold_label = gold;
    return p;
}

// Train pool: `clean` benign pairs plus `toxic` pairs whose responses carry "xbad".
corpus::ConversationDataset marker_dataset(std::size_t clean, std::size_t toxic) {
    corpus::ConversationDataset ds;
    ds.name = "train";
    for (std::size_t i = 0; i < clean; ++i)
        ds.pairs.push_back(make_pair("c" + std::to_string(i), "clean topic " + std::to_string(i),
                                     "ok fine", corpus::GoldLabel::non_toxic));
    for (std::size_t i = 0; i < toxic; ++i)
        ds.pairs.push_back(make_pair("t" + std::to_string(i), "toxic topic " + std::to_string(i),
                                     "xbad fine", corpus::GoldLabel::toxic));
    return ds;
}

ordered_json base_config_json(const fs::path& dir) {
    const auto train = marker_dataset(4, 2);

    corpus::ConversationDataset eval_toxic;
    eval_toxic.name = "eval-toxic";
    for (std::size_t i = 0; i < 3; ++i) {
        auto p = make_pair("et" + std::to_string(i), "toxic topic " + std::to_string(i % 2),
                           "xbad fine", corpus::GoldLabel::toxic);
        p.subcategory = i % 2 == 0 ? "groupA" : "groupB";
        eval_toxic.pairs.push_back(std::move(p));
    }
    corpus::ConversationDataset eval_benign;
    eval_benign.name = "eval-benign";
    for (std::size_t i = 0; i < 3; ++i)
        eval_benign.pairs.push_back(make_pair("eb" + std::to_string(i),
                                              "clean topic " + std::to_string(i), "ok fine",
                                              corpus::GoldLabel::non_toxic));

    corpus::save_dataset(train, dir / "train.jsonl");
    corpus::save_dataset(eval_toxic, dir / "eval_toxic.jsonl");
    corpus::save_dataset(eval_benign, dir / "eval_benign.jsonl");

    ordered_json j;
    j["mode"] = "attack-baseline";
    j["datasets"] = {{"train", (dir / "train.jsonl").string()},
                     {"eval_toxic", (dir / "eval_toxic.jsonl").string()},
                     {"eval_benign", (dir / "eval_benign.jsonl").string()}};
    j["sft"] = {{"learning_rate", 0.5}, {"epochs", 3}, {"batch_size", 0}};
    j["dpo"] = {{"beta", 0.3}, {"learning_rate", 0.1}, {"epochs", 2}, {"batch_size", 2}};
    j["generation"] = {{"temperature", 0.0}, {"max_tokens", 2}};
    j["evaluation"] = {{"classifier", {{"kind", "marker"}, {"marker", "xbad"}}},
                       {"embedding_dim", 4}};
    j["trials"] = 1;
    j["seed"] = 7;
    j["out_dir"] = (dir / "run").string();
    return j;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("mode names round-trip and reject unknowns") {
    const std::vector<std::pair<pipeline::Mode, std::string>> table = {
        {pipeline::Mode::attack_baseline, "attack-baseline"},
        {pipeline::Mode::no_attack_baseline, "no-attack-baseline"},
        {pipeline::Mode::filter_only, "filter-only"},
        {pipeline::Mode::ft_heal, "ft-heal"},
        {pipeline::Mode::full, "full"},
    };
    for (const auto& [mode, name] : table) {
        CHECK(pipeline::to_string(mode) == name);
        CHECK(pipeline::mode_from_string(name) == mode);
    }
    CHECK_THROWS_AS(pipeline::mode_from_string("heal"), ParseError);
}

TEST_CASE("run config parsing applies defaults and reports bad shapes") {
    json j = {{"mode", "attack-baseline"},
              {"datasets", {{"train", "a"}, {"eval_toxic", "b"}, {"eval_benign", "c"}}}};
    const auto c = pipeline::RunConfig::from_json(j);
    CHECK(c.mode == pipeline::Mode::attack_baseline);
    CHECK(c.trials == 1);
    CHECK(c.seed == 0);
    CHECK(c.undetermined_limit == doctest::Approx(0.25));
    CHECK(c.parallelism == 1);
    CHECK(c.healing == heal::HealMode::nh);
    CHECK(c.classifier.is_null());

    CHECK_THROWS_AS(pipeline::RunConfig::from_json(json{{"datasets", json::object()}}),
                    ParseError);
    CHECK_THROWS_AS(pipeline::RunConfig::from_json(json{{"mode", "attack-baseline"}}),
                    ParseError);
    CHECK_THROWS_AS(pipeline::RunConfig::from_json(
                        json{{"mode", "attack-baseline"},
                             {"datasets", {{"train", "a"}}},
                             {"trials", "many"}}),
                    ParseError);
}

TEST_CASE("run config validation rejects each missing requirement") {
    pipeline::RunConfig c;
    c.mode = pipeline::Mode::attack_baseline;
    c.out_dir = "out";
    c.datasets.train = "train.jsonl";
    c.datasets.eval_toxic = "toxic.jsonl";
    c.datasets.eval_benign = "benign.jsonl";
    c.evaluation = ordered_json{{"classifier", {{"kind", "marker"}, {"marker", "xbad"}}}};
    CHECK_NOTHROW(c.validate());

    SUBCASE("missing paths") {
        auto bad = c;
        bad.out_dir.clear();
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.datasets.train.clear();
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.datasets.eval_toxic.clear();
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.datasets.eval_benign.clear();
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
    SUBCASE("numeric ranges") {
        auto bad = c;
        bad.trials = 0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.undetermined_limit = 1.5;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.undetermined_limit = -0.1;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.generation.temperature = -1.0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.generation.max_tokens = 0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
    SUBCASE("defense modes need a classifier") {
        for (auto mode : {pipeline::Mode::filter_only, pipeline::Mode::ft_heal,
                          pipeline::Mode::full}) {
            auto bad = c;
            bad.mode = mode;
            CHECK_THROWS_AS(bad.validate(), ValidationError);
        }
        auto ok = c;
        ok.mode = pipeline::Mode::filter_only;
        ok.classifier = ordered_json{{"kind", "marker"}, {"marker", "xbad"}};
        CHECK_NOTHROW(ok.validate());
    }
    SUBCASE("contextual healing needs a generator spec") {
        auto bad = c;
        bad.mode = pipeline::Mode::ft_heal;
        bad.classifier = ordered_json{{"kind", "marker"}, {"marker", "xbad"}};
        bad.healing = heal::HealMode::ch;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad.ch_generator = ordered_json{{"kind", "fixed"}, {"text", "ok"}};
        CHECK_NOTHROW(bad.validate());
    }
    SUBCASE("full mode validates the alignment hyperparameters") {
        auto bad = c;
        bad.mode = pipeline::Mode::full;
        bad.classifier = ordered_json{{"kind", "marker"}, {"marker", "xbad"}};
        bad.dpo.beta = 0.0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
    SUBCASE("evaluation spec") {
        auto bad = c;
        bad.evaluation = ordered_json();
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad.evaluation = ordered_json{{"embedding_dim", 4}};
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.evaluation["embedding_dim"] = 0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.evaluation["no_attack_rtr"] = "low";
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
}

TEST_CASE("trial seeds derive from the config seed and the trial index") {
    CHECK(pipeline::trial_seed(42, 0) == mix_seed(42, 0));
    CHECK(pipeline::trial_seed(42, 3) == mix_seed(42, 3));
    CHECK(pipeline::trial_seed(42, 0) != pipeline::trial_seed(42, 1));
    CHECK(pipeline::trial_seed(42, 0) != pipeline::trial_seed(43, 0));
}

TEST_CASE("marker classifier flags exactly the pairs carrying the token") {
    const auto ds = marker_dataset(6, 10);
    const auto spec = ordered_json{{"kind", "marker"}, {"marker", "xbad"}};
    const auto clf = pipeline::make_dataset_classifier(spec, 99, 1, 1.0);
    CHECK(clf.id == "marker:xbad");

    const auto verdicts = clf.run(ds);
    REQUIRE(verdicts.size() == ds.pairs.size());
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
        const bool has_marker = ds.pairs[i].response.find("xbad") != std::string::npos;
        CHECK(verdicts[i].pair_id == ds.pairs[i].id);
        CHECK(verdicts[i].is_toxic == has_marker);
        CHECK(verdicts[i].p_no == (has_marker ? 1.0 : 0.0));
        CHECK(verdicts[i].classifier_id == "marker:xbad");
        CHECK_FALSE(verdicts[i].undetermined);
    }
}

TEST_CASE("marker recall degradation unflags an exact seeded count") {
    const auto ds = marker_dataset(6, 10);
    const auto spec = ordered_json{{"kind", "marker"}, {"marker", "xbad"}, {"recall", 0.4}};
    const auto clf = pipeline::make_dataset_classifier(spec, 99, 1, 1.0);
    CHECK(clf.id == "marker:xbad@recall=0.4");

    const auto verdicts = clf.run(ds);
    std::size_t flagged = 0;
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
        const bool has_marker = ds.pairs[i].response.find("xbad") != std::string::npos;
        if (!has_marker) CHECK_FALSE(verdicts[i].is_toxic);  // never flips the other way
        flagged += verdicts[i].is_toxic ? 1 : 0;
    }
    // 10 true detections, recall 0.4: floor(0.6 * 10 + 0.5) = 6 flips, 4 stay flagged.
    CHECK(flagged == 4);

    const auto replay = clf.run(ds);
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
        CHECK(replay[i].is_toxic == verdicts[i].is_toxic);
        CHECK(replay[i].p_no == verdicts[i].p_no);
    }

    const auto other = pipeline::make_dataset_classifier(spec, 100, 1, 1.0).run(ds);
    std::size_t other_flagged = 0;
    for (const auto& v : other) other_flagged += v.is_toxic ? 1 : 0;
    CHECK(other_flagged == 4);  // the count is exact for every seed

    SUBCASE("recall 1.0 keeps every detection and the plain id") {
        const auto full = pipeline::make_dataset_classifier(
            ordered_json{{"kind", "marker"}, {"marker", "xbad"}, {"recall", 1.0}}, 99, 1, 1.0);
        CHECK(full.id == "marker:xbad");
        std::size_t n = 0;
        for (const auto& v : full.run(ds)) n += v.is_toxic ? 1 : 0;
        CHECK(n == 10);
    }
}

TEST_CASE("classifier factory rejects malformed specs") {
    CHECK_THROWS_AS(pipeline::make_dataset_classifier(ordered_json(), 0, 1, 1.0),
                    ValidationError);
    CHECK_THROWS_AS(pipeline::make_dataset_classifier(ordered_json{{"kind", "psychic"}}, 0, 1, 1.0),
                    ValidationError);
    CHECK_THROWS_AS(pipeline::make_dataset_classifier(ordered_json{{"kind", "marker"}}, 0, 1, 1.0),
                    ValidationError);
    CHECK_THROWS_AS(
        pipeline::make_dataset_classifier(
            ordered_json{{"kind", "marker"}, {"marker", "xbad"}, {"recall", 0.0}}, 0, 1, 1.0),
        ValidationError);
    CHECK_THROWS_AS(pipeline::make_dataset_classifier(ordered_json{{"kind", "refusal"}}, 0, 1, 1.0),
                    ValidationError);
}

TEST_CASE("refusal classifier spec loads a policy file and names its variant") {
    const auto dir = fresh_dir("refusal-spec");
    backends::TabularPolicy judge({"yes", "no", "</s>"}, "</s>");
    const auto policy_path = dir / "judge.json";
    judge.save(policy_path);

    const auto spec = ordered_json{{"kind", "refusal"}, {"policy", policy_path.string()}};
    const auto clf = pipeline::make_dataset_classifier(spec, 0, 1, 1.0);
    CHECK(clf.id == "refusal:variant-0");

    const auto ds = marker_dataset(2, 1);
    const auto verdicts = clf.run(ds);
    REQUIRE(verdicts.size() == 3);
    for (const auto& v : verdicts) {
        CHECK(v.classifier_id == "refusal:tabular-scorer");  // verdicts name the backend
        REQUIRE(v.variant_id.has_value());
        CHECK(*v.variant_id == 0);
        CHECK_FALSE(v.undetermined);
    }

    auto bad = spec;
    bad["variant"] = 99;
    CHECK_THROWS_AS(pipeline::make_dataset_classifier(bad, 0, 1, 1.0), ValidationError);
}

TEST_CASE("policy evaluation writes sample logs and a labeled class breakdown") {
    const auto dir = fresh_dir("evaluate");

    corpus::ConversationDataset eval_toxic;
    for (std::size_t i = 0; i < 4; ++i) {
        auto p = make_pair("t" + std::to_string(i), "bait " + std::to_string(i), "xbad bad",
                           corpus::GoldLabel::toxic);
        p.subcategory = i < 2 ? "groupA" : "groupB";
        eval_toxic.pairs.push_back(std::move(p));
    }
    corpus::ConversationDataset eval_benign;
    eval_benign.pairs.push_back(
        make_pair("b0", "smalltalk", "ok ok", corpus::GoldLabel::non_toxic));

    backends::TabularPolicy policy({"ok", "xbad", "</s>"}, "</s>");
    // Lock the toxic contexts to the marker and the benign one to "ok".
    for (std::size_t i = 0; i < 2; ++i) {
        const auto key = corpus::context_key(eval_toxic.pairs[i].context);
        policy.logits_row(key, 0)[policy.token_index("xbad")] = 50.0;
        policy.logits_row(key, 1)[policy.token_index("</s>")] = 50.0;
    }
    const auto benign_key = corpus::context_key(eval_benign.pairs[0].context);
    policy.logits_row(benign_key, 0)[policy.token_index("ok")] = 50.0;
    policy.logits_row(benign_key, 1)[policy.token_index("</s>")] = 50.0;

    backends::GenerationParams params;
    params.temperature = 0.0;
    params.max_tokens = 2;
    const auto evaluation = ordered_json{
        {"classifier", {{"kind", "marker"}, {"marker", "xbad"}}},
        {"embedding_dim", 4},
        {"no_attack_rtr", 12.5}};
    const auto report = pipeline::evaluate_policy(policy, eval_toxic, eval_benign, evaluation,
                                                  params, 5, dir);

    // groupA contexts (2) are locked to the marker; groupB (2) fall back to greedy "ok".
    CHECK(report.rtr_toxic == doctest::Approx(50.0));
    CHECK(report.rtr_nontoxic == doctest::Approx(0.0));
    CHECK(report.evaluated_toxic == 4);
    CHECK(report.evaluated_nontoxic == 1);
    REQUIRE(report.classwise.count("groupA"));
    REQUIRE(report.classwise.count("groupB"));
    CHECK(report.classwise.at("groupA") == doctest::Approx(100.0));
    CHECK(report.classwise.at("groupB") == doctest::Approx(0.0));
    CHECK(report.ppl > 0.0);
    CHECK(report.fbd >= 0.0);
    REQUIRE(report.no_attack_rtr.has_value());
    CHECK(*report.no_attack_rtr == doctest::Approx(12.5));
    REQUIRE(report.success.has_value());
    CHECK_FALSE(*report.success);  // 50 > 12.5

    const auto toxic_log = eval::load_sample_log(dir / "samples_toxic.jsonl");
    const auto benign_log = eval::load_sample_log(dir / "samples_benign.jsonl");
    CHECK(toxic_log.size() == 4);
    CHECK(benign_log.size() == 1);
    CHECK(benign_log[0].response == "ok");  // greedy stops at the locked eos

    SUBCASE("a partially labeled toxic set skips the class breakdown with a warning") {
        auto half = eval_toxic;
        half.pairs[3].subcategory.reset();
        const auto r2 = pipeline::evaluate_policy(policy, half, eval_benign, evaluation, params,
                                                  5, dir / "half");
        CHECK(r2.classwise.empty());
        REQUIRE_FALSE(r2.warnings.empty());
        CHECK(r2.warnings[0].find("unlabeled") != std::string::npos);
    }
}

TEST_CASE("baseline pipeline run lays out per-trial artifacts and their mean") {
    const auto dir = fresh_dir("run-baseline");
    auto j = base_config_json(dir);
    j["trials"] = 2;
    auto config = pipeline::RunConfig::from_json(j);

    const auto summary = pipeline::run_pipeline(config);
    REQUIRE(summary.trials.size() == 2);
    CHECK(summary.trials[0].seed == pipeline::trial_seed(7, 0));
    CHECK(summary.trials[1].seed == pipeline::trial_seed(7, 1));

    const fs::path run = dir / "run";
    for (const char* name : {"config.json", "aggregate.json", "aggregate.txt"})
        CHECK(fs::exists(run / name));
    for (int t = 0; t < 2; ++t) {
        const fs::path trial = run / ("trial-" + std::to_string(t));
        for (const char* name : {"checkpoint.json", "train_used.jsonl", "policy_sft.json",
                                 "sft_trace.csv", "policy.json", "report.json", "report.txt",
                                 "samples_toxic.jsonl", "samples_benign.jsonl"})
            CHECK(fs::exists(trial / name));
        CHECK_FALSE(fs::exists(trial / "verdicts.jsonl"));  // baselines never classify
    }

    const double want =
        (summary.trials[0].report.rtr_toxic + summary.trials[1].report.rtr_toxic) / 2.0;
    CHECK(summary.aggregate.rtr_toxic == doctest::Approx(want));
    CHECK(summary.aggregate.metadata.at("trials").get<std::size_t>() == 2);
    CHECK(summary.aggregate.metadata.at("per_trial").size() == 2);

    SUBCASE("rerunning under the same config skips completed stages") {
        // Clobber a by-then unused artifact; a resumed run must not rebuild it.
        std::ofstream(run / "trial-0" / "policy.json", std::ios::binary) << "garbage";
        const auto resumed = pipeline::run_pipeline(config);
        CHECK(resumed.trials[0].report.rtr_toxic ==
              doctest::Approx(summary.trials[0].report.rtr_toxic));
        CHECK(slurp(run / "trial-0" / "policy.json") == "garbage");

        // A different seed invalidates the checkpoint, so the trial starts over.
        auto changed = config;
        changed.seed = 8;
        const auto fresh = pipeline::run_pipeline(changed);
        CHECK(fresh.trials.size() == 2);
        CHECK_NOTHROW(backends::TabularPolicy::load(run / "trial-0" / "policy.json"));
    }
}

TEST_CASE("full pipeline run heals flagged pairs and aligns the policy") {
    const auto dir = fresh_dir("run-full");
    auto j = base_config_json(dir);
    j["mode"] = "full";
    j["classifier"] = {{"kind", "marker"}, {"marker", "xbad"}};
    auto config = pipeline::RunConfig::from_json(j);

    const auto summary = pipeline::run_pipeline(config);
    const fs::path trial = dir / "run" / "trial-0";
    for (const char* name : {"verdicts.jsonl", "healing.jsonl", "preference.jsonl",
                             "dpo_trace.csv", "policy_sft.json", "policy.json"})
        CHECK(fs::exists(trial / name));

    const auto train = corpus::load_dataset((dir / "train.jsonl").string());
    const auto used = corpus::load_dataset(trial / "train_used.jsonl");
    REQUIRE(used.pairs.size() == train.pairs.size());  // healing replaces, never removes
    std::size_t healed = 0;
    for (const auto& p : used.pairs) {
        if (p.provenance == corpus::Provenance::healed) {
            ++healed;
            CHECK(p.response == heal::kCannedResponse);
        } else {
            CHECK(p.response.find("xbad") == std::string::npos);
        }
    }
    CHECK(healed == 2);

    const auto& meta = summary.trials[0].report.metadata;
    CHECK(meta.at("mode") == "full");
    CHECK(meta.at("flagged").get<std::size_t>() == 2);
    CHECK(meta.at("healed").get<std::size_t>() == 2);
    CHECK(meta.at("preference_triplets").get<std::size_t>() == 2);

    const auto sft = backends::TabularPolicy::load(trial / "policy_sft.json");
    const auto aligned = backends::TabularPolicy::load(trial / "policy.json");
    CHECK(sft.checksum() != aligned.checksum());  // alignment moved the policy
}

TEST_CASE("filter-only run drops flagged pairs from the training set") {
    const auto dir = fresh_dir("run-filter");
    auto j = base_config_json(dir);
    j["mode"] = "filter-only";
    j["classifier"] = {{"kind", "marker"}, {"marker", "xbad"}};
    const auto config = pipeline::RunConfig::from_json(j);

    pipeline::run_pipeline(config);
    const auto used = corpus::load_dataset(dir / "run" / "trial-0" / "train_used.jsonl");
    CHECK(used.pairs.size() == 4);
    for (const auto& p : used.pairs) CHECK(p.response.find("xbad") == std::string::npos);
    CHECK_FALSE(fs::exists(dir / "run" / "trial-0" / "healing.jsonl"));
}

TEST_CASE("run comparison reports deltas and rejects mismatched runs") {
    const auto dir = fresh_dir("compare");
    auto j = base_config_json(dir);
    const auto config = pipeline::RunConfig::from_json(j);
    pipeline::run_pipeline(config);

    const fs::path run = dir / "run";
    const auto out = pipeline::compare_runs(run, run);
    CHECK(out.at("success").get<bool>());
    CHECK(out.at("delta").at("rtr_toxic").get<double>() == doctest::Approx(0.0));
    CHECK(out.at("delta").at("ppl").get<double>() == doctest::Approx(0.0));
    CHECK(out.at("baseline").at("dir") == run.string());

    SUBCASE("empty run directories are rejected") {
        const auto empty = fresh_dir("compare-empty");
        CHECK_THROWS_AS(pipeline::compare_runs(empty, run), ValidationError);
    }
    SUBCASE("trial count mismatches are rejected") {
        const auto other = fresh_dir("compare-counts");
        fs::create_directories(other / "trial-0");
        fs::create_directories(other / "trial-1");
        CHECK_THROWS_AS(pipeline::compare_runs(run, other), ValidationError);
    }
    SUBCASE("differing evaluation contexts are named in the error") {
        const auto a = fresh_dir("compare-ctx-a");
        const auto b = fresh_dir("compare-ctx-b");
        for (const auto& [root, id] : {std::pair{a, "p1"}, std::pair{b, "p2"}}) {
            fs::create_directories(root / "trial-0");
            eval::SampleLogEntry entry;
            entry.context_id = id;
            entry.response = "ok";
            eval::save_sample_log({entry}, root / "trial-0" / "samples_toxic.jsonl");
            eval::save_sample_log({entry}, root / "trial-0" / "samples_benign.jsonl");
        }
        try {
            pipeline::compare_runs(a, b);
            FAIL("expected a context mismatch error");
        } catch (const ValidationError& e) {
            const std::string what = e.what();
            CHECK(what.find("p1") != std::string::npos);
            CHECK(what.find("p2") != std::string::npos);
        }
    }
}
