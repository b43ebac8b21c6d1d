#include "tuneshield/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "tuneshield/errors.hpp"
#include "tuneshield/rng.hpp"

namespace tuneshield::pipeline {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(Mode mode) {
    switch (mode) {
        case Mode::attack_baseline: return "attack-baseline";
        case Mode::no_attack_baseline: return "no-attack-baseline";
        case Mode::filter_only: return "filter-only";
        case Mode::ft_heal: return "ft-heal";
        case Mode::full: return "full";
    }
    return "attack-baseline";
}

Mode mode_from_string(const std::string& s) {
    if (s == "attack-baseline") return Mode::attack_baseline;
    if (s == "no-attack-baseline") return Mode::no_attack_baseline;
    if (s == "filter-only") return Mode::filter_only;
    if (s == "ft-heal") return Mode::ft_heal;
    if (s == "full") return Mode::full;
    throw ParseError("unknown mode '" + s + "'");
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    try {
        c.mode = mode_from_string(j.at("mode").get<std::string>());
        const auto& d = j.at("datasets");
        c.datasets.train = d.value("train", std::string());
        c.datasets.eval_toxic = d.value("eval_toxic", std::string());
        c.datasets.eval_benign = d.value("eval_benign", std::string());
        if (j.contains("classifier")) c.classifier = j.at("classifier");
        if (j.contains("healing"))
            c.healing = heal::heal_mode_from_string(j.at("healing").get<std::string>());
        if (j.contains("nh_override")) c.nh_override = j.at("nh_override").get<std::string>();
        if (j.contains("ch_template_path"))
            c.ch_template_path = j.at("ch_template_path").get<std::string>();
        if (j.contains("ch_generator")) c.ch_generator = j.at("ch_generator");
        if (j.contains("sft")) {
            const auto& s = j.at("sft");
            c.sft.learning_rate = s.value("learning_rate", c.sft.learning_rate);
            c.sft.epochs = s.value("epochs", c.sft.epochs);
            c.sft.batch_size = s.value("batch_size", c.sft.batch_size);
        }
        if (j.contains("dpo")) {
            const auto& s = j.at("dpo");
            c.dpo.beta = s.value("beta", c.dpo.beta);
            c.dpo.learning_rate = s.value("learning_rate", c.dpo.learning_rate);
            c.dpo.epochs = s.value("epochs", c.dpo.epochs);
            c.dpo.batch_size = s.value("batch_size", c.dpo.batch_size);
        }
        if (j.contains("generation")) {
            const auto& s = j.at("generation");
            c.generation.temperature = s.value("temperature", c.generation.temperature);
            c.generation.max_tokens = s.value("max_tokens", c.generation.max_tokens);
        }
        if (j.contains("evaluation")) c.evaluation = j.at("evaluation");
        c.trials = j.value("trials", std::size_t{1});
        c.seed = j.value("seed", std::uint64_t{0});
        c.out_dir = j.value("out_dir", std::string());
        c.undetermined_limit = j.value("undetermined_limit", 0.25);
        c.parallelism = j.value("parallelism", 1u);
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid run config: ") + e.what());
    }
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open run config: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("cannot parse run config " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["mode"] = to_string(mode);
    j["datasets"] = {{"train", datasets.train},
                     {"eval_toxic", datasets.eval_toxic},
                     {"eval_benign", datasets.eval_benign}};
    if (!classifier.is_null()) j["classifier"] = classifier;
    j["healing"] = heal::to_string(healing);
    if (nh_override) j["nh_override"] = *nh_override;
    if (ch_template_path) j["ch_template_path"] = *ch_template_path;
    if (!ch_generator.is_null()) j["ch_generator"] = ch_generator;
    j["sft"] = {{"learning_rate", sft.learning_rate},
                {"epochs", sft.epochs},
                {"batch_size", sft.batch_size}};
    j["dpo"] = {{"beta", dpo.beta},
                {"learning_rate", dpo.learning_rate},
                {"epochs", dpo.epochs},
                {"batch_size", dpo.batch_size}};
    j["generation"] = {{"temperature", generation.temperature},
                       {"max_tokens", generation.max_tokens}};
    if (!evaluation.is_null()) j["evaluation"] = evaluation;
    j["trials"] = trials;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["undetermined_limit"] = undetermined_limit;
    j["parallelism"] = parallelism;
    return j;
}

void RunConfig::validate() const {
    if (out_dir.empty()) throw ValidationError("out_dir is required");
    if (datasets.train.empty()) throw ValidationError("datasets.train is required");
    if (datasets.eval_toxic.empty()) throw ValidationError("datasets.eval_toxic is required");
    if (datasets.eval_benign.empty()) throw ValidationError("datasets.eval_benign is required");
    if (trials < 1) throw ValidationError("trials must be >= 1");
    if (!(undetermined_limit >= 0.0 && undetermined_limit <= 1.0))
        throw ValidationError("undetermined_limit must be in [0, 1]");
    if (!(generation.temperature >= 0.0))
        throw ValidationError("generation.temperature must be >= 0");
    if (generation.max_tokens < 1) throw ValidationError("generation.max_tokens must be >= 1");
    if (!(sft.learning_rate >= 0.0)) throw ValidationError("sft.learning_rate must be >= 0");

    const bool needs_classifier =
        mode == Mode::filter_only || mode == Mode::ft_heal || mode == Mode::full;
    if (needs_classifier && !classifier.is_object())
        throw ValidationError("mode '" + to_string(mode) + "' requires a classifier spec");
    const bool needs_healing = mode == Mode::ft_heal || mode == Mode::full;
    if (needs_healing && healing == heal::HealMode::ch && !ch_generator.is_object())
        throw ValidationError("contextual healing requires a ch_generator spec");
    if (mode == Mode::full) align::validate(dpo);

    if (!evaluation.is_object() || !evaluation.contains("classifier") ||
        !evaluation.at("classifier").is_object())
        throw ValidationError("evaluation.classifier spec is required");
    if (evaluation.contains("embedding_dim")) {
        const auto dim = evaluation.at("embedding_dim");
        if (!dim.is_number_integer() || dim.get<long long>() < 1)
            throw ValidationError("evaluation.embedding_dim must be a positive integer");
    }
    if (evaluation.contains("no_attack_rtr") && !evaluation.at("no_attack_rtr").is_number())
        throw ValidationError("evaluation.no_attack_rtr must be a number");
}

std::uint64_t trial_seed(std::uint64_t config_seed, std::size_t trial) {
    return mix_seed(config_seed, static_cast<std::uint64_t>(trial));
}

DatasetClassifier make_dataset_classifier(const ordered_json& spec, std::uint64_t seed,
                                          unsigned parallelism, double undetermined_limit) {
    if (!spec.is_object() || !spec.contains("kind") || !spec.at("kind").is_string())
        throw ValidationError("classifier spec needs a string 'kind'");
    const std::string kind = spec.at("kind").get<std::string>();

    if (kind == "marker") {
        const std::string marker = spec.value("marker", std::string());
        if (marker.empty())
            throw ValidationError("marker classifier needs a non-empty 'marker'");
        std::optional<double> recall;
        if (spec.contains("recall")) {
            recall = spec.at("recall").get<double>();
            if (!(*recall > 0.0 && *recall <= 1.0))
                throw ValidationError("marker recall must be in (0, 1]");
        }
        std::string id = "marker:" + marker;
        if (recall && *recall < 1.0) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "@recall=%g", *recall);
            id += buf;
        }
        DatasetClassifier out;
        out.id = id;
        out.run = [marker, recall, id, seed, parallelism,
                   undetermined_limit](const corpus::ConversationDataset& dataset) {
            classify::PairClassifier per_pair =
                [&marker, &id](const corpus::ContextResponsePair& pair) {
                    const auto tokens = backends::TabularPolicy::tokenize(pair.response);
                    const bool toxic =
                        std::find(tokens.begin(), tokens.end(), marker) != tokens.end();
                    classify::ClassificationVerdict v;
                    v.pair_id = pair.id;
                    v.p_no = toxic ? 1.0 : 0.0;
                    v.is_toxic = toxic;
                    v.classifier_id = id;
                    return v;
                };
            auto verdicts =
                classify::classify_dataset(dataset, per_pair, parallelism, undetermined_limit);
            if (recall && *recall < 1.0) {
                // Deterministic recall degradation: flip exactly the required number
                // of flagged verdicts, chosen by seed, so trials see a fixed recall
                // instead of per-pair coin flips.
                std::vector<std::size_t> flagged;
                for (std::size_t i = 0; i < verdicts.size(); ++i) {
                    if (verdicts[i].is_toxic && !verdicts[i].undetermined) flagged.push_back(i);
                }
                const auto flips = static_cast<std::size_t>(std::floor(
                    (1.0 - *recall) * static_cast<double>(flagged.size()) + 0.5));
                Rng rng(seed);
                for (std::size_t k : rng.sample_indices(flagged.size(), flips)) {
                    auto& v = verdicts[flagged[k]];
                    v.is_toxic = false;
                    v.p_no = 0.0;
                }
            }
            return verdicts;
        };
        return out;
    }

    if (kind == "refusal") {
        const std::string policy_path = spec.value("policy", std::string());
        if (policy_path.empty())
            throw ValidationError("refusal classifier needs a 'policy' path");
        const int variant = spec.value("variant", 0);
        classify::PromptVariantSet set = spec.contains("variants")
                                             ? classify::load_variant_set(
                                                   spec.at("variants").get<std::string>())
                                             : classify::default_variant_set();
        if (variant < 0 || static_cast<std::size_t>(variant) >= set.variants.size())
            throw ValidationError("refusal variant " + std::to_string(variant) +
                                  " is out of range (have " +
                                  std::to_string(set.variants.size()) + ")");
        auto scorer = std::make_shared<backends::TabularChoiceScorer>(
            backends::TabularPolicy::load(policy_path));
        const classify::PromptVariant chosen = set.variants[static_cast<std::size_t>(variant)];
        DatasetClassifier out;
        out.id = "refusal:variant-" + std::to_string(variant);
        out.run = [scorer, chosen, variant, parallelism,
                   undetermined_limit](const corpus::ConversationDataset& dataset) {
            classify::PairClassifier per_pair =
                [&](const corpus::ContextResponsePair& pair) {
                    return classify::refusal_classify(pair, *scorer, chosen, {}, variant);
                };
            return classify::classify_dataset(dataset, per_pair, parallelism,
                                              undetermined_limit);
        };
        return out;
    }

    throw ValidationError("unknown classifier kind '" + kind + "'");
}

namespace {

std::uint64_t tag(const char* name) { return fnv1a64(name); }

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << text;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << "epoch,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g", i, losses[i]);
        out << buf << '\n';
    }
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Stage ledger for one trial directory. A stage recorded here has all of its
// artifacts on disk, so a re-run under the same config skips it.
class Checkpoint {
public:
    Checkpoint(std::filesystem::path path, std::uint64_t config_hash)
        : path_(std::move(path)), hash_(hex64(config_hash)) {
        if (std::filesystem::exists(path_)) {
            try {
                std::ifstream in(path_, std::ios::binary);
                json j;
                in >> j;
                if (j.value("config_hash", std::string()) == hash_)
                    completed_ = j.value("completed", std::vector<std::string>{});
            } catch (...) {
                completed_.clear();  // unreadable checkpoint: start the trial over
            }
        }
        write();
    }

    bool done(const std::string& stage) const {
        return std::find(completed_.begin(), completed_.end(), stage) != completed_.end();
    }

    void complete(const std::string& stage) {
        if (!done(stage)) completed_.push_back(stage);
        write();
    }

private:
    void write() const {
        ordered_json j;
        j["config_hash"] = hash_;
        j["completed"] = completed_;
        write_text(path_, j.dump(2) + "\n");
    }

    std::filesystem::path path_;
    std::string hash_;
    std::vector<std::string> completed_;
};

std::vector<std::string> build_vocabulary(const RunConfig& config,
                                          const corpus::ConversationDataset& train,
                                          const corpus::ConversationDataset& eval_toxic,
                                          const corpus::ConversationDataset& eval_benign,
                                          const std::string& eos) {
    std::set<std::string> tokens;
    auto add_text = [&tokens](const std::string& text) {
        for (auto& t : backends::TabularPolicy::tokenize(text)) tokens.insert(std::move(t));
    };
    for (const auto* ds : {&train, &eval_toxic, &eval_benign}) {
        for (const auto& pair : ds->pairs) add_text(pair.response);
    }
    add_text(config.nh_override ? *config.nh_override : std::string(heal::kCannedResponse));
    if (config.ch_generator.is_object()) {
        const std::string kind = config.ch_generator.value("kind", std::string());
        if (kind == "fixed") {
            add_text(config.ch_generator.value("text", std::string()));
        } else if (kind == "policy") {
            const auto donor = backends::TabularPolicy::load(
                config.ch_generator.value("policy", std::string()));
            for (const auto& t : donor.vocabulary()) tokens.insert(t);
        }
    }
    tokens.insert(eos);
    if (tokens.size() > backends::TabularPolicy::kMaxVocabulary)
        throw ValidationError("corpus needs " + std::to_string(tokens.size()) +
                              " vocabulary tokens; the toy policy supports at most " +
                              std::to_string(backends::TabularPolicy::kMaxVocabulary));
    return {tokens.begin(), tokens.end()};
}

std::unique_ptr<backends::Generator> make_heal_generator(const ordered_json& spec) {
    if (!spec.is_object() || !spec.contains("kind"))
        throw ValidationError("healing generator spec needs a 'kind'");
    const std::string kind = spec.at("kind").get<std::string>();
    if (kind == "fixed") {
        const std::string text = spec.value("text", std::string());
        if (text.empty())
            throw ValidationError("fixed healing generator needs a non-empty 'text'");
        return std::make_unique<backends::FixedResponseGenerator>(text);
    }
    if (kind == "policy") {
        const std::string path = spec.value("policy", std::string());
        if (path.empty())
            throw ValidationError("policy healing generator needs a 'policy' path");
        return std::make_unique<backends::TabularGenerator>(backends::TabularPolicy::load(path),
                                                            "heal-policy");
    }
    throw ValidationError("unknown healing generator kind '" + kind + "'");
}

std::unique_ptr<eval::EvalClassifier> make_eval_classifier(const ordered_json& evaluation) {
    const auto& spec = evaluation.at("classifier");
    const std::string kind = spec.value("kind", std::string());
    if (kind == "marker") {
        const std::string marker = spec.value("marker", std::string());
        if (marker.empty())
            throw ValidationError("marker evaluation classifier needs a non-empty 'marker'");
        return std::make_unique<eval::MarkerEvalClassifier>(marker);
    }
    throw ValidationError("unknown evaluation classifier kind '" + kind + "'");
}

}  // namespace

eval::EvaluationReport evaluate_policy(const backends::TabularPolicy& policy,
                                       const corpus::ConversationDataset& eval_toxic,
                                       const corpus::ConversationDataset& eval_benign,
                                       const ordered_json& evaluation,
                                       const backends::GenerationParams& generation,
                                       std::uint64_t seed,
                                       const std::filesystem::path& out_dir) {
    auto eval_classifier = make_eval_classifier(evaluation);
    backends::TabularGenerator chatbot(policy);
    const auto toxic_contexts = eval::eval_contexts_from_dataset(eval_toxic);
    const auto benign_contexts = eval::eval_contexts_from_dataset(eval_benign);

    std::filesystem::create_directories(out_dir);
    backends::GenerationParams params = generation;
    params.seed = mix_seed(seed, tag("eval-toxic"));
    const auto toxic_rtr =
        eval::response_toxicity_rate(chatbot, toxic_contexts, *eval_classifier, params);
    params.seed = mix_seed(seed, tag("eval-benign"));
    const auto benign_rtr =
        eval::response_toxicity_rate(chatbot, benign_contexts, *eval_classifier, params);
    eval::save_sample_log(toxic_rtr.log, out_dir / "samples_toxic.jsonl");
    eval::save_sample_log(benign_rtr.log, out_dir / "samples_benign.jsonl");

    eval::ClasswiseResult classwise;
    std::set<std::string> labels;
    bool all_labeled = !toxic_rtr.log.empty();
    for (const auto& entry : toxic_rtr.log) {
        if (entry.subcategory.empty())
            all_labeled = false;
        else
            labels.insert(entry.subcategory);
    }
    if (all_labeled) {
        classwise = eval::classwise_rtr(toxic_rtr.log, labels);
    } else if (!labels.empty()) {
        classwise.warnings.push_back(
            "class-wise rates skipped: some evaluated contexts are unlabeled");
    }

    const double ppl = eval::perplexity(policy, eval_benign);

    const auto dim = evaluation.value("embedding_dim", std::size_t{8});
    eval::HashedBagEmbedder embedder(dim);
    std::map<std::string, const std::string*> reference_by_id;
    for (const auto& ctx : benign_contexts) reference_by_id[ctx.id] = &ctx.reference_response;
    std::vector<std::string> generated, references;
    generated.reserve(benign_rtr.log.size());
    references.reserve(benign_rtr.log.size());
    for (const auto& entry : benign_rtr.log) {
        generated.push_back(entry.response);
        references.push_back(*reference_by_id.at(entry.context_id));
    }
    const double fbd =
        eval::frechet_distance(embedder.embed(generated), embedder.embed(references));

    std::optional<double> no_attack;
    if (evaluation.contains("no_attack_rtr"))
        no_attack = evaluation.at("no_attack_rtr").get<double>();

    return eval::build_report(toxic_rtr, benign_rtr, classwise, ppl, fbd, no_attack, {});
}

namespace {

struct TrialInputs {
    const RunConfig& config;
    const corpus::ConversationDataset& train;
    const corpus::ConversationDataset& eval_toxic;
    const corpus::ConversationDataset& eval_benign;
    const std::vector<std::string>& vocabulary;
    const std::string& eos;
};

void check_verdict_alignment(const corpus::ConversationDataset& train,
                             const std::vector<classify::ClassificationVerdict>& verdicts) {
    if (verdicts.size() != train.pairs.size())
        throw IntegrityError("verdict count does not match the training dataset");
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
        if (verdicts[i].pair_id != train.pairs[i].id)
            throw IntegrityError("verdict order does not match the training dataset (pair '" +
                                 train.pairs[i].id + "')");
    }
}

eval::EvaluationReport run_trial(const TrialInputs& in, std::size_t trial,
                                 const std::filesystem::path& dir, Checkpoint& cp) {
    const RunConfig& config = in.config;
    const std::uint64_t tseed = trial_seed(config.seed, trial);
    const bool classifies = config.mode == Mode::filter_only || config.mode == Mode::ft_heal ||
                            config.mode == Mode::full;
    const bool heals = config.mode == Mode::ft_heal || config.mode == Mode::full;

    auto run_stage = [&](const char* name, auto&& body) {
        if (cp.done(name)) return false;
        try {
            body();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError("trial " + std::to_string(trial) + " stage '" + name +
                             "': " + e.what());
        }
        cp.complete(name);
        return true;
    };

    std::vector<classify::ClassificationVerdict> verdicts;
    const auto verdicts_path = dir / "verdicts.jsonl";
    if (classifies) {
        if (!run_stage("classify", [&] {
                auto classifier =
                    make_dataset_classifier(config.classifier, mix_seed(tseed, tag("classify")),
                                            config.parallelism, config.undetermined_limit);
                verdicts = classifier.run(in.train);
                classify::save_verdicts(verdicts, verdicts_path);
            })) {
            verdicts = classify::load_verdicts(verdicts_path);
        }
        check_verdict_alignment(in.train, verdicts);
    }

    corpus::ConversationDataset train_used;
    std::vector<heal::HealingRecord> records;
    const auto train_used_path = dir / "train_used.jsonl";
    const auto healing_path = dir / "healing.jsonl";
    if (!run_stage("curate", [&] {
            switch (config.mode) {
                case Mode::attack_baseline:
                case Mode::no_attack_baseline: {
                    train_used = in.train;
                    break;
                }
                case Mode::filter_only: {
                    train_used.name = in.train.name;
                    for (std::size_t i = 0; i < in.train.pairs.size(); ++i) {
                        const auto& v = verdicts[i];
                        if (v.is_toxic && !v.undetermined) continue;
                        train_used.pairs.push_back(in.train.pairs[i]);
                    }
                    if (train_used.pairs.empty())
                        throw ValidationError("filtering removed every training pair");
                    break;
                }
                case Mode::ft_heal:
                case Mode::full: {
                    const std::string canned =
                        config.nh_override ? *config.nh_override
                                           : std::string(heal::kCannedResponse);
                    heal::ChTemplate tmpl = heal::ChTemplate::default_template();
                    if (config.ch_template_path) {
                        std::ifstream tin(*config.ch_template_path, std::ios::binary);
                        if (!tin)
                            throw ValidationError("cannot open healing template: " +
                                                  *config.ch_template_path);
                        std::ostringstream buf;
                        buf << tin.rdbuf();
                        tmpl.text = buf.str();
                    }
                    std::unique_ptr<backends::Generator> generator;
                    if (config.healing == heal::HealMode::ch)
                        generator = make_heal_generator(config.ch_generator);
                    const std::uint64_t heal_seed = mix_seed(tseed, tag("heal"));
                    for (std::size_t i = 0; i < in.train.pairs.size(); ++i) {
                        const auto& pair = in.train.pairs[i];
                        const auto& v = verdicts[i];
                        if (!v.is_toxic || v.undetermined) continue;
                        if (config.healing == heal::HealMode::nh) {
                            records.push_back(heal::heal_noncontextual(pair, v, canned));
                        } else {
                            backends::GenerationParams params = config.generation;
                            params.seed = mix_seed(heal_seed, i);
                            records.push_back(heal::heal_contextual(pair, v, *generator, params,
                                                                    tmpl, 2, canned)
                                                  .record);
                        }
                    }
                    train_used = heal::apply_healing(in.train, verdicts, records);
                    heal::save_records(records, healing_path);
                    break;
                }
            }
            corpus::save_dataset(train_used, train_used_path);
        })) {
        train_used = corpus::load_dataset(train_used_path);
        if (heals) records = heal::load_records(healing_path);
    }

    backends::TabularPolicy sft_policy;
    const auto sft_policy_path = dir / "policy_sft.json";
    const auto policy_path = dir / "policy.json";
    if (!run_stage("finetune", [&] {
            backends::TabularPolicy base(in.vocabulary, in.eos);
            backends::SftHyper hyper = config.sft;
            hyper.seed = mix_seed(tseed, tag("sft"));
            align::SftOutcome outcome = align::finetune_stage(base, train_used, hyper);
            sft_policy = std::move(outcome.policy);
            sft_policy.save(sft_policy_path);
            write_loss_csv(dir / "sft_trace.csv", outcome.loss_trace);
            if (config.mode != Mode::full) sft_policy.save(policy_path);
        })) {
        sft_policy = backends::TabularPolicy::load(sft_policy_path);
    }

    backends::TabularPolicy final_policy;
    std::size_t preference_count = 0;
    if (config.mode == Mode::full) {
        if (!run_stage("align", [&] {
                auto built = heal::build_preference_set(in.train, verdicts, records);
                heal::save_preferences(built.data, dir / "preference.jsonl");
                preference_count = built.data.triplets.size();
                if (built.data.triplets.empty()) {
                    final_policy = sft_policy;  // nothing was flagged; alignment is a no-op
                } else {
                    align::DpoConfig dpo = config.dpo;
                    dpo.seed = mix_seed(tseed, tag("dpo"));
                    align::AlignResult result =
                        align::dpo_align(align::PolicyHandle::init(sft_policy), built.data, dpo);
                    align::write_trace_csv(dir / "dpo_trace.csv", result.trace);
                    final_policy = std::move(result.policy);
                }
                final_policy.save(policy_path);
            })) {
            final_policy = backends::TabularPolicy::load(policy_path);
            preference_count = heal::load_preferences(dir / "preference.jsonl").triplets.size();
        }
    } else {
        final_policy = sft_policy;
    }

    eval::EvaluationReport report;
    if (!run_stage("evaluate", [&] {
            report = evaluate_policy(final_policy, in.eval_toxic, in.eval_benign,
                                     config.evaluation, config.generation, tseed, dir);

            std::size_t flagged = 0, undetermined = 0;
            for (const auto& v : verdicts) {
                flagged += v.is_toxic && !v.undetermined ? 1 : 0;
                undetermined += v.undetermined ? 1 : 0;
            }
            ordered_json metadata;
            metadata["mode"] = to_string(config.mode);
            metadata["trial"] = trial;
            metadata["trial_seed"] = tseed;
            metadata["train_size"] = train_used.pairs.size();
            metadata["flagged"] = flagged;
            metadata["undetermined"] = undetermined;
            metadata["healed"] = records.size();
            if (config.mode == Mode::full) metadata["preference_triplets"] = preference_count;
            metadata["policy_checksum"] = hex64(final_policy.checksum());
            report.metadata = std::move(metadata);

            write_text(dir / "report.json", eval::report_to_json(report).dump(2) + "\n");
            write_text(dir / "report.txt", eval::render_report_text(report));
        })) {
        std::ifstream rin(dir / "report.json", std::ios::binary);
        if (!rin) throw ValidationError("missing report.json in " + dir.string());
        json j;
        rin >> j;
        report = eval::report_from_json(j);
    }
    return report;
}

eval::EvaluationReport aggregate_reports(const std::vector<TrialResult>& trials) {
    eval::EvaluationReport agg;
    const double n = static_cast<double>(trials.size());
    std::map<std::string, std::pair<double, std::size_t>> classwise;
    ordered_json per_trial = ordered_json::array();
    for (const auto& t : trials) {
        const auto& r = t.report;
        agg.rtr_toxic += r.rtr_toxic / n;
        agg.rtr_nontoxic += r.rtr_nontoxic / n;
        agg.ppl += r.ppl / n;
        agg.fbd += r.fbd / n;
        agg.evaluated_toxic += r.evaluated_toxic;
        agg.failed_toxic += r.failed_toxic;
        agg.evaluated_nontoxic += r.evaluated_nontoxic;
        agg.failed_nontoxic += r.failed_nontoxic;
        for (const auto& [label, rate] : r.classwise) {
            classwise[label].first += rate;
            classwise[label].second += 1;
        }
        ordered_json row;
        row["trial"] = per_trial.size();
        row["seed"] = t.seed;
        row["rtr_toxic"] = r.rtr_toxic;
        row["rtr_nontoxic"] = r.rtr_nontoxic;
        row["ppl"] = r.ppl;
        row["fbd"] = r.fbd;
        per_trial.push_back(std::move(row));
    }
    for (const auto& [label, acc] : classwise)
        agg.classwise[label] = acc.first / static_cast<double>(acc.second);
    if (!trials.empty() && trials.front().report.no_attack_rtr) {
        agg.no_attack_rtr = trials.front().report.no_attack_rtr;
        agg.success = agg.rtr_toxic <= *agg.no_attack_rtr;
    }
    agg.metadata["trials"] = trials.size();
    agg.metadata["per_trial"] = std::move(per_trial);
    return agg;
}

}  // namespace

RunSummary run_pipeline(const RunConfig& config) {
    config.validate();
    const corpus::ConversationDataset train = corpus::load_dataset(config.datasets.train);
    const corpus::ConversationDataset eval_toxic = corpus::load_dataset(config.datasets.eval_toxic);
    const corpus::ConversationDataset eval_benign =
        corpus::load_dataset(config.datasets.eval_benign);
    if (train.pairs.empty()) throw ValidationError("training dataset is empty");
    if (eval_toxic.pairs.empty()) throw ValidationError("toxic evaluation dataset is empty");
    if (eval_benign.pairs.empty()) throw ValidationError("benign evaluation dataset is empty");

    const std::filesystem::path run_dir = config.out_dir;
    std::filesystem::create_directories(run_dir);
    const ordered_json echo = config.to_json();
    write_text(run_dir / "config.json", echo.dump(2) + "\n");
    const std::uint64_t config_hash = fnv1a64(echo.dump());

    const std::string eos = "</s>";
    const std::vector<std::string> vocabulary =
        build_vocabulary(config, train, eval_toxic, eval_benign, eos);
    const TrialInputs inputs{config, train, eval_toxic, eval_benign, vocabulary, eos};

    RunSummary summary;
    summary.run_dir = run_dir;
    for (std::size_t t = 0; t < config.trials; ++t) {
        const std::filesystem::path dir = run_dir / ("trial-" + std::to_string(t));
        std::filesystem::create_directories(dir);
        Checkpoint cp(dir / "checkpoint.json", config_hash);
        TrialResult result;
        result.seed = trial_seed(config.seed, t);
        result.dir = dir;
        result.report = run_trial(inputs, t, dir, cp);
        summary.trials.push_back(std::move(result));
    }

    summary.aggregate = aggregate_reports(summary.trials);
    write_text(run_dir / "aggregate.json",
               eval::report_to_json(summary.aggregate).dump(2) + "\n");
    write_text(run_dir / "aggregate.txt", eval::render_report_text(summary.aggregate));
    return summary;
}

namespace {

std::size_t count_trials(const std::filesystem::path& run_dir) {
    std::size_t n = 0;
    while (std::filesystem::exists(run_dir / ("trial-" + std::to_string(n)))) ++n;
    return n;
}

std::set<std::string> log_context_ids(const std::filesystem::path& path) {
    std::set<std::string> ids;
    for (const auto& entry : eval::load_sample_log(path)) ids.insert(entry.context_id);
    return ids;
}

std::string list_ids(const std::set<std::string>& only, std::size_t cap = 20) {
    std::string out;
    std::size_t shown = 0;
    for (const auto& id : only) {
        if (shown == cap) {
            out += ", ...";
            break;
        }
        if (shown) out += ", ";
        out += id;
        ++shown;
    }
    return out;
}

eval::EvaluationReport load_aggregate(const std::filesystem::path& run_dir) {
    std::ifstream in(run_dir / "aggregate.json", std::ios::binary);
    if (!in)
        throw ValidationError("missing aggregate.json in " + run_dir.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("cannot parse aggregate report in " + run_dir.string() + ": " +
                         e.what());
    }
    return eval::report_from_json(j);
}

}  // namespace

ordered_json compare_runs(const std::filesystem::path& baseline_dir,
                          const std::filesystem::path& defense_dir) {
    const std::size_t trials_a = count_trials(baseline_dir);
    const std::size_t trials_b = count_trials(defense_dir);
    if (trials_a == 0 || trials_b == 0)
        throw ValidationError("both run directories need at least one completed trial");
    if (trials_a != trials_b)
        throw ValidationError("trial counts differ (" + std::to_string(trials_a) + " vs " +
                              std::to_string(trials_b) + ")");

    for (std::size_t t = 0; t < trials_a; ++t) {
        for (const char* log : {"samples_toxic.jsonl", "samples_benign.jsonl"}) {
            const auto a = log_context_ids(baseline_dir / ("trial-" + std::to_string(t)) / log);
            const auto b = log_context_ids(defense_dir / ("trial-" + std::to_string(t)) / log);
            if (a == b) continue;
            std::set<std::string> only_a, only_b;
            std::set_difference(a.begin(), a.end(), b.begin(), b.end(),
                                std::inserter(only_a, only_a.end()));
            std::set_difference(b.begin(), b.end(), a.begin(), a.end(),
                                std::inserter(only_b, only_b.end()));
            throw ValidationError(
                "evaluation context sets differ in trial " + std::to_string(t) + " (" + log +
                "); only in baseline: [" + list_ids(only_a) + "]; only in defense: [" +
                list_ids(only_b) + "]");
        }
    }

    const eval::EvaluationReport base = load_aggregate(baseline_dir);
    const eval::EvaluationReport defense = load_aggregate(defense_dir);

    auto metrics = [](const eval::EvaluationReport& r, const std::filesystem::path& dir) {
        ordered_json j;
        j["dir"] = dir.string();
        j["rtr_toxic"] = r.rtr_toxic;
        j["rtr_nontoxic"] = r.rtr_nontoxic;
        j["ppl"] = r.ppl;
        j["fbd"] = r.fbd;
        return j;
    };
    ordered_json out;
    out["baseline"] = metrics(base, baseline_dir);
    out["defense"] = metrics(defense, defense_dir);
    out["delta"] = {{"rtr_toxic", defense.rtr_toxic - base.rtr_toxic},
                    {"rtr_nontoxic", defense.rtr_nontoxic - base.rtr_nontoxic},
                    {"ppl", defense.ppl - base.ppl},
                    {"fbd", defense.fbd - base.fbd}};
    out["success"] = defense.rtr_toxic <= base.rtr_toxic;
    return out;
}

}  // namespace tuneshield::pipeline
