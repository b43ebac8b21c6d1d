#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tuneshield/align.hpp"
#include "tuneshield/classify.hpp"
#include "tuneshield/evaluate.hpp"
#include "tuneshield/heal.hpp"
#include "tuneshield/tabular_policy.hpp"

namespace tuneshield::pipeline {

enum class Mode { attack_baseline, no_attack_baseline, filter_only, ft_heal, full };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& s);

struct DatasetPaths {
    std::string train;        // training pool (already poisoned for attack settings)
    std::string eval_toxic;   // contexts expected to elicit toxicity
    std::string eval_benign;  // benign contexts; also ground truth for utility metrics
};

struct RunConfig {
    Mode mode = Mode::attack_baseline;
    DatasetPaths datasets;
    nlohmann::ordered_json classifier;  // defense classifier spec, see make_pair_classifier
    heal::HealMode healing = heal::HealMode::nh;
    std::optional<std::string> nh_override;       // replaces the canned response
    std::optional<std::string> ch_template_path;  // file holding a {context} template
    nlohmann::ordered_json ch_generator;          // healing generator spec (CH mode)
    backends::SftHyper sft;
    align::DpoConfig dpo;
    backends::GenerationParams generation;
    nlohmann::ordered_json evaluation;  // eval classifier spec, embedding_dim, optional no_attack_rtr
    std::size_t trials = 1;
    std::uint64_t seed = 0;
    std::string out_dir;
    double undetermined_limit = 0.25;
    unsigned parallelism = 1;

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);
    nlohmann::ordered_json to_json() const;
    void validate() const;
};

// Per-trial seed stream: a pure function of the config seed and the trial index.
std::uint64_t trial_seed(std::uint64_t config_seed, std::size_t trial);

// Defense classifier factory from a config spec:
//   {"kind":"marker","marker":"tok"}                exact marker scan
//   {"kind":"marker","marker":"tok","recall":0.4}   + exact seeded recall degradation
//   {"kind":"refusal","policy":"path","variant":0}  refusal over a tabular scorer
// The marker degradation happens as a deterministic post-pass, so it plugs in as a
// dataset-level classifier.
struct DatasetClassifier {
    std::string id;
    // Runs over the whole dataset (order-preserving).
    std::function<std::vector<classify::ClassificationVerdict>(const corpus::ConversationDataset&)> run;
};
DatasetClassifier make_dataset_classifier(const nlohmann::ordered_json& spec, std::uint64_t seed,
                                          unsigned parallelism, double undetermined_limit);

// One evaluation pass over a trained policy: toxicity rates on both context sets
// (sample logs land in out_dir), class-wise rates when the toxic contexts are
// labeled, perplexity and embedding distance on the benign set. `evaluation` is the
// RunConfig evaluation spec ({"classifier":{...}, "embedding_dim":8, ...}).
eval::EvaluationReport evaluate_policy(const backends::TabularPolicy& policy,
                                       const corpus::ConversationDataset& eval_toxic,
                                       const corpus::ConversationDataset& eval_benign,
                                       const nlohmann::ordered_json& evaluation,
                                       const backends::GenerationParams& generation,
                                       std::uint64_t seed, const std::filesystem::path& out_dir);

struct TrialResult {
    std::uint64_t seed = 0;
    eval::EvaluationReport report;
    std::filesystem::path dir;
};

struct RunSummary {
    std::filesystem::path run_dir;
    std::vector<TrialResult> trials;
    eval::EvaluationReport aggregate;  // metric means across trials
};

// Executes the configured defense end to end, one subdirectory per trial:
// classify -> curate (filter or heal) -> fine-tune -> align (full mode) -> evaluate.
// Every artifact lands under config.out_dir; a checkpoint file marks completed
// stages so an interrupted run can resume. Stage failures raise StageError.
RunSummary run_pipeline(const RunConfig& config);

// Loads two run directories, verifies they evaluated identical context sets, and
// reports metric deltas plus a defense-success verdict.
nlohmann::ordered_json compare_runs(const std::filesystem::path& baseline_dir,
                                    const std::filesystem::path& defense_dir);

}  // namespace tuneshield::pipeline
