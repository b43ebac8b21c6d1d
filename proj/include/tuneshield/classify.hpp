#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tuneshield/backends.hpp"
#include "tuneshield/corpus.hpp"

namespace tuneshield::classify {

struct ClassificationVerdict {
    std::string pair_id;
    double p_no = 0.0;  // probability mass on the refusal answer; in [0, 1]
    bool is_toxic = false;
    std::string classifier_id;
    std::optional<int> variant_id;
    // Backend failed after retries: surfaced, counted, never a silent non-toxic.
    bool undetermined = false;
};

struct PromptVariant {
    std::string description;
    std::string instruction;
};

struct PromptVariantSet {
    std::vector<PromptVariant> variants;
};

// Ten shipped description/instruction paraphrases; variant 0 is the default.
const PromptVariantSet& default_variant_set();

// Plain-text variant files: numbered blocks of "description:" / "instruction:" lines.
PromptVariantSet load_variant_set(const std::filesystem::path& path);

// Surface forms scored for each side of the refusal question. Case variants of one
// side aggregate by log-sum-exp before the softmax.
struct RefusalConfig {
    std::vector<std::string> yes_forms{"yes"};
    std::vector<std::string> no_forms{"no"};
};

// Prompt layout: description, then the rendered context-response transcript, then
// the yes/no instruction. The instruction comes after the data on purpose: text
// smuggled into a response cannot displace it.
backends::PromptText build_refusal_prompt(const corpus::ContextResponsePair& pair,
                                          const PromptVariant& variant);

// Two-way softmax over aggregated log-likelihoods; numerically shift-invariant.
double refusal_p_no(double ll_yes, double ll_no);

ClassificationVerdict refusal_classify(const corpus::ContextResponsePair& pair,
                                       const backends::ChoiceScorer& backend,
                                       const PromptVariant& variant,
                                       const RefusalConfig& config = {},
                                       std::optional<int> variant_id = std::nullopt);

using PairClassifier = std::function<ClassificationVerdict(const corpus::ContextResponsePair&)>;

// Order-preserving map over the dataset. Worker failures become undetermined
// verdicts; if more than max_undetermined_fraction of the verdicts are undetermined
// the whole pass raises AggregateError. Results do not depend on parallelism.
std::vector<ClassificationVerdict> classify_dataset(const corpus::ConversationDataset& dataset,
                                                    const PairClassifier& classifier,
                                                    unsigned parallelism = 1,
                                                    double max_undetermined_fraction = 1.0);

struct VariantMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct ClassifierMetrics {
    std::vector<VariantMetrics> per_variant;
    double precision_mean = 0.0, precision_std = 0.0;
    double recall_mean = 0.0, recall_std = 0.0;
    double f1_mean = 0.0, f1_std = 0.0;  // std is population std across variants
};

// Toxic-class precision/recall/F1 per variant, then mean/std across variants
// (metrics are averaged, not the underlying probabilities). Every verdict needs a
// gold label; missing ones are reported by id.
ClassifierMetrics evaluate_classifier(const std::vector<std::vector<ClassificationVerdict>>& per_variant,
                                      const corpus::ConversationDataset& gold);

struct PrecisionTuneResult {
    bool feasible = false;
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

// Smallest threshold from the sorted unique score set whose toxic-class precision
// (predict toxic when score >= threshold) meets the target; that threshold has the
// best recall among qualifying ones. Infeasible targets return feasible = false.
PrecisionTuneResult precision_tune(const std::vector<double>& scores,
                                   const std::vector<bool>& gold_toxic,
                                   double target_precision);

// Flips true-positive verdicts of one subcategory to non-toxic, chosen uniformly at
// random under the seed, until that subcategory's recall is within 1/positives of
// target_recall. Verdicts outside the target set are returned untouched.
std::vector<ClassificationVerdict> induce_bias(const std::vector<ClassificationVerdict>& verdicts,
                                               const corpus::ConversationDataset& gold,
                                               const std::string& target_subcategory,
                                               double target_recall, std::uint64_t seed);

void save_verdicts(const std::vector<ClassificationVerdict>& verdicts,
                   const std::filesystem::path& path);
std::vector<ClassificationVerdict> load_verdicts(const std::filesystem::path& path);

}  // namespace tuneshield::classify
