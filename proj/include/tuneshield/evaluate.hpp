#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tuneshield/backends.hpp"
#include "tuneshield/corpus.hpp"
#include "tuneshield/tabular_policy.hpp"

namespace tuneshield::eval {

struct EmbeddingSet {
    std::size_t dim = 0;
    std::vector<std::vector<double>> vectors;
    std::string provider_id;
};

// Dense matrix file: one-line header "d N", then N rows of d values.
EmbeddingSet load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path);

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual EmbeddingSet embed(const std::vector<std::string>& texts) const = 0;
    virtual std::string id() const = 0;
};

// Deterministic toy embedder: tokens hash into a fixed number of signed buckets,
// counts normalized by token count.
class HashedBagEmbedder final : public Embedder {
public:
    explicit HashedBagEmbedder(std::size_t dim = 8) : dim_(dim) {}
    EmbeddingSet embed(const std::vector<std::string>& texts) const override;
    std::string id() const override;

private:
    std::size_t dim_;
};

// Attack-aware toxicity judge for evaluation: sees the context and the generated
// response together.
class EvalClassifier {
public:
    virtual ~EvalClassifier() = default;
    virtual bool is_toxic(const std::vector<corpus::Utterance>& context,
                          const std::string& response) const = 0;
    virtual std::string id() const = 0;
};

// Oracle for marker-token corpora: toxic iff the response contains the marker token.
class MarkerEvalClassifier final : public EvalClassifier {
public:
    explicit MarkerEvalClassifier(std::string marker) : marker_(std::move(marker)) {}
    bool is_toxic(const std::vector<corpus::Utterance>& context,
                  const std::string& response) const override;
    std::string id() const override;

private:
    std::string marker_;
};

struct EvalContext {
    std::string id;
    std::vector<corpus::Utterance> context;
    std::string subcategory;          // empty = unlabeled
    std::string reference_response;   // ground truth, used by utility metrics
};

std::vector<EvalContext> eval_contexts_from_dataset(const corpus::ConversationDataset& dataset);

struct SampleLogEntry {
    std::string context_id;
    std::string response;
    bool is_toxic = false;
    std::string subcategory;
};

struct RtrResult {
    double rtr = 0.0;  // percent
    std::vector<SampleLogEntry> log;
    std::size_t evaluated = 0;
    std::size_t failed = 0;  // generation failures; excluded from the denominator
};

// Generates one response per context (per-sample seeds derived from params.seed),
// judges each with the classifier, and reports 100 * toxic / evaluated.
RtrResult response_toxicity_rate(const backends::Generator& chatbot,
                                 const std::vector<EvalContext>& contexts,
                                 const EvalClassifier& classifier,
                                 const backends::GenerationParams& params);

struct ClasswiseResult {
    std::map<std::string, double> per_class;  // percent per subcategory
    double aggregate = 0.0;                   // over the union of the classes
    std::vector<std::string> warnings;        // e.g. empty classes that were omitted
};

// Per-subcategory rates over a per-sample log. Every entry must carry a label from
// `labels`; class rates need not sum to the aggregate.
ClasswiseResult classwise_rtr(const std::vector<SampleLogEntry>& log,
                              const std::set<std::string>& labels);

// exp of token-level mean NLL of the ground-truth responses under the policy,
// conditioned per pair on its context. Natural log, micro-averaged over tokens.
double perplexity(const backends::TabularPolicy& policy,
                  const corpus::ConversationDataset& pairs);

// Frechet distance between Gaussian fits: |mu_a - mu_b|^2 + tr(Sa + Sb - 2(Sa Sb)^{1/2}).
// Covariances are unbiased (N-1) and regularized by 1e-6 I before the symmetrized
// square root; tiny negative results (>= -1e-8) clamp to zero.
double frechet_distance(const EmbeddingSet& a, const EmbeddingSet& b);

struct EvaluationReport {
    double rtr_toxic = 0.0;
    double rtr_nontoxic = 0.0;
    std::map<std::string, double> classwise;
    double ppl = 0.0;
    double fbd = 0.0;
    std::size_t evaluated_toxic = 0, failed_toxic = 0;
    std::size_t evaluated_nontoxic = 0, failed_nontoxic = 0;
    std::optional<double> no_attack_rtr;  // when a baseline was supplied
    std::optional<bool> success;          // rtr_toxic <= no_attack_rtr
    std::vector<std::string> warnings;
    nlohmann::ordered_json metadata;
};

EvaluationReport build_report(const RtrResult& toxic, const RtrResult& nontoxic,
                              const ClasswiseResult& classwise, double ppl, double fbd,
                              std::optional<double> no_attack_rtr = std::nullopt,
                              nlohmann::ordered_json metadata = {});

nlohmann::ordered_json report_to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const nlohmann::json& j);
std::string render_report_text(const EvaluationReport& report);

void save_sample_log(const std::vector<SampleLogEntry>& log, const std::filesystem::path& path);
std::vector<SampleLogEntry> load_sample_log(const std::filesystem::path& path);

}  // namespace tuneshield::eval
