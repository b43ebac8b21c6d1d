#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tuneshield/heal.hpp"
#include "tuneshield/tabular_policy.hpp"

namespace tuneshield::align {

struct DpoConfig {
    double beta = 0.3;
    double learning_rate = 5e-6;
    std::size_t epochs = 3;
    std::size_t batch_size = 4;  // 0 = full batch
    std::uint64_t seed = 0;
};

void validate(const DpoConfig& config);  // beta > 0, learning_rate >= 0, epochs >= 1

// Trainable policy plus its frozen reference. The reference starts as a copy of the
// fine-tuned policy and is never updated by alignment.
struct PolicyHandle {
    backends::TabularPolicy policy;
    backends::TabularPolicy reference;

    static PolicyHandle init(const backends::TabularPolicy& finetuned) {
        return PolicyHandle{finetuned, finetuned};
    }
};

// Mean over the batch of -log sigmoid(beta * ((log pi(y_heal|x) - log ref(y_heal|x))
// - (log pi(y_toxic|x) - log ref(y_toxic|x)))). With policy == reference every
// triplet contributes exactly ln 2.
double dpo_loss(const std::vector<heal::PreferenceTriplet>& batch, const PolicyHandle& handle,
                double beta);

// Implicit reward margin of one triplet / mean over a batch (the z inside the
// sigmoid above). Positive means the healed response is preferred.
double dpo_margin(const heal::PreferenceTriplet& triplet, const PolicyHandle& handle, double beta);
double mean_margin(const std::vector<heal::PreferenceTriplet>& batch, const PolicyHandle& handle,
                   double beta);

// Exact gradient of dpo_loss with respect to the trainable policy's logit rows,
// keyed by (context key, position). Rows never touched by the batch are absent.
using GradientMap = std::map<std::pair<std::string, std::size_t>, std::vector<double>>;
GradientMap dpo_loss_gradient(const std::vector<heal::PreferenceTriplet>& batch,
                              const PolicyHandle& handle, double beta);

struct TraceRow {
    std::size_t epoch = 0;
    double loss = 0.0;
    double mean_margin = 0.0;
};

struct AlignResult {
    backends::TabularPolicy policy;
    std::vector<TraceRow> trace;          // full-dataset loss and margin, once per epoch
    std::vector<double> final_margins;    // per-triplet, beta-scaled
    double final_mean_margin = 0.0;
    double final_mean_margin_unscaled = 0.0;  // final_mean_margin / beta
};

// Gradient descent with a seeded per-epoch shuffle. The handle's reference model is
// read-only throughout; divergence raises TrainingDiverged carrying the last finite
// policy and the loss trace up to that point.
AlignResult dpo_align(const PolicyHandle& handle, const heal::PreferenceDataset& data,
                      const DpoConfig& config);

struct SftOutcome {
    backends::TabularPolicy policy;
    std::vector<double> loss_trace;
};

// Stage 2 of the defense: supervised fine-tuning on the healed dataset.
SftOutcome finetune_stage(const backends::TabularPolicy& base,
                          const corpus::ConversationDataset& healed,
                          const backends::SftHyper& hyper);

struct SweepRow {
    DpoConfig config;
    bool ok = false;
    std::string error;  // set when this grid point failed
    std::vector<TraceRow> trace;
    double final_loss = 0.0;
    double mean_margin = 0.0;
    double mean_margin_unscaled = 0.0;
    nlohmann::ordered_json downstream;  // optional metrics from the hook
};

using DownstreamHook = std::function<nlohmann::ordered_json(const backends::TabularPolicy&)>;

// Runs dpo_align once per grid point from the same starting handle. A failing point
// records its error and the sweep continues.
std::vector<SweepRow> sweep(const PolicyHandle& handle, const heal::PreferenceDataset& data,
                            const std::vector<DpoConfig>& grid,
                            const DownstreamHook& downstream = nullptr);

// CSV trace artifact: header "epoch,loss,mean_margin".
void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

}  // namespace tuneshield::align
