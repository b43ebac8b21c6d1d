#include "tuneshield/align.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <utility>

#include "tuneshield/errors.hpp"
#include "tuneshield/rng.hpp"

namespace tuneshield::align {

void validate(const DpoConfig& config) {
    if (!(config.beta > 0.0)) throw ValidationError("beta must be > 0");
    if (!(config.learning_rate >= 0.0)) throw ValidationError("learning_rate must be >= 0");
    if (config.epochs < 1) throw ValidationError("epochs must be >= 1");
}

namespace {

double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// -log sigmoid(z), without forming sigmoid(z) first.
double neg_log_sigmoid(double z) {
    if (z >= 0.0) return std::log1p(std::exp(-z));
    return -z + std::log1p(std::exp(z));
}

// Per-triplet scoring state. Reference log-probs are constants of the run, so they
// are computed once.
struct ScoredTriplet {
    const heal::PreferenceTriplet* triplet = nullptr;
    std::string key;
    std::vector<std::string> heal_tokens;
    std::vector<std::string> toxic_tokens;
    double ref_heal = 0.0;
    double ref_toxic = 0.0;
};

[[noreturn]] void non_finite(const heal::PreferenceTriplet& triplet) {
    throw NumericError("non-finite log-probability for triplet '" + triplet.pair_id + "'");
}

ScoredTriplet score_against_reference(const heal::PreferenceTriplet& triplet,
                                      const backends::TabularPolicy& reference) {
    ScoredTriplet s;
    s.triplet = &triplet;
    s.key = corpus::context_key(triplet.context);
    s.heal_tokens = reference.response_tokens(triplet.y_heal);
    s.toxic_tokens = reference.response_tokens(triplet.y_toxic);
    s.ref_heal = reference.sequence_log_prob(s.key, s.heal_tokens);
    s.ref_toxic = reference.sequence_log_prob(s.key, s.toxic_tokens);
    if (!std::isfinite(s.ref_heal) || !std::isfinite(s.ref_toxic)) non_finite(triplet);
    return s;
}

double policy_margin(const backends::TabularPolicy& policy, const ScoredTriplet& s, double beta) {
    const double heal = policy.sequence_log_prob(s.key, s.heal_tokens);
    const double toxic = policy.sequence_log_prob(s.key, s.toxic_tokens);
    return beta * ((heal - s.ref_heal) - (toxic - s.ref_toxic));
}

double checked_margin(const backends::TabularPolicy& policy, const ScoredTriplet& s, double beta) {
    const double z = policy_margin(policy, s, beta);
    if (!std::isfinite(z)) non_finite(*s.triplet);
    return z;
}

std::vector<ScoredTriplet> score_batch(const std::vector<heal::PreferenceTriplet>& batch,
                                       const backends::TabularPolicy& reference) {
    std::vector<ScoredTriplet> out;
    out.reserve(batch.size());
    for (const auto& t : batch) out.push_back(score_against_reference(t, reference));
    return out;
}

void check_beta(double beta) {
    if (!(beta > 0.0)) throw ValidationError("beta must be > 0");
}

void check_batch(const std::vector<heal::PreferenceTriplet>& batch) {
    if (batch.empty()) throw ValidationError("preference batch is empty");
}

// d z / d logits(key, t) is beta * (onehot - p) on the heal path and the negation on
// the toxic path; scale carries (sigmoid(z) - 1) / |batch| from the loss.
void accumulate_path(GradientMap& grads, const backends::TabularPolicy& policy,
                     const std::string& key, const std::vector<std::string>& tokens,
                     double scale) {
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const std::size_t idx = policy.token_index(tokens[t]);
        const std::vector<double> p = policy.step_probs(key, t);
        auto& row = grads[{key, t}];
        if (row.empty()) row.assign(p.size(), 0.0);
        for (std::size_t v = 0; v < p.size(); ++v) {
            const double onehot = v == idx ? 1.0 : 0.0;
            row[v] += scale * (onehot - p[v]);
        }
    }
}

GradientMap batch_gradient(const std::vector<ScoredTriplet>& scored,
                           const std::vector<std::size_t>& indices,
                           const backends::TabularPolicy& policy, double beta) {
    GradientMap grads;
    const double inv_n = 1.0 / static_cast<double>(indices.size());
    for (std::size_t i : indices) {
        const ScoredTriplet& s = scored[i];
        const double z = checked_margin(policy, s, beta);
        const double factor = (stable_sigmoid(z) - 1.0) * inv_n;
        accumulate_path(grads, policy, s.key, s.heal_tokens, factor * beta);
        accumulate_path(grads, policy, s.key, s.toxic_tokens, -factor * beta);
    }
    return grads;
}

}  // namespace

double dpo_loss(const std::vector<heal::PreferenceTriplet>& batch, const PolicyHandle& handle,
                double beta) {
    check_batch(batch);
    check_beta(beta);
    const auto scored = score_batch(batch, handle.reference);
    double sum = 0.0;
    for (const auto& s : scored) sum += neg_log_sigmoid(checked_margin(handle.policy, s, beta));
    return sum / static_cast<double>(batch.size());
}

double dpo_margin(const heal::PreferenceTriplet& triplet, const PolicyHandle& handle,
                  double beta) {
    check_beta(beta);
    const ScoredTriplet s = score_against_reference(triplet, handle.reference);
    return checked_margin(handle.policy, s, beta);
}

double mean_margin(const std::vector<heal::PreferenceTriplet>& batch, const PolicyHandle& handle,
                   double beta) {
    check_batch(batch);
    check_beta(beta);
    const auto scored = score_batch(batch, handle.reference);
    double sum = 0.0;
    for (const auto& s : scored) sum += checked_margin(handle.policy, s, beta);
    return sum / static_cast<double>(batch.size());
}

GradientMap dpo_loss_gradient(const std::vector<heal::PreferenceTriplet>& batch,
                              const PolicyHandle& handle, double beta) {
    check_batch(batch);
    check_beta(beta);
    const auto scored = score_batch(batch, handle.reference);
    std::vector<std::size_t> all(batch.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return batch_gradient(scored, all, handle.policy, beta);
}

AlignResult dpo_align(const PolicyHandle& handle, const heal::PreferenceDataset& data,
                      const DpoConfig& config) {
    validate(config);
    if (data.triplets.empty()) throw ValidationError("preference set is empty");

    const auto scored = score_batch(data.triplets, handle.reference);
    backends::TabularPolicy policy = handle.policy;
    backends::TabularPolicy last_finite = policy;

    const std::size_t n = data.triplets.size();
    const std::size_t batch =
        config.batch_size == 0 || config.batch_size > n ? n : config.batch_size;

    AlignResult result;
    std::vector<double> losses;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng(mix_seed(config.seed, epoch));
        rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t stop = std::min(start + batch, n);
            const std::vector<std::size_t> indices(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                   order.begin() + static_cast<std::ptrdiff_t>(stop));
            GradientMap grads;
            try {
                grads = batch_gradient(scored, indices, policy, config.beta);
            } catch (const NumericError&) {
                throw backends::TrainingDiverged(
                    "alignment diverged at epoch " + std::to_string(epoch),
                    std::move(last_finite), std::move(losses));
            }
            for (const auto& [where, grad] : grads) {
                auto& row = policy.logits_row(where.first, where.second);
                for (std::size_t v = 0; v < row.size(); ++v)
                    row[v] -= config.learning_rate * grad[v];
            }
        }

        double loss = 0.0;
        double margin_sum = 0.0;
        for (const auto& s : scored) {
            const double z = policy_margin(policy, s, config.beta);
            loss += neg_log_sigmoid(z);
            margin_sum += z;
        }
        loss /= static_cast<double>(n);
        const double margin = margin_sum / static_cast<double>(n);
        if (!std::isfinite(loss) || !std::isfinite(margin)) {
            throw backends::TrainingDiverged("alignment diverged at epoch " + std::to_string(epoch),
                                   std::move(last_finite), std::move(losses));
        }
        result.trace.push_back({epoch, loss, margin});
        losses.push_back(loss);
        last_finite = policy;
    }

    result.final_margins.reserve(n);
    double margin_sum = 0.0;
    for (const auto& s : scored) {
        const double z = checked_margin(policy, s, config.beta);
        result.final_margins.push_back(z);
        margin_sum += z;
    }
    result.final_mean_margin = margin_sum / static_cast<double>(n);
    result.final_mean_margin_unscaled = result.final_mean_margin / config.beta;
    result.policy = std::move(policy);
    return result;
}

SftOutcome finetune_stage(const backends::TabularPolicy& base,
                          const corpus::ConversationDataset& healed,
                          const backends::SftHyper& hyper) {
    backends::SftResult res = backends::sft_train(base, healed, hyper);
    return SftOutcome{std::move(res.policy), std::move(res.loss_trace)};
}

std::vector<SweepRow> sweep(const PolicyHandle& handle, const heal::PreferenceDataset& data,
                            const std::vector<DpoConfig>& grid, const DownstreamHook& downstream) {
    if (grid.empty()) throw ValidationError("sweep grid is empty");
    std::vector<SweepRow> rows;
    rows.reserve(grid.size());
    for (const auto& config : grid) {
        SweepRow row;
        row.config = config;
        try {
            AlignResult res = dpo_align(handle, data, config);
            row.trace = res.trace;
            row.final_loss = res.trace.empty() ? 0.0 : res.trace.back().loss;
            row.mean_margin = res.final_mean_margin;
            row.mean_margin_unscaled = res.final_mean_margin_unscaled;
            if (downstream) row.downstream = downstream(res.policy);
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write trace: " + path.string());
    out << "epoch,loss,mean_margin\n";
    char buf[128];
    for (const auto& row : trace) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g", row.epoch, row.loss, row.mean_margin);
        out << buf << '\n';
    }
}

}  // namespace tuneshield::align
