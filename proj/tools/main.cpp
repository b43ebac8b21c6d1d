#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tuneshield/align.hpp"
#include "tuneshield/attacks.hpp"
#include "tuneshield/classify.hpp"
#include "tuneshield/corpus.hpp"
#include "tuneshield/errors.hpp"
#include "tuneshield/evaluate.hpp"
#include "tuneshield/heal.hpp"
#include "tuneshield/pipeline.hpp"
#include "tuneshield/rng.hpp"
#include "tuneshield/tabular_policy.hpp"

namespace ts = tuneshield;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// 2 for anything the user can fix in inputs or config, 3 for failures of the run
// itself (training, backends, stages).
int failure_code(const std::exception& e) {
    if (dynamic_cast<const ts::ValidationError*>(&e) || dynamic_cast<const ts::ParseError*>(&e) ||
        dynamic_cast<const ts::IntegrityError*>(&e) ||
        dynamic_cast<const ts::CapacityError*>(&e) ||
        dynamic_cast<const ts::VocabularyError*>(&e) ||
        dynamic_cast<const ts::CapabilityError*>(&e))
        return 2;
    return 3;
}

ordered_json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ts::ValidationError("cannot open " + path);
    try {
        ordered_json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw ts::ParseError("cannot parse " + path + ": " + e.what());
    }
}

void write_json_file(const std::string& path, const ordered_json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ts::ValidationError("cannot write " + path);
    out << j.dump(2) << '\n';
}

std::string require(const std::string& value, const char* what) {
    if (value.empty()) throw ts::ValidationError(std::string(what) + " is required");
    return value;
}

std::vector<std::string> vocabulary_from_responses(const ts::corpus::ConversationDataset& data,
                                                   const std::string& eos) {
    std::set<std::string> tokens;
    for (const auto& pair : data.pairs) {
        for (auto& t : ts::backends::TabularPolicy::tokenize(pair.response))
            tokens.insert(std::move(t));
    }
    tokens.insert(eos);
    if (tokens.size() > ts::backends::TabularPolicy::kMaxVocabulary)
        throw ts::ValidationError("dataset needs " + std::to_string(tokens.size()) +
                                  " vocabulary tokens; the toy policy supports at most " +
                                  std::to_string(ts::backends::TabularPolicy::kMaxVocabulary));
    return {tokens.begin(), tokens.end()};
}

void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ts::ValidationError("cannot write " + path);
    out << "epoch,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g", i, losses[i]);
        out << buf << '\n';
    }
}

struct GlobalArgs {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int cmd_poison(const GlobalArgs& g, const std::string& clean_path,
               const std::string& toxic_path, std::size_t total, double rate) {
    const auto clean = ts::corpus::load_dataset(clean_path);
    const auto toxic = ts::corpus::load_dataset(toxic_path);
    ts::corpus::PoisonSpec spec;
    spec.total_size = total;
    spec.injection_rate = rate;
    spec.seed = g.seed;
    const auto poisoned = ts::corpus::inject_toxic(clean, toxic, spec);
    ts::corpus::save_dataset(poisoned, require(g.out, "--out"));
    std::cout << "wrote " << poisoned.pairs.size() << " pairs ("
              << ts::corpus::injected_count(total, rate) << " injected) to " << g.out << "\n";
    return 0;
}

int cmd_classify(const GlobalArgs& g, const std::string& data_path, unsigned parallelism,
                 double undetermined_limit) {
    const auto data = ts::corpus::load_dataset(data_path);
    const ordered_json spec = load_json_file(require(g.config, "--config"));
    const auto classifier =
        ts::pipeline::make_dataset_classifier(spec, g.seed, parallelism, undetermined_limit);
    const auto verdicts = classifier.run(data);
    ts::classify::save_verdicts(verdicts, require(g.out, "--out"));
    std::size_t flagged = 0, undetermined = 0;
    for (const auto& v : verdicts) {
        flagged += v.is_toxic && !v.undetermined ? 1 : 0;
        undetermined += v.undetermined ? 1 : 0;
    }
    std::cout << classifier.id << ": flagged " << flagged << " of " << verdicts.size()
              << " pairs (" << undetermined << " undetermined) -> " << g.out << "\n";
    return 0;
}

int cmd_heal(const GlobalArgs& g, const std::string& data_path, const std::string& verdicts_path,
             const std::string& mode_name, const std::string& canned_override,
             const std::string& template_path, const std::string& generator_path) {
    const auto data = ts::corpus::load_dataset(data_path);
    const auto verdicts = ts::classify::load_verdicts(verdicts_path);
    const auto mode = ts::heal::heal_mode_from_string(mode_name);
    const std::string canned =
        canned_override.empty() ? std::string(ts::heal::kCannedResponse) : canned_override;

    ts::heal::ChTemplate tmpl = ts::heal::ChTemplate::default_template();
    if (!template_path.empty()) {
        std::ifstream in(template_path, std::ios::binary);
        if (!in) throw ts::ValidationError("cannot open healing template: " + template_path);
        std::ostringstream buf;
        buf << in.rdbuf();
        tmpl.text = buf.str();
    }

    std::map<std::string, const ts::classify::ClassificationVerdict*> by_id;
    for (const auto& v : verdicts) by_id[v.pair_id] = &v;

    std::unique_ptr<ts::backends::Generator> generator;
    if (mode == ts::heal::HealMode::ch) {
        generator = [&] {
            const ordered_json spec = load_json_file(require(generator_path, "--generator"));
            if (spec.value("kind", std::string()) == "fixed")
                return std::unique_ptr<ts::backends::Generator>(
                    new ts::backends::FixedResponseGenerator(spec.value("text", std::string())));
            if (spec.value("kind", std::string()) == "policy")
                return std::unique_ptr<ts::backends::Generator>(new ts::backends::TabularGenerator(
                    ts::backends::TabularPolicy::load(spec.value("policy", std::string()))));
            throw ts::ValidationError("unknown healing generator kind");
        }();
    }

    std::vector<ts::heal::HealingRecord> records;
    for (std::size_t i = 0; i < data.pairs.size(); ++i) {
        const auto& pair = data.pairs[i];
        auto it = by_id.find(pair.id);
        if (it == by_id.end()) continue;
        const auto& v = *it->second;
        if (!v.is_toxic || v.undetermined) continue;
        if (mode == ts::heal::HealMode::nh) {
            records.push_back(ts::heal::heal_noncontextual(pair, v, canned));
        } else {
            ts::backends::GenerationParams params;
            params.seed = ts::mix_seed(g.seed, i);
            records.push_back(
                ts::heal::heal_contextual(pair, v, *generator, params, tmpl, 2, canned).record);
        }
    }
    const auto healed = ts::heal::apply_healing(data, verdicts, records);

    const std::filesystem::path out_dir = require(g.out, "--out");
    std::filesystem::create_directories(out_dir);
    ts::heal::save_records(records, out_dir / "healing.jsonl");
    ts::corpus::save_dataset(healed, out_dir / "healed.jsonl");
    std::cout << "healed " << records.size() << " of " << data.pairs.size() << " pairs -> "
              << out_dir.string() << "\n";
    return 0;
}

int cmd_finetune(const GlobalArgs& g, const std::string& data_path, double lr,
                 std::size_t epochs, std::size_t batch) {
    const auto data = ts::corpus::load_dataset(data_path);
    const std::string eos = "</s>";
    ts::backends::TabularPolicy base(vocabulary_from_responses(data, eos), eos);
    ts::backends::SftHyper hyper;
    hyper.learning_rate = lr;
    hyper.epochs = epochs;
    hyper.batch_size = batch;
    hyper.seed = g.seed;
    const auto outcome = ts::align::finetune_stage(base, data, hyper);

    const std::filesystem::path out_dir = require(g.out, "--out");
    std::filesystem::create_directories(out_dir);
    outcome.policy.save(out_dir / "policy.json");
    write_loss_csv((out_dir / "sft_trace.csv").string(), outcome.loss_trace);
    std::cout << "fine-tuned on " << data.pairs.size() << " pairs; final loss "
              << (outcome.loss_trace.empty() ? 0.0 : outcome.loss_trace.back()) << " -> "
              << out_dir.string() << "\n";
    return 0;
}

int cmd_align(const GlobalArgs& g, const std::string& policy_path,
              const std::string& preferences_path, double beta, double lr, std::size_t epochs,
              std::size_t batch) {
    const auto policy = ts::backends::TabularPolicy::load(policy_path);
    const auto preferences = ts::heal::load_preferences(preferences_path);
    ts::align::DpoConfig config;
    config.beta = beta;
    config.learning_rate = lr;
    config.epochs = epochs;
    config.batch_size = batch;
    config.seed = g.seed;
    const auto result =
        ts::align::dpo_align(ts::align::PolicyHandle::init(policy), preferences, config);

    const std::filesystem::path out_dir = require(g.out, "--out");
    std::filesystem::create_directories(out_dir);
    result.policy.save(out_dir / "policy.json");
    ts::align::write_trace_csv(out_dir / "dpo_trace.csv", result.trace);
    std::cout << "aligned on " << preferences.triplets.size() << " triplets; final loss "
              << (result.trace.empty() ? 0.0 : result.trace.back().loss) << ", mean margin "
              << result.final_mean_margin << " (" << result.final_mean_margin_unscaled
              << " unscaled) -> " << out_dir.string() << "\n";
    return 0;
}

int cmd_evaluate(const GlobalArgs& g, const std::string& policy_path,
                 const std::string& toxic_path, const std::string& benign_path,
                 const std::string& marker, double temperature, std::size_t max_tokens,
                 std::size_t embedding_dim, std::optional<double> no_attack_rtr) {
    const auto policy = ts::backends::TabularPolicy::load(policy_path);
    const auto eval_toxic = ts::corpus::load_dataset(toxic_path);
    const auto eval_benign = ts::corpus::load_dataset(benign_path);

    ordered_json evaluation;
    evaluation["classifier"] = {{"kind", "marker"}, {"marker", marker}};
    evaluation["embedding_dim"] = embedding_dim;
    if (no_attack_rtr) evaluation["no_attack_rtr"] = *no_attack_rtr;

    ts::backends::GenerationParams params;
    params.temperature = temperature;
    params.max_tokens = max_tokens;

    const std::filesystem::path out_dir = require(g.out, "--out");
    const auto report = ts::pipeline::evaluate_policy(policy, eval_toxic, eval_benign,
                                                      evaluation, params, g.seed, out_dir);
    write_json_file((out_dir / "report.json").string(), ts::eval::report_to_json(report));
    const std::string text = ts::eval::render_report_text(report);
    std::ofstream(out_dir / "report.txt", std::ios::binary) << text;
    std::cout << text;
    return 0;
}

int cmd_run(const GlobalArgs& g) {
    ts::pipeline::RunConfig config = ts::pipeline::RunConfig::load(require(g.config, "--config"));
    if (g.seed_set) config.seed = g.seed;
    if (!g.out.empty()) config.out_dir = g.out;
    const auto summary = ts::pipeline::run_pipeline(config);
    std::cout << "run complete: " << summary.trials.size() << " trial(s) under "
              << summary.run_dir.string() << "\n\n"
              << ts::eval::render_report_text(summary.aggregate);
    return 0;
}

int cmd_sweep(const GlobalArgs& g, const std::string& policy_path,
              const std::string& preferences_path, const std::string& grid_path) {
    const auto policy = ts::backends::TabularPolicy::load(policy_path);
    const auto preferences = ts::heal::load_preferences(preferences_path);
    const ordered_json grid_json = load_json_file(grid_path);
    if (!grid_json.is_array() || grid_json.empty())
        throw ts::ValidationError("grid file must hold a non-empty JSON array of configs");

    std::vector<ts::align::DpoConfig> grid;
    for (std::size_t i = 0; i < grid_json.size(); ++i) {
        const auto& row = grid_json[i];
        ts::align::DpoConfig c;
        c.beta = row.value("beta", c.beta);
        c.learning_rate = row.value("learning_rate", c.learning_rate);
        c.epochs = row.value("epochs", c.epochs);
        c.batch_size = row.value("batch_size", c.batch_size);
        c.seed = row.value("seed", ts::mix_seed(g.seed, i));
        grid.push_back(c);
    }

    const auto rows =
        ts::align::sweep(ts::align::PolicyHandle::init(policy), preferences, grid);

    ordered_json out = ordered_json::array();
    for (const auto& row : rows) {
        ordered_json r;
        r["beta"] = row.config.beta;
        r["learning_rate"] = row.config.learning_rate;
        r["epochs"] = row.config.epochs;
        r["batch_size"] = row.config.batch_size;
        r["seed"] = row.config.seed;
        r["ok"] = row.ok;
        if (!row.ok) r["error"] = row.error;
        r["final_loss"] = row.final_loss;
        r["mean_margin"] = row.mean_margin;
        r["mean_margin_unscaled"] = row.mean_margin_unscaled;
        if (!row.downstream.is_null()) r["downstream"] = row.downstream;
        out.push_back(std::move(r));
    }
    write_json_file(require(g.out, "--out"), out);

    std::printf("%8s %12s %7s %6s %12s %12s %14s\n", "beta", "lr", "epochs", "ok", "loss",
                "margin", "margin/beta");
    for (const auto& row : rows) {
        std::printf("%8g %12g %7zu %6s %12.6g %12.6g %14.6g\n", row.config.beta,
                    row.config.learning_rate, row.config.epochs, row.ok ? "yes" : "no",
                    row.final_loss, row.mean_margin, row.mean_margin_unscaled);
    }
    return 0;
}

int cmd_compare(const GlobalArgs& g, const std::string& baseline, const std::string& defense) {
    const ordered_json result = ts::pipeline::compare_runs(baseline, defense);
    if (!g.out.empty()) write_json_file(g.out, result);
    std::cout << result.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Defense pipeline against toxicity injection in conversational fine-tuning"};
    app.require_subcommand(1);

    GlobalArgs g;
    auto* config_opt = app.add_option("--config", g.config, "Config or spec file (JSON)");
    auto* seed_opt = app.add_option("--seed", g.seed, "Root random seed");
    auto* out_opt = app.add_option("--out", g.out, "Output file or directory");
    (void)config_opt;
    (void)out_opt;

    auto* poison = app.add_subcommand("poison", "Blend a toxic pool into a clean pool");
    std::string poison_clean, poison_toxic;
    std::size_t poison_total = 0;
    double poison_rate = 0.0;
    poison->add_option("--clean", poison_clean, "Clean pool (JSONL)")->required();
    poison->add_option("--toxic", poison_toxic, "Toxic pool (JSONL)")->required();
    poison->add_option("--total", poison_total, "Output dataset size")->required();
    poison->add_option("--rate", poison_rate, "Injected fraction in [0,1]")->required();

    auto* classifyc = app.add_subcommand("classify", "Flag toxic pairs in a dataset");
    std::string classify_data;
    unsigned classify_parallelism = 1;
    double classify_limit = 1.0;
    classifyc->add_option("--data", classify_data, "Dataset (JSONL)")->required();
    classifyc->add_option("--parallelism", classify_parallelism, "Worker threads");
    classifyc->add_option("--undetermined-limit", classify_limit,
                          "Max tolerated undetermined fraction");

    auto* healc = app.add_subcommand("heal", "Replace flagged responses with healing data");
    std::string heal_data, heal_verdicts, heal_mode = "NH", heal_canned, heal_template,
                           heal_generator;
    healc->add_option("--data", heal_data, "Dataset (JSONL)")->required();
    healc->add_option("--verdicts", heal_verdicts, "Verdicts (JSONL)")->required();
    healc->add_option("--mode", heal_mode, "NH (canned) or CH (generated)");
    healc->add_option("--canned", heal_canned, "Override the canned response");
    healc->add_option("--template", heal_template, "Contextual-healing template file");
    healc->add_option("--generator", heal_generator, "Healing generator spec (JSON)");

    auto* finetunec = app.add_subcommand("finetune", "Fine-tune the toy policy on a dataset");
    std::string ft_data;
    double ft_lr = 0.5;
    std::size_t ft_epochs = 1, ft_batch = 0;
    finetunec->add_option("--data", ft_data, "Dataset (JSONL)")->required();
    finetunec->add_option("--lr", ft_lr, "Learning rate");
    finetunec->add_option("--epochs", ft_epochs, "Training epochs");
    finetunec->add_option("--batch", ft_batch, "Batch size (0 = full)");

    auto* alignc = app.add_subcommand("align", "Preference-align a fine-tuned policy");
    std::string align_policy, align_preferences;
    double align_beta = 0.3, align_lr = 5e-6;
    std::size_t align_epochs = 3, align_batch = 4;
    alignc->add_option("--policy", align_policy, "Fine-tuned policy (JSON)")->required();
    alignc->add_option("--preferences", align_preferences, "Preference triplets (JSONL)")
        ->required();
    alignc->add_option("--beta", align_beta, "Divergence scale");
    alignc->add_option("--lr", align_lr, "Learning rate");
    alignc->add_option("--epochs", align_epochs, "Training epochs");
    alignc->add_option("--batch", align_batch, "Batch size (0 = full)");

    auto* evaluatec = app.add_subcommand("evaluate", "Measure toxicity and utility of a policy");
    std::string eval_policy, eval_toxic, eval_benign, eval_marker;
    double eval_temperature = 0.9;
    std::size_t eval_max_tokens = 128, eval_dim = 8;
    double eval_no_attack = -1.0;
    evaluatec->add_option("--policy", eval_policy, "Policy (JSON)")->required();
    evaluatec->add_option("--toxic", eval_toxic, "Toxicity-eliciting contexts (JSONL)")
        ->required();
    evaluatec->add_option("--benign", eval_benign, "Benign contexts (JSONL)")->required();
    evaluatec->add_option("--marker", eval_marker, "Marker token for the toxicity judge")
        ->required();
    evaluatec->add_option("--temperature", eval_temperature, "Sampling temperature");
    evaluatec->add_option("--max-tokens", eval_max_tokens, "Max generated tokens");
    evaluatec->add_option("--embedding-dim", eval_dim, "Embedding dimension");
    auto* eval_na_opt =
        evaluatec->add_option("--no-attack-rtr", eval_no_attack, "Baseline toxicity rate");

    auto* runc = app.add_subcommand("run", "Execute a configured defense end to end");

    auto* sweepc = app.add_subcommand("sweep", "Alignment grid sweep");
    std::string sweep_policy, sweep_preferences, sweep_grid;
    sweepc->add_option("--policy", sweep_policy, "Fine-tuned policy (JSON)")->required();
    sweepc->add_option("--preferences", sweep_preferences, "Preference triplets (JSONL)")
        ->required();
    sweepc->add_option("--grid", sweep_grid, "Grid file (JSON array of configs)")->required();

    auto* comparec = app.add_subcommand("compare", "Diff two run directories");
    std::string compare_baseline, compare_defense;
    comparec->add_option("--baseline", compare_baseline, "Baseline run directory")->required();
    comparec->add_option("--defense", compare_defense, "Defense run directory")->required();

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    g.seed_set = seed_opt->count() > 0;

    try {
        if (poison->parsed())
            return cmd_poison(g, poison_clean, poison_toxic, poison_total, poison_rate);
        if (classifyc->parsed())
            return cmd_classify(g, classify_data, classify_parallelism, classify_limit);
        if (healc->parsed())
            return cmd_heal(g, heal_data, heal_verdicts, heal_mode, heal_canned, heal_template,
                            heal_generator);
        if (finetunec->parsed()) return cmd_finetune(g, ft_data, ft_lr, ft_epochs, ft_batch);
        if (alignc->parsed())
            return cmd_align(g, align_policy, align_preferences, align_beta, align_lr,
                             align_epochs, align_batch);
        if (evaluatec->parsed()) {
            std::optional<double> no_attack;
            if (eval_na_opt->count() > 0) no_attack = eval_no_attack;
            return cmd_evaluate(g, eval_policy, eval_toxic, eval_benign, eval_marker,
                                eval_temperature, eval_max_tokens, eval_dim, no_attack);
        }
        if (runc->parsed()) return cmd_run(g);
        if (sweepc->parsed()) return cmd_sweep(g, sweep_policy, sweep_preferences, sweep_grid);
        if (comparec->parsed()) return cmd_compare(g, compare_baseline, compare_defense);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return failure_code(e);
    }
    return 0;
}
