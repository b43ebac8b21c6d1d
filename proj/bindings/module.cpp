#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

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

namespace py = pybind11;
namespace ts = tuneshield;
using nlohmann::ordered_json;

namespace {

py::object json_to_py(const ordered_json& j) {
    switch (j.type()) {
        case ordered_json::value_t::null:
            return py::none();
        case ordered_json::value_t::boolean:
            return py::bool_(j.get<bool>());
        case ordered_json::value_t::number_integer:
            return py::int_(j.get<std::int64_t>());
        case ordered_json::value_t::number_unsigned:
            return py::int_(j.get<std::uint64_t>());
        case ordered_json::value_t::number_float:
            return py::float_(j.get<double>());
        case ordered_json::value_t::string:
            return py::str(j.get<std::string>());
        case ordered_json::value_t::array: {
            py::list out;
            for (const auto& item : j) out.append(json_to_py(item));
            return out;
        }
        case ordered_json::value_t::object: {
            py::dict out;
            for (const auto& [key, value] : j.items()) out[py::str(key)] = json_to_py(value);
            return out;
        }
        default:
            throw ts::ValidationError("unsupported JSON value type");
    }
}

ordered_json py_to_json(const py::handle& obj) {
    if (obj.is_none()) return nullptr;
    if (py::isinstance<py::bool_>(obj)) return obj.cast<bool>();
    if (py::isinstance<py::int_>(obj)) return obj.cast<std::int64_t>();
    if (py::isinstance<py::float_>(obj)) return obj.cast<double>();
    if (py::isinstance<py::str>(obj)) return obj.cast<std::string>();
    if (py::isinstance<py::dict>(obj)) {
        ordered_json out = ordered_json::object();
        for (const auto& item : obj.cast<py::dict>())
            out[item.first.cast<std::string>()] = py_to_json(item.second);
        return out;
    }
    if (py::isinstance<py::list>(obj) || py::isinstance<py::tuple>(obj)) {
        ordered_json out = ordered_json::array();
        for (const auto& item : obj.cast<py::sequence>()) out.push_back(py_to_json(item));
        return out;
    }
    throw ts::ValidationError("cannot convert python object of type " +
                              std::string(py::str(py::type::of(obj))) + " to JSON");
}

ts::eval::EmbeddingSet embedding_set_from_rows(const std::vector<std::vector<double>>& rows,
                                               const std::string& name) {
    if (rows.empty()) throw ts::ValidationError(name + " must hold at least one vector");
    ts::eval::EmbeddingSet set;
    set.dim = rows.front().size();
    for (const auto& row : rows) {
        if (row.size() != set.dim)
            throw ts::ValidationError(name + " rows disagree on dimension");
    }
    set.vectors = rows;
    set.provider_id = "inline";
    return set;
}

ordered_json summary_to_json(const ts::pipeline::RunSummary& summary) {
    ordered_json out;
    out["run_dir"] = summary.run_dir.string();
    out["trials"] = ordered_json::array();
    for (const auto& trial : summary.trials) {
        ordered_json t;
        t["seed"] = trial.seed;
        t["dir"] = trial.dir.string();
        t["report"] = ts::eval::report_to_json(trial.report);
        out["trials"].push_back(std::move(t));
    }
    out["aggregate"] = ts::eval::report_to_json(summary.aggregate);
    return out;
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

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ts::ValidationError("cannot write " + path.string());
    out << "epoch,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g", i, losses[i]);
        out << buf << '\n';
    }
}

py::dict py_poison(const std::filesystem::path& clean_path, const std::filesystem::path& toxic_path,
                   std::size_t total, double rate, std::uint64_t seed,
                   const std::filesystem::path& out_path) {
    const auto clean = ts::corpus::load_dataset(clean_path);
    const auto toxic = ts::corpus::load_dataset(toxic_path);
    ts::corpus::PoisonSpec spec;
    spec.total_size = total;
    spec.injection_rate = rate;
    spec.seed = seed;
    const auto poisoned = ts::corpus::inject_toxic(clean, toxic, spec);
    ts::corpus::save_dataset(poisoned, out_path);
    py::dict out;
    out["written"] = poisoned.pairs.size();
    out["injected"] = ts::corpus::injected_count(total, rate);
    out["path"] = out_path.string();
    return out;
}

py::dict py_classify(const std::filesystem::path& data_path, const py::dict& spec,
                     const std::filesystem::path& out_path, std::uint64_t seed,
                     unsigned parallelism, double undetermined_limit) {
    const auto data = ts::corpus::load_dataset(data_path);
    const auto classifier =
        ts::pipeline::make_dataset_classifier(py_to_json(spec), seed, parallelism,
                                              undetermined_limit);
    const auto verdicts = classifier.run(data);
    ts::classify::save_verdicts(verdicts, out_path);
    std::size_t flagged = 0, undetermined = 0;
    for (const auto& v : verdicts) {
        flagged += v.is_toxic && !v.undetermined ? 1 : 0;
        undetermined += v.undetermined ? 1 : 0;
    }
    py::dict out;
    out["classifier_id"] = classifier.id;
    out["total"] = verdicts.size();
    out["flagged"] = flagged;
    out["undetermined"] = undetermined;
    out["path"] = out_path.string();
    return out;
}

py::dict py_heal(const std::filesystem::path& data_path, const std::filesystem::path& verdicts_path,
                 const std::filesystem::path& out_dir, const std::string& mode_name,
                 const std::string& canned_override, const std::string& template_text,
                 const py::object& generator_spec, std::uint64_t seed) {
    const auto data = ts::corpus::load_dataset(data_path);
    const auto verdicts = ts::classify::load_verdicts(verdicts_path);
    const auto mode = ts::heal::heal_mode_from_string(mode_name);
    const std::string canned =
        canned_override.empty() ? std::string(ts::heal::kCannedResponse) : canned_override;

    ts::heal::ChTemplate tmpl = ts::heal::ChTemplate::default_template();
    if (!template_text.empty()) tmpl.text = template_text;

    std::map<std::string, const ts::classify::ClassificationVerdict*> by_id;
    for (const auto& v : verdicts) by_id[v.pair_id] = &v;

    std::unique_ptr<ts::backends::Generator> generator;
    if (mode == ts::heal::HealMode::ch) {
        if (generator_spec.is_none())
            throw ts::ValidationError("contextual healing needs a generator spec");
        const ordered_json spec = py_to_json(generator_spec);
        if (spec.value("kind", std::string()) == "fixed")
            generator = std::make_unique<ts::backends::FixedResponseGenerator>(
                spec.value("text", std::string()));
        else if (spec.value("kind", std::string()) == "policy")
            generator = std::make_unique<ts::backends::TabularGenerator>(
                ts::backends::TabularPolicy::load(spec.value("policy", std::string())));
        else
            throw ts::ValidationError("unknown healing generator kind");
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
            params.seed = ts::mix_seed(seed, i);
            records.push_back(
                ts::heal::heal_contextual(pair, v, *generator, params, tmpl, 2, canned).record);
        }
    }
    const auto healed = ts::heal::apply_healing(data, verdicts, records);

    std::filesystem::create_directories(out_dir);
    ts::heal::save_records(records, out_dir / "healing.jsonl");
    ts::corpus::save_dataset(healed, out_dir / "healed.jsonl");
    py::dict out;
    out["healed"] = records.size();
    out["total"] = data.pairs.size();
    out["dir"] = out_dir.string();
    return out;
}

py::dict py_finetune(const std::filesystem::path& data_path, const std::filesystem::path& out_dir,
                     double lr, std::size_t epochs, std::size_t batch, std::uint64_t seed) {
    const auto data = ts::corpus::load_dataset(data_path);
    const std::string eos = "</s>";
    ts::backends::TabularPolicy base(vocabulary_from_responses(data, eos), eos);
    ts::backends::SftHyper hyper;
    hyper.learning_rate = lr;
    hyper.epochs = epochs;
    hyper.batch_size = batch;
    hyper.seed = seed;
    const auto outcome = ts::align::finetune_stage(base, data, hyper);

    std::filesystem::create_directories(out_dir);
    outcome.policy.save(out_dir / "policy.json");
    write_loss_csv(out_dir / "sft_trace.csv", outcome.loss_trace);
    py::dict out;
    out["pairs"] = data.pairs.size();
    out["final_loss"] = outcome.loss_trace.empty() ? 0.0 : outcome.loss_trace.back();
    out["policy"] = (out_dir / "policy.json").string();
    return out;
}

py::dict py_align(const std::filesystem::path& policy_path,
                  const std::filesystem::path& preferences_path,
                  const std::filesystem::path& out_dir, double beta, double lr,
                  std::size_t epochs, std::size_t batch, std::uint64_t seed) {
    const auto policy = ts::backends::TabularPolicy::load(policy_path);
    const auto preferences = ts::heal::load_preferences(preferences_path);
    ts::align::DpoConfig config;
    config.beta = beta;
    config.learning_rate = lr;
    config.epochs = epochs;
    config.batch_size = batch;
    config.seed = seed;
    const auto result =
        ts::align::dpo_align(ts::align::PolicyHandle::init(policy), preferences, config);

    std::filesystem::create_directories(out_dir);
    result.policy.save(out_dir / "policy.json");
    ts::align::write_trace_csv(out_dir / "dpo_trace.csv", result.trace);
    py::dict out;
    out["triplets"] = preferences.triplets.size();
    out["final_loss"] = result.trace.empty() ? 0.0 : result.trace.back().loss;
    out["mean_margin"] = result.final_mean_margin;
    out["mean_margin_unscaled"] = result.final_mean_margin_unscaled;
    out["policy"] = (out_dir / "policy.json").string();
    return out;
}

py::object py_evaluate(const std::filesystem::path& policy_path,
                       const std::filesystem::path& toxic_path,
                       const std::filesystem::path& benign_path,
                       const std::filesystem::path& out_dir, const std::string& marker,
                       double temperature, std::size_t max_tokens, std::size_t embedding_dim,
                       const std::optional<double>& no_attack_rtr, std::uint64_t seed) {
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

    const auto report = ts::pipeline::evaluate_policy(policy, eval_toxic, eval_benign,
                                                      evaluation, params, seed, out_dir);
    const ordered_json j = ts::eval::report_to_json(report);
    std::ofstream(out_dir / "report.json", std::ios::binary) << j.dump(2) << '\n';
    std::ofstream(out_dir / "report.txt", std::ios::binary)
        << ts::eval::render_report_text(report);
    return json_to_py(j);
}

py::object py_run(const std::filesystem::path& config_path,
                  const std::optional<std::uint64_t>& seed,
                  const std::optional<std::string>& out_dir) {
    ts::pipeline::RunConfig config = ts::pipeline::RunConfig::load(config_path);
    if (seed) config.seed = *seed;
    if (out_dir && !out_dir->empty()) config.out_dir = *out_dir;
    const auto summary = ts::pipeline::run_pipeline(config);
    return json_to_py(summary_to_json(summary));
}

py::object py_compare(const std::filesystem::path& baseline_dir,
                      const std::filesystem::path& defense_dir) {
    return json_to_py(ts::pipeline::compare_runs(baseline_dir, defense_dir));
}

py::dict py_precision_tune(const std::vector<double>& scores, const std::vector<bool>& gold_toxic,
                           double target_precision) {
    const auto r = ts::classify::precision_tune(scores, gold_toxic, target_precision);
    py::dict out;
    out["feasible"] = r.feasible;
    out["threshold"] = r.threshold;
    out["precision"] = r.precision;
    out["recall"] = r.recall;
    return out;
}

py::dict py_induce_bias(const std::filesystem::path& verdicts_path,
                        const std::filesystem::path& gold_path,
                        const std::string& target_subcategory, double target_recall,
                        std::uint64_t seed, const std::filesystem::path& out_path) {
    const auto verdicts = ts::classify::load_verdicts(verdicts_path);
    const auto gold = ts::corpus::load_dataset(gold_path);
    const auto biased =
        ts::classify::induce_bias(verdicts, gold, target_subcategory, target_recall, seed);
    ts::classify::save_verdicts(biased, out_path);
    std::size_t flipped = 0;
    for (std::size_t i = 0; i < verdicts.size(); ++i)
        flipped += verdicts[i].is_toxic != biased[i].is_toxic ? 1 : 0;
    py::dict out;
    out["flipped"] = flipped;
    out["total"] = biased.size();
    out["path"] = out_path.string();
    return out;
}

double py_perplexity(const ts::backends::TabularPolicy& policy,
                     const std::filesystem::path& dataset_path) {
    return ts::eval::perplexity(policy, ts::corpus::load_dataset(dataset_path));
}

double py_frechet(const std::vector<std::vector<double>>& a,
                  const std::vector<std::vector<double>>& b) {
    return ts::eval::frechet_distance(embedding_set_from_rows(a, "a"),
                                      embedding_set_from_rows(b, "b"));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Defense pipeline against toxicity injection in conversational fine-tuning";

    // The CLI splits user-fixable failures (exit 2) from run failures (exit 3); here
    // the same split is ValueError vs RuntimeError.
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ts::ValidationError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const ts::ParseError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const ts::IntegrityError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const ts::CapacityError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const ts::VocabularyError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const ts::CapabilityError& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        }
    });

    py::class_<ts::backends::TabularPolicy>(m, "TabularPolicy",
                                            "Tiny trainable chatbot stand-in: per-context logit "
                                            "rows over a shared vocabulary")
        .def(py::init<std::vector<std::string>, std::string>(), py::arg("vocabulary"),
             py::arg("eos_token") = "")
        .def_property_readonly("vocabulary", &ts::backends::TabularPolicy::vocabulary)
        .def_property_readonly("eos_token", &ts::backends::TabularPolicy::eos_token)
        .def("checksum", &ts::backends::TabularPolicy::checksum)
        .def("has_token", &ts::backends::TabularPolicy::has_token, py::arg("token"))
        .def("set_logits",
             [](ts::backends::TabularPolicy& p, const std::string& key, std::size_t position,
                const std::vector<double>& values) {
                 auto& row = p.logits_row(key, position);
                 if (values.size() != row.size())
                     throw ts::ValidationError("logit row needs " + std::to_string(row.size()) +
                                               " values");
                 row = values;
             },
             py::arg("key"), py::arg("position"), py::arg("values"))
        .def("get_logits",
             [](const ts::backends::TabularPolicy& p, const std::string& key,
                std::size_t position) -> py::object {
                 const auto* row = p.find_row(key, position);
                 if (!row) return py::none();
                 return py::cast(*row);
             },
             py::arg("key"), py::arg("position"))
        .def("step_probs", &ts::backends::TabularPolicy::step_probs, py::arg("key"),
             py::arg("position"))
        .def("sequence_log_prob", &ts::backends::TabularPolicy::sequence_log_prob, py::arg("key"),
             py::arg("tokens"))
        .def("response_tokens", &ts::backends::TabularPolicy::response_tokens, py::arg("response"))
        .def("greedy_decode", &ts::backends::TabularPolicy::greedy_decode, py::arg("key"),
             py::arg("max_tokens"))
        .def("to_dict",
             [](const ts::backends::TabularPolicy& p) { return json_to_py(p.to_json()); })
        .def_static("from_dict",
                    [](const py::dict& d) {
                        return ts::backends::TabularPolicy::from_json(py_to_json(d));
                    },
                    py::arg("data"))
        .def("save", &ts::backends::TabularPolicy::save, py::arg("path"))
        .def_static("load", &ts::backends::TabularPolicy::load, py::arg("path"))
        .def_static("tokenize", &ts::backends::TabularPolicy::tokenize, py::arg("text"))
        .def_static("detokenize", &ts::backends::TabularPolicy::detokenize, py::arg("tokens"));

    m.def("poison", &py_poison, py::arg("clean"), py::arg("toxic"), py::arg("total"),
          py::arg("rate"), py::arg("seed"), py::arg("out"),
          "Blend a toxic pool into a clean pool and write the poisoned training set");
    m.def("classify", &py_classify, py::arg("data"), py::arg("spec"), py::arg("out"),
          py::arg("seed") = 0, py::arg("parallelism") = 1, py::arg("undetermined_limit") = 1.0,
          "Flag toxic pairs in a dataset and write the verdicts");
    m.def("heal", &py_heal, py::arg("data"), py::arg("verdicts"), py::arg("out"),
          py::arg("mode") = "NH", py::arg("canned") = "", py::arg("template_text") = "",
          py::arg("generator_spec") = py::none(), py::arg("seed") = 0,
          "Replace flagged responses with healing data; writes healing.jsonl and healed.jsonl");
    m.def("finetune", &py_finetune, py::arg("data"), py::arg("out"), py::arg("learning_rate") = 0.5,
          py::arg("epochs") = 1, py::arg("batch_size") = 0, py::arg("seed") = 0,
          "Fine-tune the toy policy on a dataset; writes policy.json and sft_trace.csv");
    m.def("align", &py_align, py::arg("policy"), py::arg("preferences"), py::arg("out"),
          py::arg("beta") = 0.3, py::arg("learning_rate") = 5e-6, py::arg("epochs") = 3,
          py::arg("batch_size") = 4, py::arg("seed") = 0,
          "Preference-align a fine-tuned policy; writes policy.json and dpo_trace.csv");
    m.def("evaluate", &py_evaluate, py::arg("policy"), py::arg("toxic"), py::arg("benign"),
          py::arg("out"), py::arg("marker"), py::arg("temperature") = 0.9,
          py::arg("max_tokens") = 128, py::arg("embedding_dim") = 8,
          py::arg("no_attack_rtr") = py::none(), py::arg("seed") = 0,
          "Measure toxicity and utility of a policy; returns the report as a dict");
    m.def("run", &py_run, py::arg("config"), py::arg("seed") = py::none(),
          py::arg("out") = py::none(),
          "Execute a configured defense end to end; returns the run summary as a dict");
    m.def("compare", &py_compare, py::arg("baseline"), py::arg("defense"),
          "Diff two run directories and report metric deltas plus a success verdict");

    m.def("refusal_p_no", &ts::classify::refusal_p_no, py::arg("ll_yes"), py::arg("ll_no"),
          "Two-way softmax over aggregated log-likelihoods; numerically shift-invariant");
    m.def("precision_tune", &py_precision_tune, py::arg("scores"), py::arg("gold_toxic"),
          py::arg("target_precision"),
          "Smallest score threshold whose toxic-class precision meets the target");
    m.def("induce_bias", &py_induce_bias, py::arg("verdicts"), py::arg("gold"),
          py::arg("subcategory"), py::arg("target_recall"), py::arg("seed"), py::arg("out"),
          "Flip true positives of one subcategory until its recall hits the target");
    m.def("word_modification_ratio", &ts::attacks::word_modification_ratio, py::arg("original"),
          py::arg("perturbed"),
          "Word-level edit distance over the original word count, capped at 1");
    m.def("injected_count", &ts::corpus::injected_count, py::arg("total"), py::arg("rate"),
          "Number of injected pairs for a dataset size and rate (round half up)");
    m.def("perplexity", &py_perplexity, py::arg("policy"), py::arg("dataset"),
          "exp of token-level mean NLL of the dataset's responses under the policy");
    m.def("frechet_distance", &py_frechet, py::arg("a"), py::arg("b"),
          "Frechet distance between Gaussian fits of two embedding clouds");
}
