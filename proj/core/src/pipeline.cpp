#include "ffkv/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <limits>
#include <map>
#include <optional>

#include "ffkv/aggregation.hpp"
#include "ffkv/annotation.hpp"
#include "ffkv/error.hpp"
#include "ffkv/io.hpp"
#include "ffkv/values.hpp"

namespace ffkv {

namespace fs = std::filesystem;

nlohmann::json to_json(const PipelineConfig& c) {
    const auto& a = c.analysis;
    return {{"model", config_to_json(c.model)},
            {"train", train_config_to_json(c.train)},
            {"corpus",
             {{"path", c.corpus.path.generic_string()},
              {"max_vocab", c.corpus.max_vocab},
              {"val_fraction", c.corpus.val_fraction}}},
            {"analysis",
             {{"t", a.t},
              {"task_t", a.task_t},
              {"task_keys_per_layer", a.task_keys_per_layer},
              {"mutation_keys_per_layer", a.mutation_keys_per_layer},
              {"sample_size", a.sample_size},
              {"confidence_bins", a.confidence_bins},
              {"predictive_values", a.predictive_values},
              {"stop_words", a.stop_words},
              {"seed", a.seed},
              {"workers", a.workers}}},
            {"checkpoint", c.checkpoint.generic_string()},
            {"out", c.out.generic_string()}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    try {
        if (j.contains("model")) {
            c.model = config_from_json(j.at("model"));
        }
        if (j.contains("train")) {
            c.train = train_config_from_json(j.at("train"));
        }
        if (j.contains("corpus")) {
            const auto& cj = j.at("corpus");
            c.corpus.path = cj.value("path", std::string{});
            c.corpus.max_vocab = cj.value("max_vocab", c.corpus.max_vocab);
            c.corpus.val_fraction = cj.value("val_fraction", c.corpus.val_fraction);
        }
        if (j.contains("analysis")) {
            const auto& aj = j.at("analysis");
            auto& a = c.analysis;
            a.t = aj.value("t", a.t);
            a.task_t = aj.value("task_t", a.task_t);
            a.task_keys_per_layer = aj.value("task_keys_per_layer", a.task_keys_per_layer);
            a.mutation_keys_per_layer = aj.value("mutation_keys_per_layer", a.mutation_keys_per_layer);
            a.sample_size = aj.value("sample_size", a.sample_size);
            a.confidence_bins = aj.value("confidence_bins", a.confidence_bins);
            a.predictive_values = aj.value("predictive_values", a.predictive_values);
            a.stop_words = aj.value("stop_words", a.stop_words);
            a.seed = aj.value("seed", a.seed);
            a.workers = aj.value("workers", a.workers);
        }
        c.checkpoint = j.value("checkpoint", std::string{});
        c.out = j.value("out", std::string{});
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("invalid pipeline config: ") + e.what());
    }
    return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
    try {
        return pipeline_config_from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw InputError("config " + path.string() + " is not valid JSON: " + e.what());
    }
}

std::string vocab_fingerprint(const Vocab& vocab) {
    std::string all;
    for (TokenId i = 0; i < vocab.size(); ++i) {
        all += vocab.token(i);
        all += '\n';
    }
    return sha256_hex(all);
}

PreparedCorpus load_corpus(const CorpusConfig& config, std::size_t max_len) {
    if (config.path.empty()) {
        throw InputError("no corpus path configured");
    }
    return prepare_corpus(load_documents(config.path), config.max_vocab, max_len, config.val_fraction);
}

Workspace load_workspace(const PipelineConfig& config) {
    if (config.checkpoint.empty()) {
        throw InputError("no checkpoint path configured");
    }
    if (!fs::exists(config.checkpoint)) {
        throw InputError("checkpoint '" + config.checkpoint.string() + "' does not exist");
    }
    Checkpoint ck = load_checkpoint(config.checkpoint);
    PreparedCorpus data = load_corpus(config.corpus, ck.config.max_seq_len);
    if (data.corpus.vocab().size() != ck.config.vocab_size) {
        throw InputError("corpus vocabulary has " + std::to_string(data.corpus.vocab().size()) +
                         " entries but the checkpoint expects " + std::to_string(ck.config.vocab_size));
    }
    if (ck.metadata.contains("vocab_fingerprint") &&
        ck.metadata["vocab_fingerprint"].get<std::string>() != vocab_fingerprint(data.corpus.vocab())) {
        throw InputError("corpus vocabulary differs from the one the checkpoint was trained with");
    }
    Model model(ck.config, std::move(ck.weights));
    return Workspace{config, std::move(model), std::move(ck.metadata), std::move(data)};
}

const std::vector<Artifact>& figure_artifacts() {
    static const std::vector<Artifact> a = {
        {"fig3", "fig3_mutation.csv"},
        {"fig4", "fig4_agreement.csv"},
        {"fig5", "fig5_rank_histogram.csv"},
        {"fig6", "fig6_confidence.csv"},
        {"fig7", "fig7_active_memories.csv"},
        {"fig8", "fig8_compositionality.csv"},
        {"fig9", "fig9_residual_match.csv"},
        {"fig10", "fig10_residual_prob.csv"},
        {"fig11", "fig11_prediction_cases.csv"},
        {"table3", "table3_predictive_values.json"},
        {"tasks", "annotation_tasks.json"},
    };
    return a;
}

const std::vector<Artifact>& support_artifacts() {
    static const std::vector<Artifact> a = {
        {"triggers", kTriggersFile},
        {"vocab", kVocabFile},
        {"fig9_ln", "fig9_residual_match_ln.csv"},
        {"fig10_ln", "fig10_residual_prob_ln.csv"},
        {"agreement_profile", "agreement_profile.json"},
        {"composition_candidates", "composition_candidates.json"},
    };
    return a;
}

std::string artifact_file(const std::string& id) {
    for (const auto* list : {&figure_artifacts(), &support_artifacts()}) {
        for (const auto& a : *list) {
            if (a.id == id) {
                return a.file;
            }
        }
    }
    throw InputError("unknown artifact '" + id + "'");
}

namespace {

void write_artifact(const fs::path& out, const std::string& id, std::string_view content) {
    write_file_atomic(out / artifact_file(id), content);
}

void write_json_artifact(const fs::path& out, const std::string& id, const nlohmann::json& j) {
    write_artifact(out, id, j.dump(2) + "\n");
}

const KeyTriggers& find_key(const std::vector<KeyTriggers>& keys, const MemoryCellRef& key) {
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const KeyTriggers& k) { return k.key == key; });
    if (it == keys.end()) {
        throw InputError("key L" + std::to_string(key.layer) + "/" + std::to_string(key.cell) +
                         " is missing from the trigger scan");
    }
    return *it;
}

}  // namespace

ScanResult stage_scan(const Workspace& ws, const fs::path& out) {
    const auto& a = ws.config.analysis;
    const auto keys = all_keys(ws.model.config());
    ScanResult scan = scan_triggers(ws.model, ws.data.corpus, ws.data.split.train, keys,
                                    {std::max(a.t, a.task_t), a.workers});
    fs::create_directories(out);
    write_trigger_dump(out / kTriggersFile, scan, ws.data.corpus);
    ws.data.corpus.vocab().save_tsv(out / kVocabFile);
    return scan;
}

void stage_mutation(const Workspace& ws, const std::vector<KeyTriggers>& keys, const fs::path& out) {
    const auto& a = ws.config.analysis;
    const auto& cfg = ws.model.config();
    const auto sampled = sample_keys(cfg, std::min(a.mutation_keys_per_layer, cfg.d_ff), a.seed);
    struct Acc {
        double sum = 0.0;
        std::size_t count = 0;
    };
    std::map<std::pair<std::size_t, int>, Acc> acc;
    for (const auto& key : sampled) {
        KeyTriggers top = find_key(keys, key);
        if (top.triggers.size() > a.t) {
            top.triggers.resize(a.t);
        }
        for (auto v : kMutationVariants) {
            const MutationReport r = mutate_and_compare(ws.model, ws.data.corpus, top, v, a.seed);
            auto& x = acc[{key.layer, static_cast<int>(v)}];
            for (const auto& c : r.changes) {
                x.sum += c.relative_change;
                ++x.count;
            }
        }
    }
    std::string csv = "layer,variant,mean_relative_change,count\n";
    for (std::size_t layer = 1; layer <= cfg.n_layers; ++layer) {
        for (auto v : kMutationVariants) {
            const Acc& x = acc[{layer, static_cast<int>(v)}];
            const double mean = x.count == 0 ? std::numeric_limits<double>::quiet_NaN()
                                             : x.sum / static_cast<double>(x.count);
            csv += std::to_string(layer) + "," + to_string(v) + "," + csv_number(mean) + "," +
                   std::to_string(x.count) + "\n";
        }
    }
    write_artifact(out, "fig3", csv);
}

void stage_values(const Workspace& ws, const std::vector<KeyTriggers>& keys, const fs::path& out) {
    const auto& a = ws.config.analysis;
    const auto& cfg = ws.model.config();
    const auto stats = cell_value_stats(ws.model, keys);
    std::vector<LayerAgreement> agreement;
    std::vector<RankHistogram> ranks;
    for (std::size_t layer = 1; layer <= cfg.n_layers; ++layer) {
        agreement.push_back(agreement_rate(cfg, stats, layer));
        ranks.push_back(next_token_rank_distribution(cfg, stats, layer));
    }
    write_artifact(out, "fig4", agreement_csv(agreement));
    write_artifact(out, "fig5", rank_histogram_csv(ranks));
    write_artifact(out, "fig6", confidence_csv(agreement_by_confidence(stats, a.confidence_bins)));
    const auto predictive = detect_predictive_values(stats, keys, a.predictive_values, a.t);
    write_json_artifact(out, "table3", predictive_values_json(predictive, ws.data.corpus.vocab(), a.t));
}

void stage_aggregation(const Workspace& ws, const fs::path& out) {
    const auto& a = ws.config.analysis;
    const auto& cfg = ws.model.config();
    const auto& corpus = ws.data.corpus;
    const auto& val = ws.data.split.validation;
    std::size_t population = 0;
    for (auto s : val) {
        population += corpus.sentences()[s].tokens.size();
    }
    const std::size_t size = a.sample_size != 0 ? std::min(a.sample_size, population) : default_sample_size(population);
    const EvalSample sample = draw_eval_sample(corpus, val, size, a.seed);
    const auto obs = observe_sample(ws.model, corpus, sample, {a.workers});

    std::vector<FractionSummary> active;
    std::vector<CompositionalityStats> comp;
    for (std::size_t layer = 1; layer <= cfg.n_layers; ++layer) {
        active.push_back(active_memory_fraction(obs, layer, cfg.d_ff));
        comp.push_back(compositional_fraction(obs, layer));
    }
    write_artifact(out, "fig7", active_fraction_csv(active));
    write_artifact(out, "fig8", compositional_csv(comp));
    const auto raw = residual_stats(obs, false);
    const auto ln = residual_stats(obs, true);
    write_artifact(out, "fig9", residual_match_csv(raw));
    write_artifact(out, "fig9_ln", residual_match_csv(ln));
    write_artifact(out, "fig10", residual_prob_csv(raw));
    write_artifact(out, "fig10_ln", residual_prob_csv(ln));
    write_artifact(out, "fig11", prediction_case_csv(prediction_case_counts(obs)));
    auto profile = agreement_profile_json(agreement_case_profile(obs, stop_words(corpus.vocab(), a.stop_words)));
    profile["sample_size"] = sample.prefixes.size();
    profile["population"] = sample.population;
    write_json_artifact(out, "agreement_profile", profile);
    write_json_artifact(out, "composition_candidates", composition_candidates_json(obs, corpus));
}

void stage_export(const Workspace& ws, const std::vector<KeyTriggers>& keys, const fs::path& out) {
    const auto& a = ws.config.analysis;
    const auto& cfg = ws.model.config();
    const auto sampled = sample_keys(cfg, std::min(a.task_keys_per_layer, cfg.d_ff), a.seed + 1);
    std::vector<KeyTriggers> chosen;
    for (const auto& key : sampled) {
        chosen.push_back(find_key(keys, key));
    }
    const auto tasks = export_annotation_tasks(chosen, ws.data.corpus, a.task_t);
    write_json_artifact(out, "tasks", tasks_to_json(tasks));
}

std::string hash_path(const fs::path& path) {
    if (!fs::exists(path)) {
        throw InputError("cannot hash missing path '" + path.string() + "'");
    }
    if (!fs::is_directory(path)) {
        return sha256_file(path);
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path)) {
        if (e.is_regular_file()) {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) {
        all += fs::relative(f, path).generic_string() + "\t" + sha256_file(f) + "\n";
    }
    return sha256_hex(all);
}

namespace {

// The parts of the config that change results (paths and worker count do not).
nlohmann::json hashed_config(const PipelineConfig& c) {
    nlohmann::json j = to_json(c);
    j.erase("checkpoint");
    j.erase("out");
    j["corpus"].erase("path");
    j["analysis"].erase("workers");
    return j;
}

}  // namespace

std::string input_hash(const PipelineConfig& config, const std::string& checkpoint_sha,
                       const std::string& corpus_sha) {
    return sha256_hex(hashed_config(config).dump() + "\n" + checkpoint_sha + "\n" + corpus_sha + "\n");
}

PipelineResult run_pipeline(const PipelineConfig& config,
                            const std::function<void(const std::string&, double)>& on_stage) {
    if (config.out.empty()) {
        throw InputError("no report directory configured");
    }
    const fs::path out = config.out;
    fs::create_directories(out);
    fs::remove(out / kManifestFile);

    nlohmann::json manifest = {{"config", to_json(config)}, {"seeds", {{"analysis", config.analysis.seed}}}};
    std::string stage = "load";
    auto list_artifacts = [&](bool stale) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto* list : {&figure_artifacts(), &support_artifacts()}) {
            for (const auto& a : *list) {
                const fs::path p = out / a.file;
                if (!fs::exists(p)) {
                    continue;
                }
                arr.push_back({{"id", a.id},
                               {"file", a.file},
                               {"sha256", sha256_file(p)},
                               {"bytes", fs::file_size(p)},
                               {"figure", list == &figure_artifacts()},
                               {"stale", stale}});
            }
        }
        return arr;
    };
    auto timed = [&](const std::string& name, auto&& fn) {
        stage = name;
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        if (on_stage) {
            on_stage(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        }
    };

    try {
        std::optional<Workspace> ws;
        timed("load", [&] {
            ws.emplace(load_workspace(config));
            const std::string ck_sha = sha256_file(config.checkpoint);
            const std::string corpus_sha = hash_path(config.corpus.path);
            manifest["inputs"] = {{"checkpoint_sha256", ck_sha}, {"corpus_sha256", corpus_sha}};
            manifest["config_hash"] = sha256_hex(hashed_config(config).dump());
            manifest["input_hash"] = input_hash(config, ck_sha, corpus_sha);
            manifest["seeds"]["train"] = ws->metadata.contains("train_config")
                                             ? ws->metadata["train_config"].value("seed", config.train.seed)
                                             : config.train.seed;
        });
        std::vector<KeyTriggers> keys;
        timed("scan", [&] { keys = stage_scan(*ws, out).keys; });
        timed("mutation", [&] { stage_mutation(*ws, keys, out); });
        timed("values", [&] { stage_values(*ws, keys, out); });
        timed("aggregation", [&] { stage_aggregation(*ws, out); });
        timed("export", [&] { stage_export(*ws, keys, out); });
    } catch (const std::exception& e) {
        manifest["status"] = "failed";
        manifest["failed_stage"] = stage;
        manifest["error"] = e.what();
        manifest["artifacts"] = list_artifacts(true);
        write_file_atomic(out / kManifestFile, manifest.dump(2) + "\n");
        throw StageError(stage, e.what());
    }
    manifest["status"] = "complete";
    manifest["artifacts"] = list_artifacts(false);
    write_file_atomic(out / kManifestFile, manifest.dump(2) + "\n");
    return {out, manifest};
}

}  // namespace ffkv
