// ffkv: train a desk-scale model and run the key/value analyses over it.

#include <csignal>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "ffkv/checkpoint.hpp"
#include "ffkv/error.hpp"
#include "ffkv/pipeline.hpp"
#include "ffkv/server.hpp"
#include "ffkv/trainer.hpp"

namespace fs = std::filesystem;
using namespace ffkv;

namespace {

struct Common {
    std::string config;
    std::string checkpoint;
    std::string corpus;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--checkpoint", c.checkpoint, "Checkpoint path");
    app->add_option("--corpus", c.corpus, "Corpus file or directory");
    app->add_option("--out", c.out, "Report directory");
    app->add_option("--seed", c.seed, "Overrides the train or analysis seed");
    app->add_option("--workers", c.workers, "Worker threads (0: hardware concurrency)");
}

PipelineConfig resolve(const Common& c, bool train_seed) {
    PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : load_pipeline_config(c.config);
    if (!c.checkpoint.empty()) cfg.checkpoint = c.checkpoint;
    if (!c.corpus.empty()) cfg.corpus.path = c.corpus;
    if (!c.out.empty()) cfg.out = c.out;
    if (c.seed) (train_seed ? cfg.train.seed : cfg.analysis.seed) = *c.seed;
    if (c.workers) cfg.analysis.workers = *c.workers;
    return cfg;
}

fs::path require_out(const PipelineConfig& cfg) {
    if (cfg.out.empty()) throw InputError("no report directory: pass --out or set \"out\" in the config");
    fs::create_directories(cfg.out);
    return cfg.out;
}

std::vector<KeyTriggers> dumped_keys(const fs::path& out) {
    const fs::path dump = out / kTriggersFile;
    if (!fs::exists(dump)) throw InputError("'" + dump.string() + "' not found; run `ffkv scan` first");
    return read_trigger_dump(dump);
}

int cmd_train(const Common& c, bool resume) {
    PipelineConfig cfg = resolve(c, true);
    if (cfg.checkpoint.empty()) throw InputError("no checkpoint path: pass --checkpoint");
    const PreparedCorpus data = load_corpus(cfg.corpus, cfg.model.max_seq_len);
    cfg.model.vocab_size = data.corpus.vocab().size();
    fmt::print(stderr, "corpus: {} sentences ({} train, {} validation), vocab {}\n", data.corpus.sentences().size(),
               data.split.train.size(), data.split.validation.size(), data.corpus.vocab().size());

    TrainOptions opts;
    opts.checkpoint = cfg.checkpoint;
    opts.loss_log = fs::path(cfg.checkpoint).replace_extension(".loss.csv");
    opts.resume = resume;
    opts.metadata = {{"vocab_fingerprint", vocab_fingerprint(data.corpus.vocab())},
                     {"corpus", cfg.corpus.path.generic_string()}};
    if (!resume) fs::remove(opts.loss_log);
    if (cfg.checkpoint.has_parent_path()) fs::create_directories(cfg.checkpoint.parent_path());

    const TrainResult r = train(cfg.model, cfg.train, data.corpus, data.split, opts);
    fmt::print("steps {}  val loss {:.4f} (ppl {:.2f})  unigram {:.4f} (ppl {:.2f})\n", r.steps, r.val_loss,
               std::exp(r.val_loss), r.unigram_val_loss, std::exp(r.unigram_val_loss));
    fmt::print("checkpoint {}\nloss log {}\n", opts.checkpoint.string(), opts.loss_log.string());
    return 0;
}

int cmd_stage(const Common& c, const std::string& which) {
    const PipelineConfig cfg = resolve(c, false);
    const fs::path out = require_out(cfg);
    const Workspace ws = load_workspace(cfg);
    if (which == "scan") {
        const ScanResult scan = stage_scan(ws, out);
        stage_mutation(ws, scan.keys, out);
        fmt::print("scanned {} prefixes, {} keys -> {}\n", scan.prefixes, scan.keys.size(), out.string());
    } else if (which == "analyze-values") {
        stage_values(ws, dumped_keys(out), out);
    } else if (which == "analyze-aggregate") {
        stage_aggregation(ws, out);
    } else {
        stage_export(ws, dumped_keys(out), out);
    }
    return 0;
}

int cmd_report(const Common& c) {
    const PipelineConfig cfg = resolve(c, false);
    const PipelineResult r = run_pipeline(cfg, [](const std::string& stage, double seconds) {
        fmt::print(stderr, "  {:<12} {:8.2f} s\n", stage, seconds);
    });
    for (const auto& a : r.manifest["artifacts"]) fmt::print("{}\n", (r.out / a["file"].get<std::string>()).string());
    return 0;
}

WorkbenchServer* g_server = nullptr;

int cmd_serve(const Common& c, const std::string& host, int port, const std::string& journal) {
    const PipelineConfig cfg = resolve(c, false);
    ServerOptions o;
    o.report = cfg.out;
    o.checkpoint = c.checkpoint;
    o.journal = journal;
    o.host = host;
    o.port = port;
    WorkbenchServer server(o);
    const int bound = server.bind();
    g_server = &server;
    std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
    std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
    fmt::print("serving {} on http://{}:{}\n", o.report.string(), host, bound);
    std::fflush(stdout);
    server.listen();
    g_server = nullptr;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Feed-forward key-value memory analysis"};
    app.require_subcommand(1);

    Common common;
    bool resume = false;
    auto* train = app.add_subcommand("train", "Train a model on a corpus");
    add_common(train, common);
    train->add_flag("--resume", resume, "Continue from the checkpoint if present");

    std::vector<std::pair<std::string, std::string>> stages = {
        {"scan", "Top-t trigger scan of every key, plus the mutation analysis"},
        {"analyze-values", "Value-distribution statistics from a trigger dump"},
        {"analyze-aggregate", "Memory composition and residual statistics"},
        {"export-tasks", "Annotation task file for sampled keys"},
    };
    std::vector<CLI::App*> stage_apps;
    for (const auto& [name, help] : stages) {
        stage_apps.push_back(app.add_subcommand(name, help));
        add_common(stage_apps.back(), common);
    }

    auto* report = app.add_subcommand("report", "Run every analysis stage and write the manifest");
    add_common(report, common);

    std::string host = "127.0.0.1";
    int port = 8080;
    std::string journal;
    auto* serve = app.add_subcommand("serve", "Serve a report directory over HTTP");
    add_common(serve, common);
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--port", port, "Port (0 picks a free one)");
    serve->add_option("--journal", journal, "Annotation journal (default <out>/annotations.jsonl)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(common, resume);
        for (std::size_t i = 0; i < stages.size(); ++i) {
            if (*stage_apps[i]) return cmd_stage(common, stages[i].first);
        }
        if (*report) return cmd_report(common);
        if (*serve) return cmd_serve(common, host, port, journal);
    } catch (const StageError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 3;
    } catch (const InputError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return 0;
}
