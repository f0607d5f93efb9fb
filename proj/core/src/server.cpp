#include "ffkv/server.hpp"

#include <atomic>
#include <cstdlib>
#include <map>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "ffkv/annotation.hpp"
#include "ffkv/checkpoint.hpp"
#include "ffkv/error.hpp"
#include "ffkv/io.hpp"
#include "ffkv/pipeline.hpp"
#include "ffkv/values.hpp"

namespace ffkv {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json csv_to_json(const std::string& id, const std::string& file, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    auto split = [](const std::string& l) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(l);
        while (std::getline(ls, cell, ',')) {
            cells.push_back(cell);
        }
        return cells;
    };
    json out = {{"figure", id}, {"file", file}, {"columns", json::array()}, {"rows", json::array()}};
    if (!std::getline(in, line)) {
        return out;
    }
    out["columns"] = split(line);
    while (std::getline(in, line)) {
        json row = json::array();
        for (const auto& c : split(line)) {
            if (c == "nan") {
                row.push_back(nullptr);
                continue;
            }
            char* end = nullptr;
            const double v = std::strtod(c.c_str(), &end);
            if (!c.empty() && end == c.c_str() + c.size()) {
                row.push_back(v);
            } else {
                row.push_back(c);
            }
        }
        out["rows"].push_back(std::move(row));
    }
    return out;
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message,
                const std::vector<std::string>& offending = {}) {
    json body = {{"error", message}};
    if (!offending.empty()) {
        body["offending"] = offending;
    }
    send_json(res, status, body);
}

MemoryCellRef key_from(const httplib::Request& req) {
    return {std::stoul(req.matches[1].str()), std::stoul(req.matches[2].str())};
}

}  // namespace

struct WorkbenchServer::Impl {
    ServerOptions options;
    json manifest;
    std::optional<Model> model;
    Vocab vocab;
    std::map<MemoryCellRef, std::string> trigger_lines;
    std::map<MemoryCellRef, std::string> task_records;
    std::map<std::string, std::string> stats;  // figure id -> response body
    std::unique_ptr<AnnotationStore> store;
    httplib::Server http;
    int port = -1;

    void load();
    void routes();
    bool key_known(const MemoryCellRef& k) const {
        const auto& cfg = model->config();
        return k.layer >= 1 && k.layer <= cfg.n_layers && k.cell < cfg.d_ff;
    }
};

void WorkbenchServer::Impl::load() {
    const fs::path dir = options.report;
    if (!fs::is_directory(dir)) {
        throw InputError("report directory '" + dir.string() + "' does not exist");
    }
    manifest = json::parse(read_file(dir / kManifestFile));
    fs::path ck = options.checkpoint;
    if (ck.empty()) {
        ck = manifest.at("config").at("checkpoint").get<std::string>();
    }
    Checkpoint c = load_checkpoint(ck);
    model.emplace(c.config, std::move(c.weights));
    vocab = Vocab::load_tsv(dir / kVocabFile);
    if (vocab.size() != model->config().vocab_size) {
        throw InputError("report vocabulary does not match the checkpoint");
    }

    std::istringstream triggers(read_file(dir / kTriggersFile));
    std::string line;
    while (std::getline(triggers, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        trigger_lines[{j.at("layer").get<std::size_t>(), j.at("cell").get<std::size_t>()}] = line;
    }

    const fs::path tasks = dir / artifact_file("tasks");
    if (fs::exists(tasks)) {
        for (const auto& t : json::parse(read_file(tasks))) {
            task_records[{t.at("layer").get<std::size_t>(), t.at("cell").get<std::size_t>()}] = t.dump();
        }
    }

    for (const auto* list : {&figure_artifacts(), &support_artifacts()}) {
        for (const auto& a : *list) {
            const fs::path p = dir / a.file;
            if (a.id == "triggers" || a.id == "vocab" || a.id == "tasks" || !fs::exists(p)) {
                continue;
            }
            const std::string text = read_file(p);
            if (p.extension() == ".csv") {
                stats[a.id] = csv_to_json(a.id, a.file, text).dump();
            } else {
                stats[a.id] = json{{"figure", a.id}, {"file", a.file}, {"data", json::parse(text)}}.dump();
            }
        }
    }

    fs::path journal = options.journal.empty() ? dir / "annotations.jsonl" : options.journal;
    store = std::make_unique<AnnotationStore>(journal);
}

void WorkbenchServer::Impl::routes() {
    http.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    http.Get("/api/layers", [this](const httplib::Request&, httplib::Response& res) {
        const auto& cfg = model->config();
        json layers = json::array();
        for (std::size_t l = 1; l <= cfg.n_layers; ++l) {
            json tasks = json::array();
            for (const auto& [k, rec] : task_records) {
                if (k.layer == l) {
                    tasks.push_back(k.cell);
                }
            }
            std::size_t annotated = 0;
            for (const auto& s : store->all()) {
                annotated += s.set.key.layer == l ? 1 : 0;
            }
            layers.push_back({{"layer", l}, {"cells", cfg.d_ff}, {"task_keys", tasks}, {"annotated", annotated}});
        }
        send_json(res, 200, {{"n_layers", cfg.n_layers}, {"d_ff", cfg.d_ff}, {"layers", layers}});
    });

    http.Get(R"(/api/keys/(\d+)/(\d+)/triggers)", [this](const httplib::Request& req, httplib::Response& res) {
        const auto it = trigger_lines.find(key_from(req));
        if (it == trigger_lines.end()) {
            return send_error(res, 404, "key was not scanned");
        }
        res.status = 200;
        res.set_content(it->second, "application/json");
    });

    http.Get(R"(/api/keys/(\d+)/(\d+)/task)", [this](const httplib::Request& req, httplib::Response& res) {
        const auto it = task_records.find(key_from(req));
        if (it == task_records.end()) {
            return send_error(res, 404, "no annotation task for this key");
        }
        res.status = 200;
        res.set_content(it->second, "application/json");
    });

    http.Get(R"(/api/keys/(\d+)/(\d+)/value-top)", [this](const httplib::Request& req, httplib::Response& res) {
        const MemoryCellRef key = key_from(req);
        if (!key_known(key)) {
            return send_error(res, 404, "memory cell out of range");
        }
        std::size_t k = 10;
        if (req.has_param("k")) {
            const std::string s = req.get_param_value("k");
            char* end = nullptr;
            const long v = std::strtol(s.c_str(), &end, 10);
            if (s.empty() || end != s.c_str() + s.size() || v < 1) {
                return send_error(res, 400, "k must be a positive integer");
            }
            k = std::min<std::size_t>(static_cast<std::size_t>(v), model->config().vocab_size);
        }
        const VocabDistribution d = value_distribution(*model, key);
        json tokens = json::array();
        for (std::size_t r = 0; r < k; ++r) {
            const TokenId t = d.order()[r];
            tokens.push_back({{"rank", r}, {"token_id", t}, {"token", vocab.token(t)}, {"prob", d.probs()[t]}});
        }
        send_json(res, 200,
                  {{"layer", key.layer}, {"cell", key.cell}, {"k", k}, {"max_prob", d.max_prob()}, {"tokens", tokens}});
    });

    http.Get("/api/stats/coverage", [this](const httplib::Request& req, httplib::Response& res) {
        std::vector<AnnotationSet> sets;
        std::optional<std::size_t> layer, cell;
        try {
            if (req.has_param("layer")) {
                layer = std::stoul(req.get_param_value("layer"));
            }
            if (req.has_param("cell")) {
                cell = std::stoul(req.get_param_value("cell"));
            }
        } catch (const std::exception&) {
            return send_error(res, 400, "layer and cell must be non-negative integers");
        }
        for (const auto& s : store->all()) {
            if ((layer && s.set.key.layer != *layer) || (cell && s.set.key.cell != *cell)) {
                continue;
            }
            sets.push_back(s.set);
        }
        json body = to_json(coverage_breakdown(sets));
        body["annotations"] = sets.size();
        send_json(res, 200, body);
    });

    http.Get(R"(/api/stats/([A-Za-z0-9_]+))", [this](const httplib::Request& req, httplib::Response& res) {
        const auto it = stats.find(req.matches[1].str());
        if (it == stats.end()) {
            return send_error(res, 404, "unknown figure '" + req.matches[1].str() + "'");
        }
        res.status = 200;
        res.set_content(it->second, "application/json");
    });

    http.Get(R"(/api/annotations/(\d+)/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
        const auto s = store->get(key_from(req));
        if (!s) {
            return send_error(res, 404, "no annotation for this key");
        }
        send_json(res, 200, {{"revision", s->revision}, {"annotation", to_json(s->set)}});
    });

    http.Post(R"(/api/annotations/(\d+)/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
        const MemoryCellRef key = key_from(req);
        if (!key_known(key)) {
            return send_error(res, 404, "memory cell out of range");
        }
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::parse_error& e) {
            return send_error(res, 400, std::string("body is not valid JSON: ") + e.what());
        }
        if (!body.is_object()) {
            return send_error(res, 400, "body must be a JSON object");
        }
        if ((body.contains("layer") && body["layer"] != key.layer) ||
            (body.contains("cell") && body["cell"] != key.cell)) {
            return send_error(res, 400, "body key does not match the URL");
        }
        body["layer"] = key.layer;
        body["cell"] = key.cell;
        if (!body.contains("num_prefixes")) {
            const auto t = task_records.find(key);
            if (t != task_records.end()) {
                body["num_prefixes"] = json::parse(t->second).at("prefixes").size();
            }
        }
        try {
            const StoredAnnotation s = store->put(annotation_from_json(body));
            send_json(res, 200, {{"revision", s.revision}, {"annotation", to_json(s.set)}});
        } catch (const ValidationError& e) {
            send_error(res, 422, e.what(), e.offending());
        }
    });

    http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        }
    });
}

WorkbenchServer::WorkbenchServer(ServerOptions options) : impl_(std::make_unique<Impl>()) {
    impl_->options = std::move(options);
    impl_->load();
    impl_->routes();
}

WorkbenchServer::~WorkbenchServer() { stop(); }

int WorkbenchServer::bind() {
    if (impl_->options.port == 0) {
        impl_->port = impl_->http.bind_to_any_port(impl_->options.host);
        if (impl_->port < 0) {
            throw std::runtime_error("could not bind any port on " + impl_->options.host);
        }
    } else {
        if (!impl_->http.bind_to_port(impl_->options.host, impl_->options.port)) {
            throw std::runtime_error("port " + std::to_string(impl_->options.port) + " on " + impl_->options.host +
                                     " is already in use");
        }
        impl_->port = impl_->options.port;
    }
    return impl_->port;
}

void WorkbenchServer::listen() { impl_->http.listen_after_bind(); }

void WorkbenchServer::stop() {
    if (impl_) {
        impl_->http.stop();
    }
}

bool WorkbenchServer::running() const { return impl_->http.is_running(); }

}  // namespace ffkv
