#include "ffkv/annotation.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>

#include "ffkv/error.hpp"

namespace ffkv {

std::string to_string(PatternClass c) { return c == PatternClass::shallow ? "shallow" : "semantic"; }

PatternClass pattern_class_from_string(const std::string& s) {
    if (s == "shallow") {
        return PatternClass::shallow;
    }
    if (s == "semantic") {
        return PatternClass::semantic;
    }
    throw ValidationError("pattern class must be 'shallow' or 'semantic', got '" + s + "'", {s});
}

void AnnotationSet::validate() const {
    std::vector<std::string> bad;
    if (key.layer < 1) {
        throw ValidationError("annotation layer must be >= 1");
    }
    std::set<std::string> ids;
    for (const auto& p : patterns) {
        if (p.pattern_id.empty()) {
            bad.push_back("");
        } else if (!ids.insert(p.pattern_id).second) {
            bad.push_back(p.pattern_id);
        }
    }
    if (!bad.empty()) {
        throw ValidationError("empty or duplicate pattern ids", bad);
    }
    std::vector<std::string> bad_ranks;
    for (const auto& [rank, assigned] : assignments) {
        if (rank >= num_prefixes) {
            bad_ranks.push_back(std::to_string(rank));
        }
        std::set<std::string> seen;
        for (const auto& id : assigned) {
            if (ids.count(id) == 0 || !seen.insert(id).second) {
                bad.push_back(id);
            }
        }
    }
    if (!bad_ranks.empty()) {
        throw ValidationError("assignment to prefix ranks outside [0, " + std::to_string(num_prefixes) + ")",
                              bad_ranks);
    }
    if (!bad.empty()) {
        std::sort(bad.begin(), bad.end());
        bad.erase(std::unique(bad.begin(), bad.end()), bad.end());
        throw ValidationError("assignments reference unknown or repeated pattern ids", bad);
    }
}

std::map<std::string, std::size_t> AnnotationSet::pattern_support() const {
    std::map<std::string, std::size_t> support;
    for (const auto& p : patterns) {
        support[p.pattern_id] = 0;
    }
    for (const auto& [rank, assigned] : assignments) {
        for (const auto& id : assigned) {
            ++support[id];
        }
    }
    return support;
}

bool AnnotationSet::grounded(const std::string& pattern_id) const {
    const auto support = pattern_support();
    const auto it = support.find(pattern_id);
    return it != support.end() && it->second >= kGroundingThreshold;
}

nlohmann::json to_json(const AnnotationSet& a) {
    nlohmann::json patterns = nlohmann::json::array();
    for (const auto& p : a.patterns) {
        patterns.push_back(
            {{"pattern_id", p.pattern_id}, {"description", p.description}, {"class", to_string(p.pattern_class)}});
    }
    nlohmann::json assignments = nlohmann::json::object();
    for (const auto& [rank, ids] : a.assignments) {
        assignments[std::to_string(rank)] = ids;
    }
    return {{"layer", a.key.layer},       {"cell", a.key.cell},
            {"annotator", a.annotator},   {"timestamp", a.timestamp},
            {"num_prefixes", a.num_prefixes}, {"patterns", std::move(patterns)},
            {"assignments", std::move(assignments)}};
}

AnnotationSet annotation_from_json(const nlohmann::json& j) {
    AnnotationSet a;
    try {
        if (!j.is_object()) {
            throw ValidationError("annotation must be a JSON object");
        }
        a.key = {j.at("layer").get<std::size_t>(), j.at("cell").get<std::size_t>()};
        a.annotator = j.value("annotator", std::string{});
        a.timestamp = j.value("timestamp", std::string{});
        a.num_prefixes = j.value("num_prefixes", std::size_t{25});
        for (const auto& p : j.value("patterns", nlohmann::json::array())) {
            a.patterns.push_back({p.at("pattern_id").get<std::string>(), p.value("description", std::string{}),
                                  pattern_class_from_string(p.at("class").get<std::string>())});
        }
        const nlohmann::json assignments = j.value("assignments", nlohmann::json::object());
        for (const auto& [rank, ids] : assignments.items()) {
            std::size_t pos = 0;
            std::size_t r = 0;
            try {
                r = std::stoul(rank, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != rank.size() || rank.empty()) {
                throw ValidationError("assignment key '" + rank + "' is not a prefix rank", {rank});
            }
            a.assignments[r] = ids.get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed annotation: ") + e.what());
    }
    a.validate();
    return a;
}

double LayerCoverage::fraction(std::size_t count) const {
    const std::size_t n = total();
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(count) / static_cast<double>(n);
}

CoverageBreakdown coverage_breakdown(std::span<const AnnotationSet> annotations) {
    std::map<std::size_t, LayerCoverage> layers;
    for (const auto& a : annotations) {
        a.validate();
        const auto support = a.pattern_support();
        std::map<std::string, PatternClass> grounded;
        for (const auto& p : a.patterns) {
            if (support.at(p.pattern_id) >= kGroundingThreshold) {
                grounded[p.pattern_id] = p.pattern_class;
            }
        }
        auto& lc = layers[a.key.layer];
        lc.layer = a.key.layer;
        for (std::size_t rank = 0; rank < a.num_prefixes; ++rank) {
            bool shallow = false, semantic = false;
            const auto it = a.assignments.find(rank);
            if (it != a.assignments.end()) {
                for (const auto& id : it->second) {
                    const auto g = grounded.find(id);
                    if (g == grounded.end()) {
                        continue;
                    }
                    (g->second == PatternClass::shallow ? shallow : semantic) = true;
                }
            }
            if (shallow && semantic) {
                ++lc.both;
            } else if (shallow) {
                ++lc.shallow_only;
            } else if (semantic) {
                ++lc.semantic_only;
            } else {
                ++lc.not_covered;
            }
        }
    }
    CoverageBreakdown out;
    for (auto& [layer, lc] : layers) {
        out.layers.push_back(lc);
    }
    return out;
}

nlohmann::json to_json(const CoverageBreakdown& c) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : c.layers) {
        arr.push_back({{"layer", l.layer},
                       {"prefixes", l.total()},
                       {"counts",
                        {{"shallow_only", l.shallow_only},
                         {"semantic_only", l.semantic_only},
                         {"both", l.both},
                         {"not_covered", l.not_covered}}},
                       {"fractions",
                        {{"shallow_only", l.fraction(l.shallow_only)},
                         {"semantic_only", l.fraction(l.semantic_only)},
                         {"both", l.fraction(l.both)},
                         {"not_covered", l.fraction(l.not_covered)}}}});
    }
    return {{"layers", std::move(arr)}};
}

std::vector<AnnotationTask> export_annotation_tasks(std::span<const KeyTriggers> keys, const Corpus& corpus,
                                                    std::size_t t) {
    if (t < 1) {
        throw InputError("annotation tasks need t >= 1");
    }
    std::vector<AnnotationTask> tasks;
    for (const auto& k : keys) {
        AnnotationTask task;
        task.key = k.key;
        task.t = t;
        for (const auto& ex : k.triggers) {
            if (task.prefixes.size() == t) {
                break;
            }
            if (!(ex.coefficient > 0.0f)) {
                break;
            }
            task.prefixes.push_back({ex.rank, ex.prefix.sentence_id, ex.prefix.end_index,
                                     corpus.prefix_text(ex.prefix), ex.coefficient, ex.prefix.next_token,
                                     corpus.vocab().token(ex.prefix.next_token)});
        }
        task.truncated = task.prefixes.size() < t;
        task.no_triggers = task.prefixes.empty();
        task.scaffold.key = k.key;
        task.scaffold.num_prefixes = task.prefixes.size();
        tasks.push_back(std::move(task));
    }
    return tasks;
}

nlohmann::json tasks_to_json(std::span<const AnnotationTask> tasks) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& task : tasks) {
        nlohmann::json prefixes = nlohmann::json::array();
        for (const auto& p : task.prefixes) {
            prefixes.push_back({{"rank", p.rank},
                                {"sentence_id", p.sentence_id},
                                {"end_index", p.end_index},
                                {"text", p.text},
                                {"coefficient", p.coefficient},
                                {"next_token_id", p.next_token_id},
                                {"next_token", p.next_token}});
        }
        nlohmann::json scaffold = to_json(task.scaffold);
        arr.push_back({{"layer", task.key.layer},
                       {"cell", task.key.cell},
                       {"t", task.t},
                       {"truncated", task.truncated},
                       {"no_triggers", task.no_triggers},
                       {"prefixes", std::move(prefixes)},
                       {"patterns", scaffold["patterns"]},
                       {"assignments", scaffold["assignments"]},
                       {"annotator", task.scaffold.annotator},
                       {"timestamp", task.scaffold.timestamp}});
    }
    return arr;
}

std::vector<AnnotationTask> tasks_from_json(const nlohmann::json& j) {
    std::vector<AnnotationTask> tasks;
    try {
        for (const auto& r : j) {
            AnnotationTask task;
            task.key = {r.at("layer").get<std::size_t>(), r.at("cell").get<std::size_t>()};
            task.t = r.at("t").get<std::size_t>();
            task.truncated = r.at("truncated").get<bool>();
            task.no_triggers = r.at("no_triggers").get<bool>();
            for (const auto& p : r.at("prefixes")) {
                task.prefixes.push_back({p.at("rank").get<std::size_t>(), p.at("sentence_id").get<std::size_t>(),
                                         p.at("end_index").get<std::size_t>(), p.at("text").get<std::string>(),
                                         p.at("coefficient").get<float>(), p.at("next_token_id").get<TokenId>(),
                                         p.at("next_token").get<std::string>()});
            }
            nlohmann::json ann = {{"layer", task.key.layer},
                                  {"cell", task.key.cell},
                                  {"num_prefixes", task.prefixes.size()},
                                  {"patterns", r.value("patterns", nlohmann::json::array())},
                                  {"assignments", r.value("assignments", nlohmann::json::object())},
                                  {"annotator", r.value("annotator", std::string{})},
                                  {"timestamp", r.value("timestamp", std::string{})}};
            task.scaffold = annotation_from_json(ann);
            tasks.push_back(std::move(task));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed task file: ") + e.what());
    }
    return tasks;
}

AnnotationStore::AnnotationStore(std::filesystem::path journal) : journal_(std::move(journal)) {
    if (journal_.has_parent_path()) {
        std::filesystem::create_directories(journal_.parent_path());
    }
    std::ifstream in(journal_, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error&) {
            // A torn final append from a crash; everything before it is intact.
            if (in.peek() == std::char_traits<char>::eof()) {
                break;
            }
            throw ValidationError("corrupt annotation journal " + journal_.string());
        }
        StoredAnnotation s{annotation_from_json(rec.at("annotation")), rec.at("revision").get<std::uint64_t>()};
        revision_ = std::max(revision_, s.revision);
        current_[s.set.key] = std::move(s);
    }
}

StoredAnnotation AnnotationStore::put(AnnotationSet set) {
    set.validate();
    std::lock_guard lock(mutex_);
    StoredAnnotation s{std::move(set), revision_ + 1};
    const std::string line = nlohmann::json{{"revision", s.revision}, {"annotation", to_json(s.set)}}.dump() + "\n";
    std::ofstream out(journal_, std::ios::binary | std::ios::app);
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.flush();
    if (!out) {
        throw std::runtime_error("failed to append to annotation journal " + journal_.string());
    }
    revision_ = s.revision;
    current_[s.set.key] = s;
    return s;
}

std::optional<StoredAnnotation> AnnotationStore::get(const MemoryCellRef& key) const {
    std::lock_guard lock(mutex_);
    const auto it = current_.find(key);
    if (it == current_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::vector<StoredAnnotation> AnnotationStore::all() const {
    std::lock_guard lock(mutex_);
    std::vector<StoredAnnotation> out;
    for (const auto& [key, s] : current_) {
        out.push_back(s);
    }
    return out;
}

std::uint64_t AnnotationStore::revision() const {
    std::lock_guard lock(mutex_);
    return revision_;
}

}  // namespace ffkv
