#include "ffkv/triggers.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "ffkv/error.hpp"
#include "ffkv/numerics.hpp"

namespace ffkv {

std::vector<MemoryCellRef> sample_keys(const ModelConfig& config, std::size_t per_layer, std::uint64_t seed) {
    if (per_layer > config.d_ff) {
        throw InputError("cannot sample " + std::to_string(per_layer) + " keys per layer from " +
                         std::to_string(config.d_ff) + " cells");
    }
    std::vector<MemoryCellRef> keys;
    keys.reserve(per_layer * config.n_layers);
    std::vector<std::size_t> cells(config.d_ff);
    for (std::size_t layer = 1; layer <= config.n_layers; ++layer) {
        std::iota(cells.begin(), cells.end(), std::size_t{0});
        Rng rng = Rng::derive(seed, 0x6b657973u, layer);
        // Partial Fisher-Yates: the first per_layer slots are the sample.
        for (std::size_t i = 0; i < per_layer; ++i) {
            const std::size_t j = i + rng.below(config.d_ff - i);
            std::swap(cells[i], cells[j]);
        }
        std::vector<std::size_t> chosen(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(per_layer));
        std::sort(chosen.begin(), chosen.end());
        for (auto c : chosen) {
            keys.push_back({layer, c});
        }
    }
    return keys;
}

std::vector<MemoryCellRef> layer_keys(const ModelConfig& config, std::size_t layer) {
    std::vector<MemoryCellRef> keys;
    for (std::size_t c = 0; c < config.d_ff; ++c) {
        keys.push_back({layer, c});
    }
    return keys;
}

std::vector<MemoryCellRef> all_keys(const ModelConfig& config) {
    std::vector<MemoryCellRef> keys;
    for (std::size_t layer = 1; layer <= config.n_layers; ++layer) {
        auto k = layer_keys(config, layer);
        keys.insert(keys.end(), k.begin(), k.end());
    }
    return keys;
}

const KeyTriggers& ScanResult::find(const MemoryCellRef& key) const {
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const KeyTriggers& k) { return k.key == key; });
    if (it == keys.end()) {
        throw InputError("key L" + std::to_string(key.layer) + "/" + std::to_string(key.cell) + " was not scanned");
    }
    return *it;
}

namespace {

constexpr unsigned kPositionBits = 20;

std::uint64_t prefix_id(std::size_t sentence_ordinal, std::size_t position) {
    return (static_cast<std::uint64_t>(sentence_ordinal) << kPositionBits) | position;
}

struct WorkerState {
    std::vector<TopKSelector> selectors;
    std::vector<std::uint64_t> positive;
    std::size_t passes = 0;
    std::size_t prefixes = 0;
};

}  // namespace

ScanResult scan_triggers(const Model& model, const Corpus& corpus, std::span<const std::size_t> sentence_ids,
                         std::span<const MemoryCellRef> keys, const ScanOptions& options) {
    if (options.t < 1) {
        throw InputError("scan_triggers needs t >= 1");
    }
    const auto& cfg = model.config();
    std::size_t deepest = 0;
    for (const auto& k : keys) {
        if (k.layer < 1 || k.layer > cfg.n_layers || k.cell >= cfg.d_ff) {
            throw InputError("key L" + std::to_string(k.layer) + "/" + std::to_string(k.cell) + " out of range");
        }
        deepest = std::max(deepest, k.layer);
    }
    if (corpus.max_len() >= (std::size_t{1} << kPositionBits)) {
        throw InputError("sentence length limit too large for the scan's prefix ids");
    }

    std::size_t workers = options.workers != 0 ? options.workers : std::max(1u, std::thread::hardware_concurrency());
    workers = std::max<std::size_t>(1, std::min(workers, sentence_ids.size()));

    std::vector<WorkerState> states(workers);
    auto run = [&](std::size_t w) {
        WorkerState& st = states[w];
        st.selectors.assign(keys.size(), TopKSelector(options.t));
        st.positive.assign(keys.size(), 0);
        const std::size_t begin = sentence_ids.size() * w / workers;
        const std::size_t end = sentence_ids.size() * (w + 1) / workers;
        const ForwardOptions fo{false, deepest};
        for (std::size_t s = begin; s < end; ++s) {
            const auto& tokens = corpus.sentences().at(sentence_ids[s]).tokens;
            if (tokens.empty()) {
                continue;
            }
            const ForwardTrace trace = model.forward(tokens, fo);
            ++st.passes;
            st.prefixes += tokens.size();
            for (std::size_t k = 0; k < keys.size(); ++k) {
                const Matrix& m = trace.layers[keys[k].layer_index()].coefficients;
                const std::size_t cell = keys[k].cell;
                for (std::size_t j = 0; j < tokens.size(); ++j) {
                    const float c = m(j, cell);
                    st.positive[k] += c > 0.0f ? 1 : 0;
                    st.selectors[k].push(prefix_id(s, j), c);
                }
            }
        }
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::thread> threads;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            threads.emplace_back([&, w] {
                try {
                    run(w);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& th : threads) {
            th.join();
        }
        for (auto& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    }

    ScanResult result;
    for (std::size_t w = 1; w < workers; ++w) {
        for (std::size_t k = 0; k < keys.size(); ++k) {
            states[0].selectors[k].merge(states[w].selectors[k]);
            states[0].positive[k] += states[w].positive[k];
        }
    }
    for (const auto& st : states) {
        result.forward_passes += st.passes;
        result.prefixes += st.prefixes;
    }
    result.keys.reserve(keys.size());
    for (std::size_t k = 0; k < keys.size(); ++k) {
        KeyTriggers kt{keys[k], {}, states[0].positive[k]};
        const auto best = states[0].selectors[k].sorted();
        for (std::size_t r = 0; r < best.size(); ++r) {
            const std::size_t ordinal = best[r].id >> kPositionBits;
            const std::size_t position = best[r].id & ((std::uint64_t{1} << kPositionBits) - 1);
            const std::size_t sid = sentence_ids[ordinal];
            const auto& tokens = corpus.sentences()[sid].tokens;
            const TokenId next = position + 1 < tokens.size() ? tokens[position + 1] : kEosId;
            kt.triggers.push_back({keys[k], Prefix{sid, position + 1, next}, best[r].score, r});
        }
        result.keys.push_back(std::move(kt));
    }
    return result;
}

std::string to_string(MutationVariant v) {
    switch (v) {
        case MutationVariant::drop_first: return "drop_first";
        case MutationVariant::drop_last: return "drop_last";
        case MutationVariant::drop_random: return "drop_random";
    }
    return "?";
}

MutationVariant mutation_variant_from_string(const std::string& s) {
    for (auto v : kMutationVariants) {
        if (to_string(v) == s) {
            return v;
        }
    }
    throw InputError("unknown mutation variant '" + s + "'");
}

std::size_t min_mutation_length(MutationVariant variant) { return variant == MutationVariant::drop_random ? 3 : 2; }

std::vector<TokenId> mutate_tokens(std::span<const TokenId> tokens, MutationVariant variant, Rng& rng) {
    if (tokens.size() < min_mutation_length(variant)) {
        throw InputError("prefix of length " + std::to_string(tokens.size()) + " is too short for " +
                         to_string(variant));
    }
    std::vector<TokenId> out(tokens.begin(), tokens.end());
    switch (variant) {
        case MutationVariant::drop_first: out.erase(out.begin()); break;
        case MutationVariant::drop_last: out.pop_back(); break;
        case MutationVariant::drop_random: {
            const std::size_t pos = 1 + rng.below(tokens.size() - 2);
            out.erase(out.begin() + static_cast<std::ptrdiff_t>(pos));
            break;
        }
    }
    return out;
}

Rng mutation_rng(std::uint64_t seed, const MemoryCellRef& key, std::size_t rank) {
    return Rng::derive(seed ^ (static_cast<std::uint64_t>(key.layer) << 40) ^ key.cell, 0x6d757461u, rank);
}

float coefficient_at_end(const Model& model, const MemoryCellRef& key, std::span<const TokenId> tokens) {
    const ForwardTrace trace = model.forward(tokens, {false, key.layer});
    return trace.layers[key.layer_index()].coefficients(tokens.size() - 1, key.cell);
}

MutationReport mutate_and_compare(const Model& model, const Corpus& corpus, const KeyTriggers& key,
                                  MutationVariant variant, std::uint64_t seed) {
    MutationReport report;
    report.key = key.key;
    report.variant = variant;
    double total = 0.0;
    for (const auto& ex : key.triggers) {
        const auto tokens = corpus.prefix_tokens(ex.prefix);
        if (tokens.size() < min_mutation_length(variant)) {
            ++report.ineligible;
            continue;
        }
        if (!(ex.coefficient > 0.0f)) {
            ++report.zero_original;
            continue;
        }
        Rng rng = mutation_rng(seed, key.key, ex.rank);
        const auto mutated = mutate_tokens(tokens, variant, rng);
        const float now = coefficient_at_end(model, key.key, mutated);
        const double change = (static_cast<double>(now) - ex.coefficient) / ex.coefficient;
        report.changes.push_back({ex.rank, ex.coefficient, now, change});
        total += change;
    }
    if (!report.changes.empty()) {
        report.mean_relative_change = total / static_cast<double>(report.changes.size());
    }
    return report;
}

namespace {

nlohmann::json trigger_record(const KeyTriggers& key, const Corpus* corpus) {
    nlohmann::json triggers = nlohmann::json::array();
    for (const auto& ex : key.triggers) {
        nlohmann::json t = {{"sentence_id", ex.prefix.sentence_id},
                            {"end_index", ex.prefix.end_index},
                            {"coefficient", ex.coefficient},
                            {"next_token", ex.prefix.next_token}};
        if (corpus != nullptr) {
            t["text"] = corpus->prefix_text(ex.prefix);
            t["next_token_text"] = corpus->vocab().token(ex.prefix.next_token);
        }
        triggers.push_back(std::move(t));
    }
    return {{"layer", key.key.layer},
            {"cell", key.key.cell},
            {"positive_prefixes", key.positive_prefixes},
            {"triggers", std::move(triggers)}};
}

}  // namespace

std::string trigger_record_json(const KeyTriggers& key, const Corpus& corpus) {
    return trigger_record(key, &corpus).dump();
}

void write_trigger_dump(const std::filesystem::path& path, const ScanResult& scan, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InputError("cannot write trigger dump " + path.string());
    }
    for (const auto& k : scan.keys) {
        out << trigger_record(k, &corpus).dump() << '\n';
    }
}

std::vector<KeyTriggers> read_trigger_dump(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot read trigger dump " + path.string());
    }
    std::vector<KeyTriggers> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            KeyTriggers kt;
            kt.key = {j.at("layer").get<std::size_t>(), j.at("cell").get<std::size_t>()};
            kt.positive_prefixes = j.value("positive_prefixes", std::uint64_t{0});
            std::size_t rank = 0;
            for (const auto& t : j.at("triggers")) {
                TriggerExample ex;
                ex.key = kt.key;
                ex.prefix = {t.at("sentence_id").get<std::size_t>(), t.at("end_index").get<std::size_t>(),
                             t.at("next_token").get<TokenId>()};
                ex.coefficient = t.at("coefficient").get<float>();
                ex.rank = rank++;
                kt.triggers.push_back(ex);
            }
            out.push_back(std::move(kt));
        } catch (const nlohmann::json::exception& e) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace ffkv
