#include "ffkv/values.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "ffkv/error.hpp"
#include "ffkv/io.hpp"

namespace ffkv {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<const CellValueStats*> layer_stats(const ModelConfig& config, std::span<const CellValueStats> stats,
                                               std::size_t layer) {
    if (layer < 1 || layer > config.n_layers) {
        throw InputError("layer " + std::to_string(layer) + " out of range");
    }
    std::vector<const CellValueStats*> cells(config.d_ff, nullptr);
    for (const auto& s : stats) {
        if (s.cell.layer == layer && s.cell.cell < config.d_ff) {
            cells[s.cell.cell] = &s;
        }
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
        if (cells[c] == nullptr) {
            throw InputError("layer " + std::to_string(layer) + " analysis needs a full-layer scan; cell " +
                             std::to_string(c) + " is missing");
        }
    }
    return cells;
}

}  // namespace

VocabDistribution value_distribution(const Model& model, const MemoryCellRef& cell) {
    const auto& cfg = model.config();
    if (cell.layer < 1 || cell.layer > cfg.n_layers || cell.cell >= cfg.d_ff) {
        throw InputError("memory cell out of range");
    }
    return model.project_to_vocab(model.weights().layers[cell.layer_index()].ff_values.row(cell.cell));
}

std::vector<CellValueStats> cell_value_stats(const Model& model, std::span<const KeyTriggers> keys) {
    std::vector<CellValueStats> out;
    out.reserve(keys.size());
    for (const auto& k : keys) {
        CellValueStats s;
        s.cell = k.key;
        const auto dist = value_distribution(model, k.key);
        s.top_token = dist.top_token();
        s.max_prob = dist.max_prob();
        s.dead = k.dead();
        if (!s.dead) {
            s.target = k.triggers.front().next_token();
            s.target_rank = dist.rank(s.target);
        }
        out.push_back(s);
    }
    return out;
}

LayerAgreement agreement_rate(const ModelConfig& config, std::span<const CellValueStats> stats, std::size_t layer) {
    LayerAgreement a;
    a.layer = layer;
    for (const auto* s : layer_stats(config, stats, layer)) {
        if (s->dead) {
            ++a.dead;
            continue;
        }
        ++a.evaluated;
        a.agreeing += s->agrees() ? 1 : 0;
    }
    a.rate = a.evaluated == 0 ? kNaN : static_cast<double>(a.agreeing) / static_cast<double>(a.evaluated);
    return a;
}

std::vector<RankBucket> rank_buckets(std::size_t vocab_size) {
    std::vector<RankBucket> b{{0, 0, 0}};
    for (std::size_t lo = 1; lo < vocab_size; lo *= 2) {
        b.push_back({lo, std::min(2 * lo - 1, vocab_size - 1), 0});
    }
    return b;
}

RankHistogram next_token_rank_distribution(const ModelConfig& config, std::span<const CellValueStats> stats,
                                           std::size_t layer) {
    RankHistogram h;
    h.layer = layer;
    h.buckets = rank_buckets(config.vocab_size);
    for (const auto* s : layer_stats(config, stats, layer)) {
        if (s->dead) {
            ++h.dead;
            continue;
        }
        h.ranks.push_back(s->target_rank);
        for (auto& b : h.buckets) {
            if (s->target_rank >= b.lo && s->target_rank <= b.hi) {
                ++b.count;
                break;
            }
        }
    }
    return h;
}

std::vector<ConfidenceBin> agreement_by_confidence(std::span<const CellValueStats> stats, std::size_t bins) {
    if (bins < 1) {
        throw InputError("agreement_by_confidence needs at least one bin");
    }
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& s : stats) {
        if (!s.dead) {
            lo = std::min(lo, static_cast<double>(s.max_prob));
            hi = std::max(hi, static_cast<double>(s.max_prob));
        }
    }
    std::vector<ConfidenceBin> out(bins);
    if (lo > hi) {
        for (auto& b : out) {
            b.rate = kNaN;
        }
        return out;
    }
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i < bins; ++i) {
        out[i].lo = lo + width * static_cast<double>(i);
        out[i].hi = i + 1 == bins ? hi : lo + width * static_cast<double>(i + 1);
    }
    for (const auto& s : stats) {
        if (s.dead) {
            continue;
        }
        std::size_t i = width > 0.0 ? static_cast<std::size_t>((s.max_prob - lo) / width) : 0;
        i = std::min(i, bins - 1);
        ++out[i].count;
        out[i].agreeing += s.agrees() ? 1 : 0;
    }
    for (auto& b : out) {
        b.rate = b.count == 0 ? kNaN : static_cast<double>(b.agreeing) / static_cast<double>(b.count);
    }
    return out;
}

std::vector<PredictiveValue> detect_predictive_values(std::span<const CellValueStats> stats,
                                                      std::span<const KeyTriggers> keys, std::size_t n,
                                                      std::size_t t) {
    if (t < 1) {
        throw InputError("precision@t needs t >= 1");
    }
    std::map<MemoryCellRef, const KeyTriggers*> by_key;
    for (const auto& k : keys) {
        by_key[k.key] = &k;
    }
    std::vector<const CellValueStats*> live;
    for (const auto& s : stats) {
        if (!s.dead) {
            live.push_back(&s);
        }
    }
    std::sort(live.begin(), live.end(), [](const CellValueStats* a, const CellValueStats* b) {
        if (a->max_prob != b->max_prob) {
            return a->max_prob > b->max_prob;
        }
        return a->cell < b->cell;
    });
    live.resize(std::min(n, live.size()));

    std::vector<PredictiveValue> out;
    for (const auto* s : live) {
        const auto it = by_key.find(s->cell);
        if (it == by_key.end()) {
            throw InputError("no triggers for a selected cell");
        }
        PredictiveValue p{s->cell, s->top_token, s->max_prob};
        const auto& trig = it->second->triggers;
        p.used = std::min(t, trig.size());
        p.truncated = trig.size() < t;
        for (std::size_t r = 0; r < p.used; ++r) {
            p.matched += trig[r].next_token() == s->top_token ? 1 : 0;
        }
        p.precision = p.used == 0 ? kNaN : static_cast<double>(p.matched) / static_cast<double>(p.used);
        out.push_back(p);
    }
    return out;
}

std::string agreement_csv(std::span<const LayerAgreement> rows) {
    std::string s = "layer,agreement_rate\n";
    for (const auto& r : rows) {
        s += std::to_string(r.layer) + "," + csv_number(r.rate) + "\n";
    }
    return s;
}

std::string rank_histogram_csv(std::span<const RankHistogram> rows) {
    std::string s = "layer,rank_bucket,count\n";
    for (const auto& r : rows) {
        for (const auto& b : r.buckets) {
            const std::string label = b.lo == b.hi ? std::to_string(b.lo)
                                                   : std::to_string(b.lo) + "-" + std::to_string(b.hi);
            s += std::to_string(r.layer) + "," + label + "," + std::to_string(b.count) + "\n";
        }
    }
    return s;
}

std::string confidence_csv(std::span<const ConfidenceBin> bins) {
    std::string s = "bin_lo,bin_hi,agreement_rate,count\n";
    for (const auto& b : bins) {
        s += csv_number(b.lo) + "," + csv_number(b.hi) + "," + csv_number(b.rate) + "," + std::to_string(b.count) +
             "\n";
    }
    return s;
}

nlohmann::json predictive_values_json(std::span<const PredictiveValue> values, const Vocab& vocab, std::size_t t) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& v : values) {
        arr.push_back({{"layer", v.cell.layer},
                       {"cell", v.cell.cell},
                       {"top_token", v.top_token},
                       {"prediction", vocab.token(v.top_token)},
                       {"max_prob", v.max_prob},
                       {"precision_at_t", std::isnan(v.precision) ? nlohmann::json(nullptr) : nlohmann::json(v.precision)},
                       {"t", t},
                       {"triggers_used", v.used},
                       {"truncated", v.truncated}});
    }
    return arr;
}

}  // namespace ffkv
