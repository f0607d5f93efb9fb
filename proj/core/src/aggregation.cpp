#include "ffkv/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

#include "ffkv/error.hpp"
#include "ffkv/io.hpp"
#include "ffkv/numerics.hpp"
#include "ffkv/rng.hpp"

namespace ffkv {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double ratio(std::size_t a, std::size_t b) {
    return b == 0 ? kNaN : static_cast<double>(a) / static_cast<double>(b);
}

double prob_of(std::span<const double> logits, std::size_t token) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double z : logits) {
        total += std::exp(z - mx);
    }
    return std::exp(logits[token] - mx) / total;
}

double quantile(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) {
        return kNaN;
    }
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - static_cast<double>(lo));
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        fn(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            try {
                fn(n * w / workers, n * (w + 1) / workers);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace

std::size_t default_sample_size(std::size_t population) {
    if (population == 0) {
        return 0;
    }
    return std::max<std::size_t>(1, std::min<std::size_t>(4000, population / 5));
}

EvalSample draw_eval_sample(const Corpus& corpus, std::span<const std::size_t> sentence_ids, std::size_t size,
                            std::uint64_t seed) {
    std::vector<Prefix> all = enumerate_prefixes(corpus, sentence_ids);
    if (size > all.size()) {
        throw InputError("sample of " + std::to_string(size) + " prefixes requested from " +
                         std::to_string(all.size()));
    }
    std::vector<std::size_t> idx(all.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng = Rng::derive(seed, 0x73616d70u);
    for (std::size_t i = 0; i < size; ++i) {
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    }
    idx.resize(size);
    std::sort(idx.begin(), idx.end());
    EvalSample s;
    s.seed = seed;
    s.population = all.size();
    for (auto i : idx) {
        s.prefixes.push_back(all[i]);
    }
    return s;
}

std::string to_string(PredictionCase c) {
    switch (c) {
        case PredictionCase::residual: return "residual";
        case PredictionCase::ffn: return "ffn";
        case PredictionCase::agreement: return "agreement";
        case PredictionCase::composition: return "composition";
    }
    return "?";
}

PredictionCase prediction_case(TokenId r, TokenId f, TokenId o) {
    if (r == f && f == o) {
        return PredictionCase::agreement;
    }
    if (r == f) {
        throw InvariantViolation("residual and feed-forward output agree on token " + std::to_string(r) +
                                 " but the layer output predicts " + std::to_string(o));
    }
    if (o == r) {
        return PredictionCase::residual;
    }
    if (o == f) {
        return PredictionCase::ffn;
    }
    return PredictionCase::composition;
}

PredictionCase prediction_case(std::span<const double> residual_logits, std::span<const double> ffn_logits) {
    if (residual_logits.size() != ffn_logits.size() || residual_logits.empty()) {
        throw InputError("prediction_case: logit vectors must be non-empty and equally long");
    }
    std::vector<double> out(residual_logits.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = residual_logits[i] + ffn_logits[i];
    }
    return prediction_case(static_cast<TokenId>(argmax_tiebreak(residual_logits)),
                           static_cast<TokenId>(argmax_tiebreak(ffn_logits)),
                           static_cast<TokenId>(argmax_tiebreak(std::span<const double>(out))));
}

Compositionality layer_compositionality(std::span<const float> coefficients, std::span<const TokenId> value_tops,
                                        TokenId ffn_top) {
    if (coefficients.size() != value_tops.size()) {
        throw InputError("layer_compositionality: one value top token per cell required");
    }
    bool any_active = false;
    for (std::size_t i = 0; i < coefficients.size(); ++i) {
        if (coefficients[i] > 0.0f) {
            any_active = true;
            if (value_tops[i] == ffn_top) {
                return Compositionality::not_compositional;
            }
        }
    }
    return any_active ? Compositionality::compositional : Compositionality::inactive;
}

std::vector<std::vector<TokenId>> value_top_tokens(const Model& model) {
    const auto& cfg = model.config();
    std::vector<std::vector<TokenId>> out(cfg.n_layers, std::vector<TokenId>(cfg.d_ff));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const Matrix& V = model.weights().layers[l].ff_values;
        for (std::size_t c = 0; c < cfg.d_ff; ++c) {
            const auto z = model.vocab_logits(V.row(c));
            out[l][c] = static_cast<TokenId>(argmax_tiebreak(std::span<const double>(z)));
        }
    }
    return out;
}

std::vector<ExampleObservation> observe_sample(const Model& model, const Corpus& corpus, const EvalSample& sample,
                                               const ObserveOptions& options) {
    const auto& cfg = model.config();
    const auto value_tops = value_top_tokens(model);

    // Prefixes of one sentence share a forward pass: rows never see later positions.
    std::vector<std::pair<std::size_t, std::size_t>> groups;  // [begin, end) into sample.prefixes
    for (std::size_t i = 0; i < sample.prefixes.size(); ++i) {
        if (groups.empty() || sample.prefixes[groups.back().first].sentence_id != sample.prefixes[i].sentence_id) {
            groups.emplace_back(i, i + 1);
        } else {
            groups.back().second = i + 1;
        }
    }

    std::vector<ExampleObservation> out(sample.prefixes.size());
    const std::size_t workers =
        options.workers != 0 ? options.workers : std::max(1u, std::thread::hardware_concurrency());
    parallel_for(groups.size(), workers, [&](std::size_t gb, std::size_t ge) {
        for (std::size_t g = gb; g < ge; ++g) {
            const auto [begin, end] = groups[g];
            std::size_t longest = 0;
            for (std::size_t i = begin; i < end; ++i) {
                longest = std::max(longest, sample.prefixes[i].end_index);
            }
            const Prefix& first = sample.prefixes[begin];
            const auto tokens = corpus.prefix_tokens(Prefix{first.sentence_id, longest, kEosId});
            const ForwardTrace trace = model.forward(tokens);
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t j = sample.prefixes[i].end_index - 1;
                ExampleObservation& ob = out[i];
                ob.prefix = sample.prefixes[i];
                std::vector<double> final_logits(trace.logits.row(j).begin(), trace.logits.row(j).end());
                ob.final_top = static_cast<TokenId>(argmax_tiebreak(trace.logits.row(j)));
                ob.final_prob = prob_of(final_logits, ob.final_top);
                const Vector again = model.output_logits(trace.layers.back().layer_out.row(j));
                const std::vector<double> again_d(again.begin(), again.end());
                ob.output_path_top = static_cast<TokenId>(argmax_tiebreak(std::span<const float>(again)));
                ob.output_path_prob = prob_of(again_d, ob.final_top);

                ob.layers.resize(cfg.n_layers);
                for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                    const LayerTrace& lt = trace.layers[l];
                    LayerObservation& lo = ob.layers[l];
                    const auto r = lt.residual_in.row(j);
                    const auto y = lt.ff_output.row(j);
                    const auto m = lt.coefficients.row(j);
                    const auto zr = model.vocab_logits(r);
                    const auto zy = model.vocab_logits(y);
                    std::vector<double> zo(zr.size());
                    for (std::size_t v = 0; v < zo.size(); ++v) {
                        zo[v] = zr[v] + zy[v];
                    }
                    lo.residual_top = static_cast<TokenId>(argmax_tiebreak(std::span<const double>(zr)));
                    lo.ffn_top = static_cast<TokenId>(argmax_tiebreak(std::span<const double>(zy)));
                    lo.output_top = static_cast<TokenId>(argmax_tiebreak(std::span<const double>(zo)));
                    lo.prediction = prediction_case(lo.residual_top, lo.ffn_top, lo.output_top);
                    lo.residual_prob = prob_of(zr, ob.final_top);
                    const auto zr_ln = model.layernormed_vocab_logits(r);
                    lo.residual_top_ln = static_cast<TokenId>(argmax_tiebreak(std::span<const double>(zr_ln)));
                    lo.residual_prob_ln = prob_of(zr_ln, ob.final_top);

                    lo.active = static_cast<std::size_t>(
                        std::count_if(m.begin(), m.end(), [](float c) { return c > 0.0f; }));
                    lo.compositionality = layer_compositionality(m, value_tops[l], lo.ffn_top);
                    lo.memory_agrees = lo.compositionality == Compositionality::not_compositional;
                }
            }
        }
    });
    return out;
}

FractionSummary active_memory_fraction(std::span<const ExampleObservation> obs, std::size_t layer,
                                       std::size_t d_ff) {
    FractionSummary s;
    s.layer = layer;
    for (const auto& o : obs) {
        s.fractions.push_back(static_cast<double>(o.layers.at(layer - 1).active) / static_cast<double>(d_ff));
    }
    auto sorted = s.fractions;
    std::sort(sorted.begin(), sorted.end());
    s.p25 = quantile(sorted, 0.25);
    s.p50 = quantile(sorted, 0.5);
    s.p75 = quantile(sorted, 0.75);
    s.mean = sorted.empty() ? kNaN : std::accumulate(sorted.begin(), sorted.end(), 0.0) / sorted.size();
    return s;
}

CompositionalityStats compositional_fraction(std::span<const ExampleObservation> obs, std::size_t layer) {
    CompositionalityStats s;
    s.layer = layer;
    for (const auto& o : obs) {
        switch (o.layers.at(layer - 1).compositionality) {
            case Compositionality::compositional: ++s.compositional; break;
            case Compositionality::not_compositional: ++s.not_compositional; break;
            case Compositionality::inactive: ++s.inactive; break;
        }
    }
    s.fraction = ratio(s.compositional, s.compositional + s.not_compositional);
    return s;
}

std::unordered_set<TokenId> stop_words(const Vocab& vocab, std::size_t n) {
    const auto ids = vocab.most_frequent(n);
    return {ids.begin(), ids.end()};
}

AgreementProfile agreement_case_profile(std::span<const ExampleObservation> obs,
                                        const std::unordered_set<TokenId>& stop) {
    AgreementProfile p;
    std::size_t stopword = 0, short_prefix = 0;
    for (const auto& o : obs) {
        for (const auto& l : o.layers) {
            if (!l.memory_agrees) {
                continue;
            }
            ++p.pairs;
            stopword += stop.count(l.ffn_top);
            short_prefix += o.prefix.end_index < kShortPrefixLength ? 1 : 0;
        }
    }
    p.stopword_fraction = ratio(stopword, p.pairs);
    p.short_prefix_fraction = ratio(short_prefix, p.pairs);
    return p;
}

std::vector<ResidualRow> residual_stats(std::span<const ExampleObservation> obs, bool layernormed) {
    if (obs.empty()) {
        return {};
    }
    const std::size_t L = obs.front().layers.size();
    std::vector<std::size_t> match(L + 1, 0);
    std::vector<double> prob(L + 1, 0.0);
    for (const auto& o : obs) {
        for (std::size_t l = 0; l < L; ++l) {
            const auto& lo = o.layers[l];
            match[l] += (layernormed ? lo.residual_top_ln : lo.residual_top) == o.final_top ? 1 : 0;
            prob[l] += layernormed ? lo.residual_prob_ln : lo.residual_prob;
        }
        match[L] += o.output_path_top == o.final_top ? 1 : 0;
        prob[L] += o.output_path_prob;
    }
    std::vector<ResidualRow> rows;
    for (std::size_t l = 0; l <= L; ++l) {
        rows.push_back({l + 1, ratio(match[l], obs.size()), prob[l] / static_cast<double>(obs.size())});
    }
    return rows;
}

std::vector<double> residual_match_fraction(std::span<const ExampleObservation> obs, bool layernormed) {
    std::vector<double> out;
    for (const auto& r : residual_stats(obs, layernormed)) {
        out.push_back(r.match_fraction);
    }
    return out;
}

std::vector<double> residual_final_token_probability(std::span<const ExampleObservation> obs, bool layernormed) {
    std::vector<double> out;
    for (const auto& r : residual_stats(obs, layernormed)) {
        out.push_back(r.mean_prob);
    }
    return out;
}

double CaseCounts::fraction(PredictionCase c) const {
    return ratio(counts[static_cast<std::size_t>(c)], total());
}

std::vector<CaseCounts> prediction_case_counts(std::span<const ExampleObservation> obs) {
    if (obs.empty()) {
        return {};
    }
    std::vector<CaseCounts> out(obs.front().layers.size());
    for (std::size_t l = 0; l < out.size(); ++l) {
        out[l].layer = l + 1;
    }
    for (const auto& o : obs) {
        for (std::size_t l = 0; l < out.size(); ++l) {
            ++out[l].counts[static_cast<std::size_t>(o.layers[l].prediction)];
        }
    }
    return out;
}

std::string active_fraction_csv(std::span<const FractionSummary> rows) {
    std::string s = "layer,p25,p50,p75,mean\n";
    for (const auto& r : rows) {
        s += std::to_string(r.layer) + "," + csv_number(r.p25) + "," + csv_number(r.p50) + "," + csv_number(r.p75) +
             "," + csv_number(r.mean) + "\n";
    }
    return s;
}

std::string compositional_csv(std::span<const CompositionalityStats> rows) {
    std::string s = "layer,compositional_fraction\n";
    for (const auto& r : rows) {
        s += std::to_string(r.layer) + "," + csv_number(r.fraction) + "\n";
    }
    return s;
}

std::string residual_match_csv(std::span<const ResidualRow> rows) {
    std::string s = "layer,match_fraction\n";
    for (const auto& r : rows) {
        s += std::to_string(r.layer) + "," + csv_number(r.match_fraction) + "\n";
    }
    return s;
}

std::string residual_prob_csv(std::span<const ResidualRow> rows) {
    std::string s = "layer,mean_prob\n";
    for (const auto& r : rows) {
        s += std::to_string(r.layer) + "," + csv_number(r.mean_prob) + "\n";
    }
    return s;
}

std::string prediction_case_csv(std::span<const CaseCounts> rows) {
    std::string s = "layer,residual,ffn,agreement,composition\n";
    for (const auto& r : rows) {
        s += std::to_string(r.layer);
        for (auto c : kPredictionCases) {
            s += "," + csv_number(r.fraction(c));
        }
        s += "\n";
    }
    return s;
}

nlohmann::json composition_candidates_json(std::span<const ExampleObservation> obs, const Corpus& corpus) {
    nlohmann::json arr = nlohmann::json::array();
    const auto& vocab = corpus.vocab();
    for (const auto& o : obs) {
        if (o.layers.empty()) {
            continue;
        }
        const auto& last = o.layers.back();
        if (last.prediction != PredictionCase::composition) {
            continue;
        }
        arr.push_back({{"sentence_id", o.prefix.sentence_id},
                       {"end_index", o.prefix.end_index},
                       {"text", corpus.prefix_text(o.prefix)},
                       {"layer", o.layers.size()},
                       {"residual_top", vocab.token(last.residual_top)},
                       {"ffn_top", vocab.token(last.ffn_top)},
                       {"output_top", vocab.token(last.output_top)},
                       {"model_prediction", vocab.token(o.final_top)}});
    }
    return arr;
}

nlohmann::json agreement_profile_json(const AgreementProfile& p) {
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    return {{"pairs", p.pairs},
            {"empty", p.empty()},
            {"stopword_fraction", num(p.stopword_fraction)},
            {"short_prefix_fraction", num(p.short_prefix_fraction)},
            {"short_prefix_length", kShortPrefixLength}};
}

}  // namespace ffkv
