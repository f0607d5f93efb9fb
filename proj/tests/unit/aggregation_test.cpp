#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "ffkv/aggregation.hpp"
#include "ffkv/error.hpp"
#include "ffkv/io.hpp"
#include "reference_model.hpp"
#include "test_models.hpp"

namespace ffkv {
namespace {

namespace fs = std::filesystem;

PreparedCorpus scan_corpus() {
    return prepare_corpus({read_file(fs::path(FFKV_FIXTURE_DIR) / "scan_corpus.txt")}, 200, 24, 0.0);
}

std::vector<std::size_t> all_sentences(const Corpus& c) {
    std::vector<std::size_t> ids(c.sentences().size());
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

Model corpus_model(const Corpus& c, std::uint64_t seed, std::size_t layers = 2) {
    ModelConfig cfg = testing::tiny_config(layers, c.vocab().size());
    cfg.max_seq_len = 24;
    return Model(cfg, testing::random_weights(cfg, seed));
}

EvalSample full_sample(const Corpus& c) {
    const auto ids = all_sentences(c);
    const std::size_t n = enumerate_prefixes(c, ids).size();
    return draw_eval_sample(c, ids, n, 1);
}

PredictionCase enumerate_case(std::size_t r, std::size_t f, std::size_t o) {
    if (r == f && f == o) return PredictionCase::agreement;
    if (o == r && r != f) return PredictionCase::residual;
    if (o == f && f != r) return PredictionCase::ffn;
    return PredictionCase::composition;
}

TEST(PredictionCases, RandomPairsMatchEnumeration) {
    Rng rng(31);
    std::array<std::size_t, 4> got{}, want{};
    std::size_t impossible = 0;
    for (int k = 0; k < 1000; ++k) {
        std::vector<double> r(7), y(7), o(7);
        for (std::size_t i = 0; i < 7; ++i) {
            r[i] = rng.normal();
            y[i] = rng.normal() * (k % 3 == 0 ? 0.2 : 1.5);
            o[i] = r[i] + y[i];
        }
        const std::size_t R = oracle::linear_argmax(r), F = oracle::linear_argmax(y), O = oracle::linear_argmax(o);
        if (R == F && F != O) ++impossible;
        ++want[static_cast<std::size_t>(enumerate_case(R, F, O))];
        ++got[static_cast<std::size_t>(prediction_case(r, y))];
    }
    EXPECT_EQ(impossible, 0u);
    EXPECT_EQ(got, want);
    EXPECT_EQ(std::accumulate(got.begin(), got.end(), std::size_t{0}), 1000u);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_GT(got[c], 0u) << c;
}

TEST(PredictionCases, IdentityAndZeroFeedForward) {
    const std::vector<double> r{0.1, 2.0, -1.0, 0.5};
    EXPECT_EQ(prediction_case(r, r), PredictionCase::agreement);
    const std::vector<double> zero(4, 0.0);
    EXPECT_EQ(prediction_case(r, zero), PredictionCase::residual);
    const std::vector<double> r0{3.0, 2.0, -1.0, 0.5};
    EXPECT_EQ(prediction_case(r0, zero), PredictionCase::agreement);
}

TEST(PredictionCases, ImpossibleCombinationThrows) {
    EXPECT_THROW(prediction_case(TokenId{2}, TokenId{2}, TokenId{3}), InvariantViolation);
    EXPECT_EQ(prediction_case(TokenId{1}, TokenId{2}, TokenId{3}), PredictionCase::composition);
    EXPECT_EQ(prediction_case(TokenId{1}, TokenId{2}, TokenId{2}), PredictionCase::ffn);
    EXPECT_EQ(prediction_case(TokenId{1}, TokenId{2}, TokenId{1}), PredictionCase::residual);
    const std::vector<double> a{1.0, 2.0};
    const std::vector<double> b{1.0};
    EXPECT_THROW(prediction_case(a, b), InputError);
}

TEST(Compositionality, SingleActiveCellAgreesWithItsValue) {
    const Model m = testing::tiny_model(9, 1);
    const auto tops = value_top_tokens(m);
    const auto& V = m.weights().layers[0].ff_values;
    for (std::size_t cell = 0; cell < m.config().d_ff; ++cell) {
        std::vector<float> coeff(m.config().d_ff, 0.0f);
        coeff[cell] = 0.7f;
        std::vector<float> y(m.config().d_model);
        for (std::size_t c = 0; c < y.size(); ++c) y[c] = 0.7f * V(cell, c);
        const auto z = oracle::reference_vocab_logits(m.output_embedding(), y);
        const auto ffn_top = static_cast<TokenId>(oracle::linear_argmax(z));
        EXPECT_EQ(tops[0][cell], ffn_top);
        EXPECT_EQ(layer_compositionality(coeff, tops[0], ffn_top), Compositionality::not_compositional);
    }
    const std::vector<float> none(m.config().d_ff, 0.0f);
    EXPECT_EQ(layer_compositionality(none, tops[0], 0), Compositionality::inactive);
}

TEST(Compositionality, ValueTopsMatchLinearScan) {
    const Model m = testing::tiny_model(10, 2);
    const auto tops = value_top_tokens(m);
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t c = 0; c < m.config().d_ff; ++c) {
            const auto z = oracle::reference_vocab_logits(m.output_embedding(), m.weights().layers[l].ff_values.row(c));
            EXPECT_EQ(tops[l][c], oracle::linear_argmax(z));
        }
    }
}

TEST(Sampling, SizeRule) {
    EXPECT_EQ(default_sample_size(0), 0u);
    EXPECT_EQ(default_sample_size(3), 1u);
    EXPECT_EQ(default_sample_size(1000), 200u);
    EXPECT_EQ(default_sample_size(20000), 4000u);
    EXPECT_EQ(default_sample_size(1000000), 4000u);
}

TEST(Sampling, DeterministicWithoutReplacement) {
    const auto p = scan_corpus();
    const auto ids = all_sentences(p.corpus);
    const auto a = draw_eval_sample(p.corpus, ids, 40, 7);
    const auto b = draw_eval_sample(p.corpus, ids, 40, 7);
    const auto c = draw_eval_sample(p.corpus, ids, 40, 8);
    std::size_t total = 0;
    for (const auto& st : p.corpus.sentences()) total += st.tokens.size();
    EXPECT_EQ(a.population, total);
    ASSERT_EQ(a.prefixes.size(), 40u);
    std::set<std::pair<std::size_t, std::size_t>> seen;
    bool differs = false;
    for (std::size_t i = 0; i < 40; ++i) {
        EXPECT_EQ(a.prefixes[i].sentence_id, b.prefixes[i].sentence_id);
        EXPECT_EQ(a.prefixes[i].end_index, b.prefixes[i].end_index);
        differs |= a.prefixes[i].sentence_id != c.prefixes[i].sentence_id ||
                   a.prefixes[i].end_index != c.prefixes[i].end_index;
        seen.insert({a.prefixes[i].sentence_id, a.prefixes[i].end_index});
        if (i > 0) {
            EXPECT_LT(std::make_pair(a.prefixes[i - 1].sentence_id, a.prefixes[i - 1].end_index),
                      std::make_pair(a.prefixes[i].sentence_id, a.prefixes[i].end_index));
        }
    }
    EXPECT_EQ(seen.size(), 40u);
    EXPECT_TRUE(differs);
    EXPECT_THROW(draw_eval_sample(p.corpus, ids, total + 1, 7), InputError);
}

TEST(Sampling, RoughlyUniform) {
    const auto p = scan_corpus();
    const auto ids = all_sentences(p.corpus);
    std::vector<int> hits(p.corpus.sentences().size(), 0);
    std::vector<int> lengths(p.corpus.sentences().size());
    for (std::size_t s = 0; s < lengths.size(); ++s) lengths[s] = static_cast<int>(p.corpus.sentences()[s].tokens.size());
    const double total = std::accumulate(lengths.begin(), lengths.end(), 0.0);
    const int draws = 400;
    for (int seed = 0; seed < draws; ++seed) {
        for (const auto& pr : draw_eval_sample(p.corpus, ids, 32, seed).prefixes) ++hits[pr.sentence_id];
    }
    for (std::size_t s = 0; s < hits.size(); ++s) {
        const double expected = draws * 32.0 * lengths[s] / total;
        EXPECT_NEAR(hits[s], expected, 5.0 * std::sqrt(expected) + 2.0) << s;
    }
}

TEST(Observation, MatchesPerPrefixRecount) {
    const auto p = scan_corpus();
    const Model m = corpus_model(p.corpus, 21);
    const auto sample = full_sample(p.corpus);
    const auto obs = observe_sample(m, p.corpus, sample, {1});
    ASSERT_EQ(obs.size(), sample.population);
    const auto& E = m.output_embedding();
    const auto& V0 = m.weights();
    for (std::size_t i = 0; i < obs.size(); ++i) {
        const auto tokens = p.corpus.prefix_tokens(sample.prefixes[i]);
        const ForwardTrace t = m.forward(tokens);
        const std::size_t j = tokens.size() - 1;
        std::vector<double> final_z(t.logits.row(j).begin(), t.logits.row(j).end());
        const auto final_top = static_cast<TokenId>(oracle::linear_argmax(final_z));
        ASSERT_EQ(obs[i].final_top, final_top) << i;
        for (std::size_t l = 0; l < 2; ++l) {
            const auto& lt = t.layers[l];
            const auto zr = oracle::reference_vocab_logits(E, lt.residual_in.row(j));
            const auto zy = oracle::reference_vocab_logits(E, lt.ff_output.row(j));
            std::vector<double> zo(zr.size());
            for (std::size_t v = 0; v < zo.size(); ++v) zo[v] = zr[v] + zy[v];
            const auto m_row = lt.coefficients.row(j);
            const std::size_t active =
                static_cast<std::size_t>(std::count_if(m_row.begin(), m_row.end(), [](float c) { return c > 0.0f; }));
            const auto F = static_cast<TokenId>(oracle::linear_argmax(zy));
            Compositionality comp = Compositionality::inactive;
            if (active > 0) {
                comp = Compositionality::compositional;
                for (std::size_t c = 0; c < m_row.size(); ++c) {
                    if (m_row[c] <= 0.0f) continue;
                    const auto zv = oracle::reference_vocab_logits(E, V0.layers[l].ff_values.row(c));
                    if (oracle::linear_argmax(zv) == F) comp = Compositionality::not_compositional;
                }
            }
            const auto pr = oracle::ref_softmax(zr);
            const auto& lo = obs[i].layers[l];
            EXPECT_EQ(lo.active, active);
            EXPECT_EQ(lo.residual_top, oracle::linear_argmax(zr));
            EXPECT_EQ(lo.ffn_top, F);
            EXPECT_EQ(lo.output_top, oracle::linear_argmax(zo));
            EXPECT_EQ(lo.compositionality, comp);
            EXPECT_EQ(lo.memory_agrees, comp == Compositionality::not_compositional);
            EXPECT_EQ(lo.prediction, enumerate_case(lo.residual_top, lo.ffn_top, lo.output_top));
            EXPECT_NEAR(lo.residual_prob, pr[final_top], 1e-9);
        }
    }
}

TEST(Observation, CloseToDoubleReference) {
    const auto p = scan_corpus();
    const Model m = corpus_model(p.corpus, 22);
    const auto sample = draw_eval_sample(p.corpus, all_sentences(p.corpus), 60, 3);
    const auto obs = observe_sample(m, p.corpus, sample, {2});
    std::size_t compared = 0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
        const auto tokens = p.corpus.prefix_tokens(sample.prefixes[i]);
        const auto ref = oracle::reference_forward(m.config(), m.weights(), tokens);
        const std::size_t j = tokens.size() - 1;
        auto sorted = ref.logits[j];
        std::sort(sorted.rbegin(), sorted.rend());
        if (sorted[0] - sorted[1] > 1e-3) {
            EXPECT_EQ(obs[i].final_top, oracle::linear_argmax(ref.logits[j]));
            EXPECT_NEAR(obs[i].final_prob, oracle::ref_softmax(ref.logits[j])[obs[i].final_top], 1e-4);
            ++compared;
        }
        for (std::size_t l = 0; l < 2; ++l) {
            std::size_t active = 0;
            bool near_kink = false;
            for (double a : ref.layers[l].pre[j]) {
                active += a > 0.0 ? 1 : 0;
                near_kink |= std::abs(a) < 1e-4;
            }
            if (!near_kink) {
                EXPECT_EQ(obs[i].layers[l].active, active);
            }
        }
    }
    EXPECT_GT(compared, 50u);
}

TEST(Observation, WorkerCountInvariant) {
    const auto p = scan_corpus();
    const Model m = corpus_model(p.corpus, 23);
    const auto sample = draw_eval_sample(p.corpus, all_sentences(p.corpus), 100, 5);
    const auto a = observe_sample(m, p.corpus, sample, {1});
    const auto b = observe_sample(m, p.corpus, sample, {4});
    EXPECT_EQ(prediction_case_csv(prediction_case_counts(a)), prediction_case_csv(prediction_case_counts(b)));
    const auto ra = residual_stats(a), rb = residual_stats(b);
    EXPECT_EQ(residual_prob_csv(ra), residual_prob_csv(rb));
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(a[i].layers[l].active, b[i].layers[l].active);
    }
}

TEST(ActiveFraction, AllInactiveAndAllActive) {
    const auto p = scan_corpus();
    ModelConfig cfg = testing::tiny_config(1, p.corpus.vocab().size());
    cfg.max_seq_len = 24;
    ModelWeights w = testing::random_weights(cfg, 24);
    for (float& b : w.layers[0].ff_key_bias) b = -1e4f;
    const auto sample = draw_eval_sample(p.corpus, all_sentences(p.corpus), 50, 1);
    const auto off = observe_sample(Model(cfg, w), p.corpus, sample);
    const auto s0 = active_memory_fraction(off, 1, cfg.d_ff);
    EXPECT_EQ(s0.mean, 0.0);
    EXPECT_EQ(s0.p75, 0.0);
    const auto c0 = compositional_fraction(off, 1);
    EXPECT_EQ(c0.inactive, 50u);
    EXPECT_TRUE(std::isnan(c0.fraction));

    w.layers[0].ff_keys.fill(0.0f);
    for (float& b : w.layers[0].ff_key_bias) b = 1.0f;
    const auto on = observe_sample(Model(cfg, w), p.corpus, sample);
    const auto s1 = active_memory_fraction(on, 1, cfg.d_ff);
    EXPECT_EQ(s1.p25, 1.0);
    EXPECT_EQ(s1.mean, 1.0);
}

ExampleObservation synthetic(std::size_t prefix_len, std::vector<std::size_t> actives) {
    ExampleObservation o;
    o.prefix.end_index = prefix_len;
    for (auto a : actives) {
        LayerObservation l;
        l.active = a;
        o.layers.push_back(l);
    }
    return o;
}

TEST(ActiveFraction, Quartiles) {
    std::vector<ExampleObservation> obs;
    for (std::size_t a : {4u, 0u, 2u, 1u, 3u}) obs.push_back(synthetic(3, {a}));
    const auto s = active_memory_fraction(obs, 1, 4);
    EXPECT_EQ(s.fractions, (std::vector<double>{1.0, 0.0, 0.5, 0.25, 0.75}));
    EXPECT_DOUBLE_EQ(s.p25, 0.25);
    EXPECT_DOUBLE_EQ(s.p50, 0.5);
    EXPECT_DOUBLE_EQ(s.p75, 0.75);
    EXPECT_DOUBLE_EQ(s.mean, 0.5);
    const std::vector<FractionSummary> rows{s};
    EXPECT_EQ(active_fraction_csv(rows), "layer,p25,p50,p75,mean\n1,0.25,0.5,0.75,0.5\n");
}

TEST(AgreementProfile, EmptyAndAllStopWords) {
    std::vector<ExampleObservation> obs{synthetic(3, {1, 1}), synthetic(8, {1, 1})};
    const std::unordered_set<TokenId> stop{5, 6};
    const auto none = agreement_case_profile(obs, stop);
    EXPECT_TRUE(none.empty());
    EXPECT_TRUE(std::isnan(none.stopword_fraction));
    EXPECT_TRUE(agreement_profile_json(none)["stopword_fraction"].is_null());

    obs[0].layers[0].memory_agrees = true;
    obs[0].layers[0].ffn_top = 5;
    obs[1].layers[1].memory_agrees = true;
    obs[1].layers[1].ffn_top = 6;
    const auto all = agreement_case_profile(obs, stop);
    EXPECT_EQ(all.pairs, 2u);
    EXPECT_EQ(all.stopword_fraction, 1.0);
    EXPECT_EQ(all.short_prefix_fraction, 0.5);
    obs[1].layers[1].ffn_top = 7;
    EXPECT_EQ(agreement_case_profile(obs, stop).stopword_fraction, 0.5);
}

TEST(AgreementProfile, StopWordsAreMostFrequent) {
    const auto p = scan_corpus();
    const auto stop = stop_words(p.corpus.vocab(), 5);
    ASSERT_EQ(stop.size(), 5u);
    std::vector<std::pair<std::size_t, TokenId>> counts;
    for (std::size_t t = kReservedTokens; t < p.corpus.vocab().size(); ++t) {
        counts.push_back({p.corpus.vocab().count(static_cast<TokenId>(t)), static_cast<TokenId>(t)});
    }
    std::stable_sort(counts.begin(), counts.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(stop.count(counts[i].second)) << counts[i].second;
    EXPECT_TRUE(stop.count(p.corpus.vocab().id("the")));
}

TEST(Residual, OutputRowIsIdentityAndLayersRecompute) {
    const auto p = scan_corpus();
    const Model m = corpus_model(p.corpus, 25);
    const auto sample = full_sample(p.corpus);
    const auto obs = observe_sample(m, p.corpus, sample);
    const auto rows = residual_stats(obs);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[2].layer, 3u);
    EXPECT_EQ(rows[2].match_fraction, 1.0);
    double conf = 0.0;
    for (const auto& o : obs) conf += o.final_prob;
    EXPECT_NEAR(rows[2].mean_prob, conf / obs.size(), 1e-7);

    for (std::size_t l = 0; l < 2; ++l) {
        std::size_t match = 0;
        double prob = 0.0;
        for (std::size_t i = 0; i < obs.size(); ++i) {
            const auto tokens = p.corpus.prefix_tokens(sample.prefixes[i]);
            const ForwardTrace t = m.forward(tokens);
            const std::size_t j = tokens.size() - 1;
            const auto zr = oracle::reference_vocab_logits(m.output_embedding(), t.layers[l].residual_in.row(j));
            std::vector<double> zf(t.logits.row(j).begin(), t.logits.row(j).end());
            const std::size_t w = oracle::linear_argmax(zf);
            match += oracle::linear_argmax(zr) == w ? 1 : 0;
            prob += oracle::ref_softmax(zr)[w];
        }
        EXPECT_DOUBLE_EQ(rows[l].match_fraction, static_cast<double>(match) / obs.size());
        EXPECT_NEAR(rows[l].mean_prob, prob / obs.size(), 1e-9);
    }
    EXPECT_EQ(residual_match_fraction(obs), (std::vector<double>{rows[0].match_fraction, rows[1].match_fraction, 1.0}));
    EXPECT_EQ(residual_stats(obs, true).back().match_fraction, 1.0);
}

TEST(Residual, ZeroResidualGivesUniformProbability) {
    const auto p = scan_corpus();
    ModelConfig cfg = testing::tiny_config(1, p.corpus.vocab().size());
    cfg.max_seq_len = 24;
    ModelWeights w = testing::random_weights(cfg, 26);
    w.token_embedding.fill(0.0f);
    w.positional_embedding.fill(0.0f);
    for (auto& t : w.tensors(cfg)) {
        if (t.name.rfind("layers.0.attn", 0) == 0) std::fill(t.data.begin(), t.data.end(), 0.0f);
    }
    const auto sample = draw_eval_sample(p.corpus, all_sentences(p.corpus), 20, 2);
    const auto obs = observe_sample(Model(cfg, w), p.corpus, sample);
    for (const auto& o : obs) {
        EXPECT_NEAR(o.layers[0].residual_prob, 1.0 / cfg.vocab_size, 1e-12);
        EXPECT_EQ(o.layers[0].residual_top, 0u);
    }
}

TEST(Residual, SingleLayerMatchesDirectCheck) {
    const auto p = scan_corpus();
    const Model m = corpus_model(p.corpus, 27, 1);
    const auto sample = draw_eval_sample(p.corpus, all_sentences(p.corpus), 80, 4);
    const auto obs = observe_sample(m, p.corpus, sample);
    std::size_t match = 0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
        const auto tokens = p.corpus.prefix_tokens(sample.prefixes[i]);
        const ForwardTrace t = m.forward(tokens);
        const std::size_t j = tokens.size() - 1;
        const auto pre = oracle::reference_vocab_logits(m.output_embedding(), t.layers[0].residual_in.row(j));
        std::vector<double> post(t.logits.row(j).begin(), t.logits.row(j).end());
        match += oracle::linear_argmax(pre) == oracle::linear_argmax(post) ? 1 : 0;
    }
    EXPECT_DOUBLE_EQ(residual_match_fraction(obs)[0], static_cast<double>(match) / obs.size());
}

TEST(CaseCounts, FractionsSumToOneAndCsv) {
    const auto p = scan_corpus();
    const Model m = corpus_model(p.corpus, 28);
    const auto obs = observe_sample(m, p.corpus, full_sample(p.corpus));
    const auto counts = prediction_case_counts(obs);
    ASSERT_EQ(counts.size(), 2u);
    for (const auto& c : counts) {
        EXPECT_EQ(c.total(), obs.size());
        double sum = 0.0;
        for (auto pc : kPredictionCases) sum += c.fraction(pc);
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    const std::string csv = prediction_case_csv(counts);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,residual,ffn,agreement,composition");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);

    std::vector<CompositionalityStats> comp{compositional_fraction(obs, 1), compositional_fraction(obs, 2)};
    EXPECT_EQ(compositional_csv(comp).substr(0, 29), "layer,compositional_fraction\n");
    const auto rows = residual_stats(obs);
    EXPECT_EQ(residual_match_csv(rows).substr(0, 21), "layer,match_fraction\n");
    EXPECT_EQ(residual_prob_csv(rows).substr(0, 16), "layer,mean_prob\n");
}

TEST(CompositionCandidates, LastLayerCompositionOnly) {
    const auto p = scan_corpus();
    const Model m = corpus_model(p.corpus, 29);
    const auto obs = observe_sample(m, p.corpus, full_sample(p.corpus));
    const auto j = composition_candidates_json(obs, p.corpus);
    std::size_t expected = 0;
    for (const auto& o : obs) expected += o.layers.back().prediction == PredictionCase::composition ? 1 : 0;
    ASSERT_EQ(j.size(), expected);
    for (const auto& c : j) {
        EXPECT_EQ(c["layer"], 2);
        EXPECT_NE(c["output_top"], c["residual_top"]);
        EXPECT_NE(c["output_top"], c["ffn_top"]);
        EXPECT_FALSE(c["text"].get<std::string>().empty());
    }
}

}  // namespace
}  // namespace ffkv
