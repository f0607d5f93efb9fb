#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "ffkv/corpus.hpp"
#include "ffkv/model.hpp"

namespace ffkv {

struct EvalSample {
    std::vector<Prefix> prefixes;  // corpus order
    std::uint64_t seed = 0;
    std::size_t population = 0;    // prefixes available to sample from
};

/// min(4000, 20% of the available prefixes), at least one when any exist.
std::size_t default_sample_size(std::size_t population);

/// Uniform without replacement over every prefix of the given sentences.
EvalSample draw_eval_sample(const Corpus& corpus, std::span<const std::size_t> sentence_ids, std::size_t size,
                            std::uint64_t seed);

enum class PredictionCase { residual, ffn, agreement, composition };

std::string to_string(PredictionCase c);
inline constexpr PredictionCase kPredictionCases[] = {PredictionCase::residual, PredictionCase::ffn,
                                                      PredictionCase::agreement, PredictionCase::composition};

/// R = top(r), F = top(y), O = top(o). Throws InvariantViolation for R = F != O.
PredictionCase prediction_case(TokenId residual_top, TokenId ffn_top, TokenId output_top);

/// Classifies from the projected logits of r and y. The output's logits are
/// their sum, which is o E^T by linearity.
PredictionCase prediction_case(std::span<const double> residual_logits, std::span<const double> ffn_logits);

enum class Compositionality { compositional, not_compositional, inactive };

/// compositional iff top(v_i) != top(y) for every cell with m_i > 0.
Compositionality layer_compositionality(std::span<const float> coefficients, std::span<const TokenId> value_tops,
                                        TokenId ffn_top);

/// top(v_i) of every cell of every layer under the raw projection.
std::vector<std::vector<TokenId>> value_top_tokens(const Model& model);

struct LayerObservation {
    std::size_t active = 0;
    Compositionality compositionality = Compositionality::inactive;
    bool memory_agrees = false;  // some active cell's top(v_i) equals top(y)
    TokenId residual_top = 0;
    TokenId ffn_top = 0;
    TokenId output_top = 0;
    PredictionCase prediction = PredictionCase::agreement;
    double residual_prob = 0.0;   // softmax(r E^T)[final prediction]
    TokenId residual_top_ln = 0;  // layernormed projection variant
    double residual_prob_ln = 0.0;
};

struct ExampleObservation {
    Prefix prefix;
    TokenId final_top = 0;    // top of the model's own logits
    double final_prob = 0.0;  // model's probability of final_top
    TokenId output_path_top = 0;    // final layernorm and E applied to o^L again
    double output_path_prob = 0.0;
    std::vector<LayerObservation> layers;
};

struct ObserveOptions {
    std::size_t workers = 0;
};

std::vector<ExampleObservation> observe_sample(const Model& model, const Corpus& corpus, const EvalSample& sample,
                                               const ObserveOptions& options = {});

struct FractionSummary {
    std::size_t layer = 0;
    std::vector<double> fractions;  // per example, sample order
    double p25 = 0.0, p50 = 0.0, p75 = 0.0, mean = 0.0;
};

FractionSummary active_memory_fraction(std::span<const ExampleObservation> obs, std::size_t layer,
                                       std::size_t d_ff);

struct CompositionalityStats {
    std::size_t layer = 0;
    std::size_t compositional = 0;
    std::size_t not_compositional = 0;
    std::size_t inactive = 0;
    double fraction = 0.0;  // compositional / examples with an active cell; NaN if none
};

CompositionalityStats compositional_fraction(std::span<const ExampleObservation> obs, std::size_t layer);

struct AgreementProfile {
    std::size_t pairs = 0;  // (example, layer) pairs with an agreeing active memory
    double stopword_fraction = 0.0;
    double short_prefix_fraction = 0.0;
    bool empty() const noexcept { return pairs == 0; }
};

inline constexpr std::size_t kShortPrefixLength = 5;
std::unordered_set<TokenId> stop_words(const Vocab& vocab, std::size_t n = 100);
AgreementProfile agreement_case_profile(std::span<const ExampleObservation> obs,
                                        const std::unordered_set<TokenId>& stop_words);

/// Per layer 1..L, then the model output itself as layer L+1.
struct ResidualRow {
    std::size_t layer = 0;
    double match_fraction = 0.0;
    double mean_prob = 0.0;
};

std::vector<ResidualRow> residual_stats(std::span<const ExampleObservation> obs, bool layernormed = false);
/// Fraction of examples with top(r) equal to the model's prediction; index l-1 is layer l.
std::vector<double> residual_match_fraction(std::span<const ExampleObservation> obs, bool layernormed = false);
/// Mean residual probability of the model's prediction; index l-1 is layer l.
std::vector<double> residual_final_token_probability(std::span<const ExampleObservation> obs,
                                                     bool layernormed = false);

struct CaseCounts {
    std::size_t layer = 0;
    std::array<std::size_t, 4> counts{};  // kPredictionCases order
    std::size_t total() const { return counts[0] + counts[1] + counts[2] + counts[3]; }
    double fraction(PredictionCase c) const;
};

std::vector<CaseCounts> prediction_case_counts(std::span<const ExampleObservation> obs);

std::string active_fraction_csv(std::span<const FractionSummary> rows);
std::string compositional_csv(std::span<const CompositionalityStats> rows);
std::string residual_match_csv(std::span<const ResidualRow> rows);
std::string residual_prob_csv(std::span<const ResidualRow> rows);
std::string prediction_case_csv(std::span<const CaseCounts> rows);

/// Last-layer examples whose output top token differs from both the residual's
/// and the feed-forward output's, for human review.
nlohmann::json composition_candidates_json(std::span<const ExampleObservation> obs, const Corpus& corpus);
nlohmann::json agreement_profile_json(const AgreementProfile& p);

}  // namespace ffkv
