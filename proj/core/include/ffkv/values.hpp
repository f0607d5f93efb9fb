#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ffkv/corpus.hpp"
#include "ffkv/model.hpp"
#include "ffkv/triggers.hpp"

namespace ffkv {

/// softmax(v E^T) for the value vector of `cell`, without layernorm.
VocabDistribution value_distribution(const Model& model, const MemoryCellRef& cell);

struct CellValueStats {
    MemoryCellRef cell;
    bool dead = true;          // no trigger with a positive coefficient
    TokenId top_token = 0;     // top(p)
    float max_prob = 0.0f;
    TokenId target = kEosId;   // next token of the rank-0 trigger example
    std::size_t target_rank = 0;

    bool agrees() const noexcept { return !dead && top_token == target; }
};

/// One entry per scanned key, in the scan's key order.
std::vector<CellValueStats> cell_value_stats(const Model& model, std::span<const KeyTriggers> keys);

struct LayerAgreement {
    std::size_t layer = 0;
    double rate = 0.0;  // NaN when every cell of the layer is dead
    std::size_t evaluated = 0;
    std::size_t agreeing = 0;
    std::size_t dead = 0;
};

/// Requires stats for every cell of `layer`.
LayerAgreement agreement_rate(const ModelConfig& config, std::span<const CellValueStats> stats, std::size_t layer);

/// Buckets [0,0], [1,1], [2,3], [4,7], ... covering ranks below vocab_size.
struct RankBucket {
    std::size_t lo = 0;
    std::size_t hi = 0;
    std::size_t count = 0;
};

struct RankHistogram {
    std::size_t layer = 0;
    std::vector<std::size_t> ranks;  // one per evaluated cell, in cell order
    std::vector<RankBucket> buckets;
    std::size_t dead = 0;
};

std::vector<RankBucket> rank_buckets(std::size_t vocab_size);
RankHistogram next_token_rank_distribution(const ModelConfig& config, std::span<const CellValueStats> stats,
                                           std::size_t layer);

struct ConfidenceBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    std::size_t agreeing = 0;
    double rate = 0.0;  // NaN for an empty bin

    bool empty() const noexcept { return count == 0; }
};

/// Equal-width bins over the observed max_prob range of the live cells.
std::vector<ConfidenceBin> agreement_by_confidence(std::span<const CellValueStats> stats, std::size_t bins);

struct PredictiveValue {
    MemoryCellRef cell;
    TokenId top_token = 0;
    float max_prob = 0.0f;
    double precision = 0.0;
    std::size_t matched = 0;
    std::size_t used = 0;      // trigger examples considered
    bool truncated = false;    // fewer than t triggers were available
};

/// The n live cells with the highest max_prob (ties by layer then cell), each with
/// the fraction of its top-t triggers whose next token is the value's top token.
std::vector<PredictiveValue> detect_predictive_values(std::span<const CellValueStats> stats,
                                                      std::span<const KeyTriggers> keys, std::size_t n,
                                                      std::size_t t);

std::string agreement_csv(std::span<const LayerAgreement> rows);
std::string rank_histogram_csv(std::span<const RankHistogram> rows);
std::string confidence_csv(std::span<const ConfidenceBin> bins);
nlohmann::json predictive_values_json(std::span<const PredictiveValue> values, const Vocab& vocab, std::size_t t);

}  // namespace ffkv
