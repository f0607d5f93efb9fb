#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ffkv/corpus.hpp"
#include "ffkv/model.hpp"
#include "ffkv/rng.hpp"

namespace ffkv {

struct TriggerExample {
    MemoryCellRef key;
    Prefix prefix;
    float coefficient = 0.0f;
    std::size_t rank = 0;  // 0 = highest coefficient

    TokenId next_token() const noexcept { return prefix.next_token; }
    bool operator==(const TriggerExample&) const = default;
};

struct KeyTriggers {
    MemoryCellRef key;
    std::vector<TriggerExample> triggers;
    std::uint64_t positive_prefixes = 0;  // prefixes with coefficient > 0

    bool dead() const noexcept { return triggers.empty() || !(triggers.front().coefficient > 0.0f); }
    bool operator==(const KeyTriggers&) const = default;
};

/// `per_layer` distinct cells from every layer, uniform without replacement.
std::vector<MemoryCellRef> sample_keys(const ModelConfig& config, std::size_t per_layer, std::uint64_t seed);
std::vector<MemoryCellRef> all_keys(const ModelConfig& config);
std::vector<MemoryCellRef> layer_keys(const ModelConfig& config, std::size_t layer);

struct ScanOptions {
    std::size_t t = 50;
    std::size_t workers = 0;  // 0 picks the hardware concurrency
};

struct ScanResult {
    std::vector<KeyTriggers> keys;  // same order as the requested keys
    std::size_t forward_passes = 0;
    std::size_t prefixes = 0;

    const KeyTriggers& find(const MemoryCellRef& key) const;
};

/// Coefficient of every requested key at the last position of every prefix of
/// the given sentences, keeping the top t per key. One forward pass per sentence.
ScanResult scan_triggers(const Model& model, const Corpus& corpus, std::span<const std::size_t> sentence_ids,
                         std::span<const MemoryCellRef> keys, const ScanOptions& options);

enum class MutationVariant { drop_first, drop_last, drop_random };

std::string to_string(MutationVariant v);
MutationVariant mutation_variant_from_string(const std::string& s);
inline constexpr MutationVariant kMutationVariants[] = {MutationVariant::drop_first, MutationVariant::drop_last,
                                                        MutationVariant::drop_random};

struct MutationChange {
    std::size_t rank = 0;
    float original = 0.0f;
    float mutated = 0.0f;
    double relative_change = 0.0;
};

struct MutationReport {
    MemoryCellRef key;
    MutationVariant variant = MutationVariant::drop_first;
    double mean_relative_change = 0.0;
    std::vector<MutationChange> changes;
    std::size_t ineligible = 0;     // prefix too short for the variant
    std::size_t zero_original = 0;  // original coefficient 0, change undefined

    bool empty() const noexcept { return changes.empty(); }
};

/// The mutated token sequence. drop_random removes a uniformly chosen interior
/// token. Throws InputError when the prefix is too short for the variant.
std::vector<TokenId> mutate_tokens(std::span<const TokenId> tokens, MutationVariant variant, Rng& rng);
std::size_t min_mutation_length(MutationVariant variant);

/// Rng stream used for drop_random on one example.
Rng mutation_rng(std::uint64_t seed, const MemoryCellRef& key, std::size_t rank);

/// Coefficient of `key` at the last position of `tokens`.
float coefficient_at_end(const Model& model, const MemoryCellRef& key, std::span<const TokenId> tokens);

MutationReport mutate_and_compare(const Model& model, const Corpus& corpus, const KeyTriggers& key,
                                  MutationVariant variant, std::uint64_t seed);

/// JSON lines, one key per line.
void write_trigger_dump(const std::filesystem::path& path, const ScanResult& scan, const Corpus& corpus);
std::vector<KeyTriggers> read_trigger_dump(const std::filesystem::path& path);
std::string trigger_record_json(const KeyTriggers& key, const Corpus& corpus);

}  // namespace ffkv
