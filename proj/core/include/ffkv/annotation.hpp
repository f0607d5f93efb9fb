#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ffkv/corpus.hpp"
#include "ffkv/model.hpp"
#include "ffkv/triggers.hpp"

namespace ffkv {

enum class PatternClass { shallow, semantic };

std::string to_string(PatternClass c);
PatternClass pattern_class_from_string(const std::string& s);

struct Pattern {
    std::string pattern_id;
    std::string description;
    PatternClass pattern_class = PatternClass::shallow;
    bool operator==(const Pattern&) const = default;
};

inline constexpr std::size_t kGroundingThreshold = 3;

struct AnnotationSet {
    MemoryCellRef key;
    std::vector<Pattern> patterns;
    std::map<std::size_t, std::vector<std::string>> assignments;  // prefix rank -> pattern ids
    std::string annotator;
    std::string timestamp;
    std::size_t num_prefixes = 25;  // prefixes shown to the annotator

    /// Throws ValidationError listing unknown or duplicate pattern ids and
    /// out-of-range prefix ranks.
    void validate() const;
    /// Number of prefixes each pattern is assigned to.
    std::map<std::string, std::size_t> pattern_support() const;
    bool grounded(const std::string& pattern_id) const;

    bool operator==(const AnnotationSet&) const = default;
};

nlohmann::json to_json(const AnnotationSet& a);
/// Parses and validates; malformed documents raise ValidationError.
AnnotationSet annotation_from_json(const nlohmann::json& j);

struct LayerCoverage {
    std::size_t layer = 0;
    std::size_t shallow_only = 0;
    std::size_t semantic_only = 0;
    std::size_t both = 0;
    std::size_t not_covered = 0;

    std::size_t total() const { return shallow_only + semantic_only + both + not_covered; }
    double fraction(std::size_t count) const;
};

struct CoverageBreakdown {
    std::vector<LayerCoverage> layers;  // ascending layer, only annotated layers
};

/// Classifies each annotated prefix by the classes of its grounded patterns.
CoverageBreakdown coverage_breakdown(std::span<const AnnotationSet> annotations);
nlohmann::json to_json(const CoverageBreakdown& c);

struct TaskPrefix {
    std::size_t rank = 0;
    std::size_t sentence_id = 0;
    std::size_t end_index = 0;
    std::string text;
    float coefficient = 0.0f;
    TokenId next_token_id = 0;
    std::string next_token;
    bool operator==(const TaskPrefix&) const = default;
};

struct AnnotationTask {
    MemoryCellRef key;
    std::size_t t = 25;
    std::vector<TaskPrefix> prefixes;
    bool truncated = false;    // fewer than t prefixes were available
    bool no_triggers = false;  // no prefix activated the key
    AnnotationSet scaffold;
    bool operator==(const AnnotationTask&) const = default;
};

std::vector<AnnotationTask> export_annotation_tasks(std::span<const KeyTriggers> keys, const Corpus& corpus,
                                                    std::size_t t = 25);
nlohmann::json tasks_to_json(std::span<const AnnotationTask> tasks);
std::vector<AnnotationTask> tasks_from_json(const nlohmann::json& j);

struct StoredAnnotation {
    AnnotationSet set;
    std::uint64_t revision = 0;
};

/// Append-only JSON-lines journal; the latest record per key wins on replay.
class AnnotationStore {
public:
    explicit AnnotationStore(std::filesystem::path journal);

    /// Validates, assigns the next revision, appends and flushes before returning.
    StoredAnnotation put(AnnotationSet set);
    std::optional<StoredAnnotation> get(const MemoryCellRef& key) const;
    std::vector<StoredAnnotation> all() const;
    std::uint64_t revision() const;

private:
    std::filesystem::path journal_;
    mutable std::mutex mutex_;
    std::map<MemoryCellRef, StoredAnnotation> current_;
    std::uint64_t revision_ = 0;
};

}  // namespace ffkv
