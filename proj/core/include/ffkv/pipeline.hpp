#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ffkv/checkpoint.hpp"
#include "ffkv/corpus.hpp"
#include "ffkv/model.hpp"
#include "ffkv/trainer.hpp"
#include "ffkv/triggers.hpp"

namespace ffkv {

struct CorpusConfig {
    std::filesystem::path path;
    std::size_t max_vocab = 1997;  // plus the three reserved ids
    double val_fraction = 0.1;
};

struct AnalysisConfig {
    std::size_t t = 50;                       // triggers kept per key
    std::size_t task_t = 25;                  // prefixes per annotation task
    std::size_t task_keys_per_layer = 10;
    std::size_t mutation_keys_per_layer = 10;
    std::size_t sample_size = 0;              // 0: min(4000, 20% of validation prefixes)
    std::size_t confidence_bins = 10;
    std::size_t predictive_values = 20;
    std::size_t stop_words = 100;
    std::uint64_t seed = 7;
    std::size_t workers = 0;
};

struct PipelineConfig {
    ModelConfig model;
    TrainConfig train;
    CorpusConfig corpus;
    AnalysisConfig analysis;
    std::filesystem::path checkpoint;
    std::filesystem::path out;
};

nlohmann::json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

/// Everything the analysis stages read: the checkpoint and the corpus encoded
/// with the vocabulary rebuilt from the training split.
struct Workspace {
    PipelineConfig config;
    Model model;
    nlohmann::json metadata;
    PreparedCorpus data;
};

/// SHA-256 over the vocabulary's tokens in id order; stored in checkpoints at
/// training time so analyses can detect a mismatched corpus.
std::string vocab_fingerprint(const Vocab& vocab);

/// Throws InputError naming the checkpoint or corpus path when it is missing.
Workspace load_workspace(const PipelineConfig& config);
PreparedCorpus load_corpus(const CorpusConfig& config, std::size_t max_len);

struct Artifact {
    std::string id;    // e.g. "fig4"
    std::string file;  // relative to the report directory
};

/// Figure/table artifacts in manifest order.
const std::vector<Artifact>& figure_artifacts();
/// Support files the server reads, written alongside the figures.
const std::vector<Artifact>& support_artifacts();
std::string artifact_file(const std::string& id);

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kTriggersFile = "triggers.jsonl";
inline constexpr const char* kVocabFile = "vocab.tsv";

ScanResult stage_scan(const Workspace& ws, const std::filesystem::path& out);
void stage_mutation(const Workspace& ws, const std::vector<KeyTriggers>& keys, const std::filesystem::path& out);
void stage_values(const Workspace& ws, const std::vector<KeyTriggers>& keys, const std::filesystem::path& out);
void stage_aggregation(const Workspace& ws, const std::filesystem::path& out);
void stage_export(const Workspace& ws, const std::vector<KeyTriggers>& keys, const std::filesystem::path& out);

/// SHA-256 of a file, or of every file under a directory in path order.
std::string hash_path(const std::filesystem::path& path);
std::string input_hash(const PipelineConfig& config, const std::string& checkpoint_sha,
                       const std::string& corpus_sha);

struct PipelineResult {
    std::filesystem::path out;
    nlohmann::json manifest;
};

/// scan -> mutation -> values -> aggregation -> export, then the manifest. On a
/// stage failure the manifest records the stage and marks written artifacts
/// stale, and StageError is thrown.
PipelineResult run_pipeline(const PipelineConfig& config,
                            const std::function<void(const std::string&, double)>& on_stage = {});

}  // namespace ffkv
