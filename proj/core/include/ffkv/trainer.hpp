#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "ffkv/corpus.hpp"
#include "ffkv/model.hpp"
#include "ffkv/rng.hpp"

namespace ffkv {

struct TrainConfig {
    std::size_t batch_size = 8;
    std::size_t seq_len = 64;
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t max_steps = 1000;
    std::size_t eval_interval = 100;
    std::size_t warmup_steps = 100;
    std::size_t eval_windows = 64;
    std::uint64_t seed = 1;
    double gradient_clip_norm = 1.0;

    void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// A sequence of seq_len + 1 tokens: inputs are [0, n), targets are [1, n].
using TrainSequence = std::vector<TokenId>;

struct LossAndGrads {
    double loss = 0.0;            // mean cross-entropy over predicted positions
    std::size_t predicted = 0;
    ModelWeights grads;            // same layout as the model's weights
};

LossAndGrads loss_and_grads(const Model& model, std::span<const TrainSequence> batch);
double evaluate_loss(const Model& model, std::span<const TrainSequence> batch);

/// Sentences joined end to end with an eos after each.
class TokenStream {
public:
    TokenStream(const Corpus& corpus, std::span<const std::size_t> sentence_ids);

    std::size_t size() const noexcept { return tokens_.size(); }
    std::span<const TokenId> tokens() const noexcept { return tokens_; }

    /// Windows starting at uniformly chosen sentence starts, wrapping at the end.
    std::vector<TrainSequence> sample(Rng& rng, std::size_t batch, std::size_t seq_len) const;
    /// Consecutive non-overlapping windows from the start of the stream.
    std::vector<TrainSequence> windows(std::size_t seq_len, std::size_t max_windows) const;

private:
    std::vector<TokenId> tokens_;
    std::vector<std::size_t> starts_;
};

/// Cross-entropy of an add-one-smoothed unigram model fit on `train`, over the
/// target positions of `windows`.
double unigram_cross_entropy(const TokenStream& train, std::span<const TrainSequence> windows,
                             std::size_t vocab_size);

struct LossRecord {
    std::size_t step = 0;
    double loss = 0.0;
    std::optional<double> val_loss;
};

struct TrainOptions {
    std::filesystem::path checkpoint;  // written at every eval and at the end
    std::filesystem::path loss_log;    // CSV step,loss,val_loss; appended
    bool resume = false;               // continue from `checkpoint` if it exists
    nlohmann::json metadata = nlohmann::json::object();  // merged into the checkpoint header
};

struct TrainResult {
    ModelWeights weights;
    std::vector<LossRecord> log;
    std::size_t steps = 0;
    double val_loss = 0.0;
    double unigram_val_loss = 0.0;
};

TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config, const Corpus& corpus,
                  const CorpusSplit& split, const TrainOptions& options);

}  // namespace ffkv
