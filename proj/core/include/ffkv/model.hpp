#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ffkv/numerics.hpp"

namespace ffkv {

using TokenId = std::uint32_t;

enum class Nonlinearity { relu, softmax_memory };

std::string to_string(Nonlinearity n);
Nonlinearity nonlinearity_from_string(const std::string& s);

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t d_ff = 256;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 2000;
    std::size_t max_seq_len = 64;
    bool tie_embeddings = false;
    Nonlinearity nonlinearity = Nonlinearity::relu;

    std::size_t head_dim() const { return d_model / n_heads; }
    /// Throws InputError when the hyperparameters are inconsistent.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// A memory cell: key row and value row `cell` of feed-forward layer `layer`.
/// `layer` is 1-based, matching how layers are reported everywhere.
struct MemoryCellRef {
    std::size_t layer = 1;
    std::size_t cell = 0;

    std::size_t layer_index() const { return layer - 1; }

    auto operator<=>(const MemoryCellRef&) const = default;
};

struct LayerWeights {
    Vector ln1_gain, ln1_bias;
    Matrix attn_q, attn_k, attn_v, attn_o;  // (out x in)
    Vector attn_q_bias, attn_k_bias, attn_v_bias, attn_o_bias;
    Vector ln2_gain, ln2_bias;
    Matrix ff_keys;       // K: d_ff x d_model
    Vector ff_key_bias;   // b1: d_ff
    Matrix ff_values;     // V: d_ff x d_model
    Vector ff_value_bias; // b: d_model

    bool operator==(const LayerWeights&) const = default;
};

struct TensorView {
    std::string name;
    std::vector<std::size_t> shape;
    std::span<float> data;
};

struct ConstTensorView {
    std::string name;
    std::vector<std::size_t> shape;
    std::span<const float> data;
};

struct ModelWeights {
    Matrix token_embedding;       // vocab x d
    Matrix positional_embedding;  // max_seq_len x d
    std::vector<LayerWeights> layers;
    Vector final_gain, final_bias;
    Matrix output_embedding;      // vocab x d; left empty when embeddings are tied

    /// Correctly shaped weights (zeros; layernorm gains one).
    static ModelWeights zeros(const ModelConfig& config);

    /// Every stored tensor in checkpoint directory order. The tied output
    /// embedding is not a separate tensor and is not listed.
    std::vector<TensorView> tensors(const ModelConfig& config);
    std::vector<ConstTensorView> tensors(const ModelConfig& config) const;

    bool operator==(const ModelWeights&) const = default;
};

/// normal(0, 0.02) matrices, zero biases, unit layernorm gains.
ModelWeights initialize_weights(const ModelConfig& config, std::uint64_t seed);

/// Per layer, one row per position.
struct LayerTrace {
    Matrix ff_input;      // x = LayerNorm(r)          n x d
    Matrix coefficients;  // m = f(x K^T + b1)         n x d_ff
    Matrix ff_output;     // y = m V + b               n x d
    Matrix residual_in;   // r (after attention add)   n x d
    Matrix layer_out;     // o = y + r                 n x d
};

struct ForwardTrace {
    std::size_t length = 0;
    std::vector<LayerTrace> layers;
    Matrix logits;  // n x vocab; empty when not requested
};

struct ForwardOptions {
    bool compute_logits = true;
    /// Stop after this many layers (0 runs all). Later layers are absent from the trace.
    std::size_t max_layers = 0;
};

struct FeedForwardResult {
    Vector coefficients;
    Vector output;
};

/// Probability vector over the vocabulary with the ranking it induces.
/// Ranks are ordered by the pre-softmax scores (a monotone image of the
/// probabilities that does not lose order to float underflow); ties go to the
/// lower token id.
class VocabDistribution {
public:
    static VocabDistribution from_logits(std::span<const double> logits, double scale = 1.0);

    const Vector& probs() const noexcept { return probs_; }
    TokenId top_token() const noexcept { return order_.front(); }
    float max_prob() const { return probs_[order_.front()]; }
    std::size_t rank(TokenId token) const { return rank_.at(token); }
    /// Tokens in rank order.
    const std::vector<TokenId>& order() const noexcept { return order_; }

private:
    Vector probs_;
    std::vector<TokenId> order_;
    std::vector<std::uint32_t> rank_;
};

class Model {
public:
    Model(ModelConfig config, ModelWeights weights);

    const ModelConfig& config() const noexcept { return config_; }
    const ModelWeights& weights() const noexcept { return weights_; }
    ModelWeights& mutable_weights() noexcept { return weights_; }

    /// E (vocab x d); the token embedding when tied.
    const Matrix& output_embedding() const noexcept;

    /// ReLU feed-forward of layer `layer` (0-based): m = relu(x K^T + b1), y = m V + b.
    FeedForwardResult ff_forward(std::span<const float> x, std::size_t layer) const;
    /// Softmax-normalized memory: p = softmax(x K^T + b1), out = p V + b.
    FeedForwardResult neural_memory_forward(std::span<const float> x, std::size_t layer) const;

    ForwardTrace forward(std::span<const TokenId> tokens, ForwardOptions options = {}) const;

    /// Raw h E^T in double, no layernorm.
    std::vector<double> vocab_logits(std::span<const float> h) const;
    /// Final layernorm then E^T in double (the layernormed projection variant).
    std::vector<double> layernormed_vocab_logits(std::span<const float> h) const;
    /// Final layernorm then E^T through the same kernel the forward pass uses.
    Vector output_logits(std::span<const float> layer_out) const;

    /// softmax(scale * h E^T), no layernorm.
    VocabDistribution project_to_vocab(std::span<const float> h, double scale = 1.0) const;

private:
    void check_layer(std::size_t layer) const;

    ModelConfig config_;
    ModelWeights weights_;
};

}  // namespace ffkv
