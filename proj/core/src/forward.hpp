#pragma once

// Shared forward pass. Model::forward exposes a subset of these activations as
// a ForwardTrace; the trainer keeps all of them for the backward pass.

#include <span>
#include <vector>

#include "ffkv/model.hpp"

namespace ffkv::detail {

struct LayerActivations {
    Matrix resid_in;   // stream entering the layer
    Matrix ln1_hat;    // normalized input of ln1
    Vector ln1_rstd;
    Matrix ln1_out;
    Matrix q, k, v;
    std::vector<float> attn_probs;  // heads x n x n, row i uses columns 0..i
    Matrix ctx;
    Matrix resid_mid;  // r
    Matrix ln2_hat;
    Vector ln2_rstd;
    Matrix ff_in;      // x
    Matrix pre_act;    // x K^T + b1
    Matrix coeff;      // m
    Matrix ff_out;     // y
    Matrix out;        // o
};

struct Activations {
    std::size_t n = 0;
    std::vector<LayerActivations> layers;
    Matrix final_hat;
    Vector final_rstd;
    Matrix final_out;
    Matrix logits;
};

void run_forward(const ModelConfig& config, const ModelWeights& weights, const Matrix& output_embedding,
                 std::span<const TokenId> tokens, const ForwardOptions& options, Activations& act);

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens);

}  // namespace ffkv::detail
