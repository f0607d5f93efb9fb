#include "ffkv/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ffkv/error.hpp"
#include "ffkv/rng.hpp"
#include "forward.hpp"

namespace ffkv {

std::string to_string(Nonlinearity n) { return n == Nonlinearity::relu ? "relu" : "softmax_memory"; }

Nonlinearity nonlinearity_from_string(const std::string& s) {
    if (s == "relu") {
        return Nonlinearity::relu;
    }
    if (s == "softmax_memory") {
        return Nonlinearity::softmax_memory;
    }
    throw InputError("unknown nonlinearity '" + s + "'");
}

void ModelConfig::validate() const {
    if (n_layers < 1) {
        throw InputError("n_layers must be at least 1");
    }
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
        throw InputError("d_model must be a positive multiple of n_heads");
    }
    if (d_ff < 1) {
        throw InputError("d_ff must be at least 1");
    }
    if (vocab_size < 2) {
        throw InputError("vocab_size must be at least 2");
    }
    if (max_seq_len < 1) {
        throw InputError("max_seq_len must be at least 1");
    }
}

ModelWeights ModelWeights::zeros(const ModelConfig& c) {
    c.validate();
    const std::size_t d = c.d_model;
    ModelWeights w;
    w.token_embedding = Matrix(c.vocab_size, d);
    w.positional_embedding = Matrix(c.max_seq_len, d);
    w.layers.resize(c.n_layers);
    for (auto& l : w.layers) {
        l.ln1_gain.assign(d, 1.0f);
        l.ln1_bias.assign(d, 0.0f);
        l.attn_q = l.attn_k = l.attn_v = l.attn_o = Matrix(d, d);
        l.attn_q_bias.assign(d, 0.0f);
        l.attn_k_bias.assign(d, 0.0f);
        l.attn_v_bias.assign(d, 0.0f);
        l.attn_o_bias.assign(d, 0.0f);
        l.ln2_gain.assign(d, 1.0f);
        l.ln2_bias.assign(d, 0.0f);
        l.ff_keys = Matrix(c.d_ff, d);
        l.ff_key_bias.assign(c.d_ff, 0.0f);
        l.ff_values = Matrix(c.d_ff, d);
        l.ff_value_bias.assign(d, 0.0f);
    }
    w.final_gain.assign(d, 1.0f);
    w.final_bias.assign(d, 0.0f);
    if (!c.tie_embeddings) {
        w.output_embedding = Matrix(c.vocab_size, d);
    }
    return w;
}

namespace {

template <typename View, typename Weights>
std::vector<View> collect_tensors(Weights& w, const ModelConfig& c) {
    std::vector<View> out;
    auto mat = [&](std::string name, auto& m) {
        out.push_back(View{std::move(name), {m.rows(), m.cols()}, m.values()});
    };
    auto vec = [&](std::string name, auto& v) {
        out.push_back(View{std::move(name), {v.size()}, {v.data(), v.size()}});
    };
    mat("token_embedding", w.token_embedding);
    mat("positional_embedding", w.positional_embedding);
    for (std::size_t i = 0; i < w.layers.size(); ++i) {
        auto& l = w.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        vec(p + "ln1.gain", l.ln1_gain);
        vec(p + "ln1.bias", l.ln1_bias);
        mat(p + "attn.q.weight", l.attn_q);
        vec(p + "attn.q.bias", l.attn_q_bias);
        mat(p + "attn.k.weight", l.attn_k);
        vec(p + "attn.k.bias", l.attn_k_bias);
        mat(p + "attn.v.weight", l.attn_v);
        vec(p + "attn.v.bias", l.attn_v_bias);
        mat(p + "attn.o.weight", l.attn_o);
        vec(p + "attn.o.bias", l.attn_o_bias);
        vec(p + "ln2.gain", l.ln2_gain);
        vec(p + "ln2.bias", l.ln2_bias);
        mat(p + "ff.keys", l.ff_keys);
        vec(p + "ff.key_bias", l.ff_key_bias);
        mat(p + "ff.values", l.ff_values);
        vec(p + "ff.value_bias", l.ff_value_bias);
    }
    vec("final_ln.gain", w.final_gain);
    vec("final_ln.bias", w.final_bias);
    if (!c.tie_embeddings) {
        mat("output_embedding", w.output_embedding);
    }
    return out;
}

}  // namespace

std::vector<TensorView> ModelWeights::tensors(const ModelConfig& config) {
    return collect_tensors<TensorView>(*this, config);
}

std::vector<ConstTensorView> ModelWeights::tensors(const ModelConfig& config) const {
    return collect_tensors<ConstTensorView>(*this, config);
}

ModelWeights initialize_weights(const ModelConfig& config, std::uint64_t seed) {
    ModelWeights w = ModelWeights::zeros(config);
    Rng rng(seed);
    for (auto& t : w.tensors(config)) {
        if (t.shape.size() == 2) {
            for (float& x : t.data) {
                x = static_cast<float>(0.02 * rng.normal());
            }
        }
    }
    return w;
}

VocabDistribution VocabDistribution::from_logits(std::span<const double> logits, double scale) {
    if (logits.empty()) {
        throw InputError("vocab distribution over an empty vocabulary");
    }
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& z : scaled) {
        z *= scale;
    }
    const std::vector<double> p = softmax(std::span<const double>(scaled));
    VocabDistribution out;
    out.probs_.assign(p.begin(), p.end());
    out.order_.resize(scaled.size());
    std::iota(out.order_.begin(), out.order_.end(), TokenId{0});
    std::stable_sort(out.order_.begin(), out.order_.end(),
                     [&](TokenId a, TokenId b) { return scaled[a] > scaled[b]; });
    out.rank_.resize(scaled.size());
    for (std::size_t r = 0; r < out.order_.size(); ++r) {
        out.rank_[out.order_[r]] = static_cast<std::uint32_t>(r);
    }
    return out;
}

Model::Model(ModelConfig config, ModelWeights weights) : config_(config), weights_(std::move(weights)) {
    config_.validate();
    const ModelWeights expected = ModelWeights::zeros(config_);
    const auto want = expected.tensors(config_);
    const auto have = weights_.tensors(config_);
    if (want.size() != have.size() || weights_.layers.size() != config_.n_layers) {
        throw InputError("model weights do not match config layer count");
    }
    for (std::size_t i = 0; i < want.size(); ++i) {
        if (want[i].shape != have[i].shape || want[i].data.size() != have[i].data.size()) {
            throw InputError("tensor '" + want[i].name + "' has the wrong shape for this config");
        }
    }
}

const Matrix& Model::output_embedding() const noexcept {
    return config_.tie_embeddings ? weights_.token_embedding : weights_.output_embedding;
}

void Model::check_layer(std::size_t layer) const {
    if (layer >= config_.n_layers) {
        throw InputError("layer index " + std::to_string(layer) + " out of range (model has " +
                         std::to_string(config_.n_layers) + " layers)");
    }
}

FeedForwardResult Model::ff_forward(std::span<const float> x, std::size_t layer) const {
    check_layer(layer);
    if (x.size() != config_.d_model) {
        throw InputError("ff_forward: input length != d_model");
    }
    const auto& l = weights_.layers[layer];
    FeedForwardResult r;
    r.coefficients.resize(config_.d_ff);
    matvec_nt(x, l.ff_keys, l.ff_key_bias, r.coefficients);
    for (float& m : r.coefficients) {
        m = m > 0.0f ? m : 0.0f;
    }
    r.output.resize(config_.d_model);
    vecmat(r.coefficients, l.ff_values, l.ff_value_bias, r.output);
    return r;
}

FeedForwardResult Model::neural_memory_forward(std::span<const float> x, std::size_t layer) const {
    check_layer(layer);
    if (x.size() != config_.d_model) {
        throw InputError("neural_memory_forward: input length != d_model");
    }
    const auto& l = weights_.layers[layer];
    FeedForwardResult r;
    r.coefficients.resize(config_.d_ff);
    matvec_nt(x, l.ff_keys, l.ff_key_bias, r.coefficients);
    softmax_inplace(r.coefficients);
    r.output.resize(config_.d_model);
    vecmat(r.coefficients, l.ff_values, l.ff_value_bias, r.output);
    return r;
}

ForwardTrace Model::forward(std::span<const TokenId> tokens, ForwardOptions options) const {
    detail::Activations act;
    detail::run_forward(config_, weights_, output_embedding(), tokens, options, act);
    ForwardTrace trace;
    trace.length = act.n;
    trace.layers.reserve(act.layers.size());
    for (auto& la : act.layers) {
        trace.layers.push_back(LayerTrace{std::move(la.ff_in), std::move(la.coeff), std::move(la.ff_out),
                                          std::move(la.resid_mid), std::move(la.out)});
    }
    trace.logits = std::move(act.logits);
    return trace;
}

std::vector<double> Model::vocab_logits(std::span<const float> h) const {
    std::vector<double> z(config_.vocab_size);
    matvec_nt_f64(h, output_embedding(), z);
    return z;
}

std::vector<double> Model::layernormed_vocab_logits(std::span<const float> h) const {
    const Vector normed = layernorm(h, weights_.final_gain, weights_.final_bias);
    return vocab_logits(normed);
}

Vector Model::output_logits(std::span<const float> layer_out) const {
    const Vector normed = layernorm(layer_out, weights_.final_gain, weights_.final_bias);
    Vector z(config_.vocab_size);
    matvec_nt(normed, output_embedding(), {}, z);
    return z;
}

VocabDistribution Model::project_to_vocab(std::span<const float> h, double scale) const {
    const auto z = vocab_logits(h);
    return VocabDistribution::from_logits(z, scale);
}

namespace detail {

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
    if (tokens.empty()) {
        throw InputError("forward: empty token sequence");
    }
    if (tokens.size() > config.max_seq_len) {
        throw InputError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
    }
    for (TokenId t : tokens) {
        if (t >= config.vocab_size) {
            throw InputError("forward: token id " + std::to_string(t) + " outside vocabulary of size " +
                             std::to_string(config.vocab_size));
        }
    }
}

void run_forward(const ModelConfig& config, const ModelWeights& weights, const Matrix& output_embedding,
                 std::span<const TokenId> tokens, const ForwardOptions& options, Activations& act) {
    check_tokens(config, tokens);
    const std::size_t n = tokens.size();
    const std::size_t d = config.d_model;
    const std::size_t heads = config.n_heads;
    const std::size_t hd = config.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t n_run = options.max_layers == 0 ? config.n_layers : std::min(options.max_layers, config.n_layers);

    act.n = n;
    act.layers.assign(n_run, {});

    Matrix stream(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto te = weights.token_embedding.row(tokens[i]);
        const auto pe = weights.positional_embedding.row(i);
        auto row = stream.row(i);
        for (std::size_t c = 0; c < d; ++c) {
            row[c] = te[c] + pe[c];
        }
    }

    std::vector<double> scores(n);
    std::vector<double> ctx_acc(hd);
    for (std::size_t li = 0; li < n_run; ++li) {
        const auto& w = weights.layers[li];
        auto& a = act.layers[li];
        a.resid_in = stream;
        a.ln1_hat = Matrix(n, d);
        a.ln1_out = Matrix(n, d);
        a.ln1_rstd.assign(n, 0.0f);
        a.q = Matrix(n, d);
        a.k = Matrix(n, d);
        a.v = Matrix(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            layernorm_into(stream.row(i), w.ln1_gain, w.ln1_bias, a.ln1_out.row(i), a.ln1_hat.row(i), &a.ln1_rstd[i]);
            matvec_nt(a.ln1_out.row(i), w.attn_q, w.attn_q_bias, a.q.row(i));
            matvec_nt(a.ln1_out.row(i), w.attn_k, w.attn_k_bias, a.k.row(i));
            matvec_nt(a.ln1_out.row(i), w.attn_v, w.attn_v_bias, a.v.row(i));
        }

        // Causal attention: row i only reads positions 0..i, and its arithmetic
        // does not depend on n, so a prefix reproduces its rows bit for bit.
        a.attn_probs.assign(heads * n * n, 0.0f);
        a.ctx = Matrix(n, d);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < n; ++i) {
                const auto qi = a.q.row(i).subspan(off, hd);
                double mx = -INFINITY;
                for (std::size_t j = 0; j <= i; ++j) {
                    scores[j] = dot(qi, a.k.row(j).subspan(off, hd)) * scale;
                    mx = std::max(mx, scores[j]);
                }
                double total = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    total += scores[j];
                }
                float* prow = a.attn_probs.data() + (h * n + i) * n;
                std::fill(ctx_acc.begin(), ctx_acc.end(), 0.0);
                for (std::size_t j = 0; j <= i; ++j) {
                    const double p = scores[j] / total;
                    prow[j] = static_cast<float>(p);
                    const auto vj = a.v.row(j).subspan(off, hd);
                    for (std::size_t c = 0; c < hd; ++c) {
                        ctx_acc[c] += p * vj[c];
                    }
                }
                auto crow = a.ctx.row(i).subspan(off, hd);
                for (std::size_t c = 0; c < hd; ++c) {
                    crow[c] = static_cast<float>(ctx_acc[c]);
                }
            }
        }

        a.resid_mid = Matrix(n, d);
        a.ln2_hat = Matrix(n, d);
        a.ln2_rstd.assign(n, 0.0f);
        a.ff_in = Matrix(n, d);
        a.pre_act = Matrix(n, config.d_ff);
        a.coeff = Matrix(n, config.d_ff);
        a.ff_out = Matrix(n, d);
        a.out = Matrix(n, d);
        Vector attn_out(d);
        for (std::size_t i = 0; i < n; ++i) {
            matvec_nt(a.ctx.row(i), w.attn_o, w.attn_o_bias, attn_out);
            auto r = a.resid_mid.row(i);
            const auto s = stream.row(i);
            for (std::size_t c = 0; c < d; ++c) {
                r[c] = s[c] + attn_out[c];
            }
            layernorm_into(r, w.ln2_gain, w.ln2_bias, a.ff_in.row(i), a.ln2_hat.row(i), &a.ln2_rstd[i]);
            auto z = a.pre_act.row(i);
            matvec_nt(a.ff_in.row(i), w.ff_keys, w.ff_key_bias, z);
            auto m = a.coeff.row(i);
            if (config.nonlinearity == Nonlinearity::relu) {
                for (std::size_t c = 0; c < config.d_ff; ++c) {
                    m[c] = z[c] > 0.0f ? z[c] : 0.0f;
                }
            } else {
                std::copy(z.begin(), z.end(), m.begin());
                softmax_inplace(m);
            }
            auto y = a.ff_out.row(i);
            vecmat(m, w.ff_values, w.ff_value_bias, y);
            auto o = a.out.row(i);
            for (std::size_t c = 0; c < d; ++c) {
                o[c] = y[c] + r[c];
            }
        }
        stream = a.out;
    }

    if (options.compute_logits && n_run == config.n_layers) {
        act.final_hat = Matrix(n, d);
        act.final_out = Matrix(n, d);
        act.final_rstd.assign(n, 0.0f);
        act.logits = Matrix(n, config.vocab_size);
        for (std::size_t i = 0; i < n; ++i) {
            layernorm_into(stream.row(i), weights.final_gain, weights.final_bias, act.final_out.row(i),
                           act.final_hat.row(i), &act.final_rstd[i]);
            matvec_nt(act.final_out.row(i), output_embedding, {}, act.logits.row(i));
        }
    }
}

}  // namespace detail

}  // namespace ffkv
