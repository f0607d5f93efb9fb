#include "ffkv/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "ffkv/checkpoint.hpp"
#include "ffkv/error.hpp"
#include "forward.hpp"

namespace ffkv {

void TrainConfig::validate() const {
    if (batch_size < 1 || seq_len < 1 || eval_interval < 1 || eval_windows < 1) {
        throw InputError("train config: batch_size, seq_len, eval_interval and eval_windows must be positive");
    }
    if (!(learning_rate > 0.0) || !(adam_eps > 0.0) || !(gradient_clip_norm > 0.0)) {
        throw InputError("train config: learning_rate, adam_eps and gradient_clip_norm must be positive");
    }
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
        throw InputError("train config: adam betas must lie in (0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw InputError("train config: weight_decay must be non-negative");
    }
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},     {"seq_len", c.seq_len},
            {"learning_rate", c.learning_rate}, {"beta1", c.beta1},
            {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
            {"weight_decay", c.weight_decay}, {"max_steps", c.max_steps},
            {"eval_interval", c.eval_interval}, {"warmup_steps", c.warmup_steps},
            {"eval_windows", c.eval_windows}, {"seed", c.seed},
            {"gradient_clip_norm", c.gradient_clip_norm}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.eval_windows = j.value("eval_windows", c.eval_windows);
    c.seed = j.value("seed", c.seed);
    c.gradient_clip_norm = j.value("gradient_clip_norm", c.gradient_clip_norm);
    return c;
}

namespace {

void add_into(Matrix& dst, const Matrix& src) {
    auto d = dst.values();
    const auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
}

void add_column_sums(std::span<float> dst, const Matrix& src) {
    for (std::size_t r = 0; r < src.rows(); ++r) {
        const auto row = src.row(r);
        for (std::size_t c = 0; c < dst.size(); ++c) {
            dst[c] += row[c];
        }
    }
}

// Backward through out = hat * gain + bias with hat = (x - mean) * rstd.
void layernorm_backward(const Matrix& dout, const Matrix& hat, const Vector& rstd, std::span<const float> gain,
                        std::span<float> dgain, std::span<float> dbias, Matrix& dx_accum) {
    const std::size_t d = gain.size();
    std::vector<double> dhat(d);
    for (std::size_t i = 0; i < dout.rows(); ++i) {
        const auto go = dout.row(i);
        const auto h = hat.row(i);
        double mean1 = 0.0, mean2 = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            dhat[k] = static_cast<double>(go[k]) * gain[k];
            dgain[k] += go[k] * h[k];
            dbias[k] += go[k];
            mean1 += dhat[k];
            mean2 += dhat[k] * h[k];
        }
        mean1 /= static_cast<double>(d);
        mean2 /= static_cast<double>(d);
        auto dx = dx_accum.row(i);
        for (std::size_t k = 0; k < d; ++k) {
            dx[k] += static_cast<float>(rstd[i] * (dhat[k] - mean1 - h[k] * mean2));
        }
    }
}

// Returns the summed (not averaged) cross-entropy of one sequence; when grads is
// non-null, accumulates d(loss * inv_total) into it.
double sequence_backward(const Model& model, std::span<const TokenId> seq, double inv_total, ModelWeights* grads) {
    const auto& cfg = model.config();
    const auto& w = model.weights();
    const auto inputs = seq.first(seq.size() - 1);
    const auto targets = seq.subspan(1);
    const std::size_t n = inputs.size();
    const std::size_t d = cfg.d_model;
    const std::size_t vocab = cfg.vocab_size;

    detail::Activations act;
    detail::run_forward(cfg, w, model.output_embedding(), inputs, {}, act);

    double loss = 0.0;
    Matrix dlogits(n, vocab);
    for (std::size_t i = 0; i < n; ++i) {
        const auto z = act.logits.row(i);
        const float mx = *std::max_element(z.begin(), z.end());
        double total = 0.0;
        for (float v : z) {
            total += std::exp(static_cast<double>(v) - mx);
        }
        const double log_norm = std::log(total) + mx;
        loss += log_norm - z[targets[i]];
        if (grads != nullptr) {
            auto g = dlogits.row(i);
            for (std::size_t t = 0; t < vocab; ++t) {
                g[t] = static_cast<float>(std::exp(static_cast<double>(z[t]) - log_norm) * inv_total);
            }
            g[targets[i]] -= static_cast<float>(inv_total);
        }
    }
    if (grads == nullptr) {
        return loss;
    }

    const Matrix& E = model.output_embedding();
    Matrix& dE = cfg.tie_embeddings ? grads->token_embedding : grads->output_embedding;
    add_into(dE, matmul_tn(dlogits, act.final_out));
    Matrix dfinal = matmul(dlogits, E);
    Matrix dstream(n, d);
    layernorm_backward(dfinal, act.final_hat, act.final_rstd, w.final_gain, grads->final_gain, grads->final_bias,
                       dstream);

    const std::size_t heads = cfg.n_heads;
    const std::size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> dp(n);

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const auto& lw = w.layers[li];
        auto& lg = grads->layers[li];
        const auto& a = act.layers[li];

        // o = y + r: dstream flows to both.
        const Matrix& dy = dstream;
        add_column_sums(lg.ff_value_bias, dy);
        add_into(lg.ff_values, matmul_tn(a.coeff, dy));
        Matrix dz = matmul_nt(dy, lw.ff_values);
        for (std::size_t i = 0; i < n; ++i) {
            auto g = dz.row(i);
            if (cfg.nonlinearity == Nonlinearity::relu) {
                const auto z = a.pre_act.row(i);
                for (std::size_t c = 0; c < cfg.d_ff; ++c) {
                    if (!(z[c] > 0.0f)) {
                        g[c] = 0.0f;
                    }
                }
            } else {
                const auto m = a.coeff.row(i);
                const double s = dot(m, g);
                for (std::size_t c = 0; c < cfg.d_ff; ++c) {
                    g[c] = static_cast<float>(m[c] * (g[c] - s));
                }
            }
        }
        add_column_sums(lg.ff_key_bias, dz);
        add_into(lg.ff_keys, matmul_tn(dz, a.ff_in));
        const Matrix dx = matmul(dz, lw.ff_keys);
        Matrix dr = dstream;
        layernorm_backward(dx, a.ln2_hat, a.ln2_rstd, lw.ln2_gain, lg.ln2_gain, lg.ln2_bias, dr);

        // r = stream + ctx Wo^T + bo
        add_column_sums(lg.attn_o_bias, dr);
        add_into(lg.attn_o, matmul_tn(dr, a.ctx));
        const Matrix dctx = matmul(dr, lw.attn_o);
        std::vector<double> gq(n * d, 0.0), gk(n * d, 0.0), gv(n * d, 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < n; ++i) {
                const float* prow = a.attn_probs.data() + (h * n + i) * n;
                const auto dci = dctx.row(i).subspan(off, hd);
                double weighted = 0.0;
                double mass = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    dp[j] = dot(dci, a.v.row(j).subspan(off, hd));
                    weighted += prow[j] * dp[j];
                    mass += prow[j];
                    double* dvj = gv.data() + j * d + off;
                    for (std::size_t c = 0; c < hd; ++c) {
                        dvj[c] += static_cast<double>(prow[j]) * dci[c];
                    }
                }
                weighted /= mass;
                double* dqi = gq.data() + i * d + off;
                const auto qi = a.q.row(i).subspan(off, hd);
                for (std::size_t j = 0; j <= i; ++j) {
                    const double ds = prow[j] * (dp[j] - weighted) * scale;
                    if (ds == 0.0) {
                        continue;
                    }
                    const auto kj = a.k.row(j).subspan(off, hd);
                    double* dkj = gk.data() + j * d + off;
                    for (std::size_t c = 0; c < hd; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }
        // Bias and weight gradients straight from the double accumulators.
        auto finish = [&](const std::vector<double>& g, Vector& bias_grad, Matrix& weight_grad) {
            Matrix m(n, d);
            std::vector<double> acc(d * d, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const auto x = a.ln1_out.row(i);
                for (std::size_t r = 0; r < d; ++r) {
                    const double gr = g[i * d + r];
                    m(i, r) = static_cast<float>(gr);
                    for (std::size_t c = 0; c < d; ++c) {
                        acc[r * d + c] += gr * x[c];
                    }
                }
            }
            for (std::size_t r = 0; r < d; ++r) {
                double col = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    col += g[i * d + r];
                }
                bias_grad[r] += static_cast<float>(col);
                for (std::size_t c = 0; c < d; ++c) {
                    weight_grad(r, c) += static_cast<float>(acc[r * d + c]);
                }
            }
            return m;
        };
        const Matrix dq = finish(gq, lg.attn_q_bias, lg.attn_q);
        const Matrix dk = finish(gk, lg.attn_k_bias, lg.attn_k);
        const Matrix dv = finish(gv, lg.attn_v_bias, lg.attn_v);
        Matrix dln1 = matmul(dq, lw.attn_q);
        add_into(dln1, matmul(dk, lw.attn_k));
        add_into(dln1, matmul(dv, lw.attn_v));
        layernorm_backward(dln1, a.ln1_hat, a.ln1_rstd, lw.ln1_gain, lg.ln1_gain, lg.ln1_bias, dr);
        dstream = std::move(dr);
    }

    for (std::size_t i = 0; i < n; ++i) {
        const auto g = dstream.row(i);
        auto te = grads->token_embedding.row(inputs[i]);
        auto pe = grads->positional_embedding.row(i);
        for (std::size_t c = 0; c < d; ++c) {
            te[c] += g[c];
            pe[c] += g[c];
        }
    }
    return loss;
}

std::size_t count_predicted(std::span<const TrainSequence> batch) {
    std::size_t total = 0;
    for (const auto& s : batch) {
        if (s.size() < 2) {
            throw InputError("training sequences need at least two tokens");
        }
        total += s.size() - 1;
    }
    return total;
}

}  // namespace

LossAndGrads loss_and_grads(const Model& model, std::span<const TrainSequence> batch) {
    LossAndGrads out;
    out.predicted = count_predicted(batch);
    out.grads = ModelWeights::zeros(model.config());
    for (auto& t : out.grads.tensors(model.config())) {
        std::fill(t.data.begin(), t.data.end(), 0.0f);
    }
    const double inv_total = 1.0 / static_cast<double>(out.predicted);
    double total = 0.0;
    for (const auto& seq : batch) {
        total += sequence_backward(model, seq, inv_total, &out.grads);
    }
    out.loss = total * inv_total;
    return out;
}

double evaluate_loss(const Model& model, std::span<const TrainSequence> batch) {
    const std::size_t predicted = count_predicted(batch);
    double total = 0.0;
    for (const auto& seq : batch) {
        total += sequence_backward(model, seq, 0.0, nullptr);
    }
    return total / static_cast<double>(predicted);
}

TokenStream::TokenStream(const Corpus& corpus, std::span<const std::size_t> sentence_ids) {
    for (const auto sid : sentence_ids) {
        const auto& toks = corpus.sentences().at(sid).tokens;
        starts_.push_back(tokens_.size());
        tokens_.insert(tokens_.end(), toks.begin(), toks.end());
        tokens_.push_back(kEosId);
    }
    if (tokens_.empty()) {
        throw InputError("token stream over zero sentences");
    }
}

std::vector<TrainSequence> TokenStream::sample(Rng& rng, std::size_t batch, std::size_t seq_len) const {
    std::vector<TrainSequence> out(batch);
    for (auto& seq : out) {
        std::size_t pos = starts_[rng.below(starts_.size())];
        seq.resize(seq_len + 1);
        for (auto& t : seq) {
            t = tokens_[pos];
            pos = (pos + 1) % tokens_.size();
        }
    }
    return out;
}

std::vector<TrainSequence> TokenStream::windows(std::size_t seq_len, std::size_t max_windows) const {
    std::vector<TrainSequence> out;
    for (std::size_t pos = 0; pos + seq_len + 1 <= tokens_.size() && out.size() < max_windows; pos += seq_len) {
        out.emplace_back(tokens_.begin() + static_cast<std::ptrdiff_t>(pos),
                         tokens_.begin() + static_cast<std::ptrdiff_t>(pos + seq_len + 1));
    }
    if (out.empty()) {
        out.emplace_back(tokens_.begin(), tokens_.end());
        if (out.back().size() < 2) {
            throw InputError("validation stream too short for a single window");
        }
    }
    return out;
}

double unigram_cross_entropy(const TokenStream& train, std::span<const TrainSequence> windows, std::size_t vocab_size) {
    std::vector<double> counts(vocab_size, 1.0);
    for (TokenId t : train.tokens()) {
        counts[t] += 1.0;
    }
    const double total = static_cast<double>(train.size() + vocab_size);
    double nll = 0.0;
    std::size_t n = 0;
    for (const auto& w : windows) {
        for (std::size_t i = 1; i < w.size(); ++i) {
            nll -= std::log(counts[w[i]] / total);
            ++n;
        }
    }
    return nll / static_cast<double>(n);
}

namespace {

struct AdamState {
    std::vector<std::vector<float>> m, v;
};

std::string adam_key(const char* which, const std::string& name) { return std::string("adam.") + which + "." + name; }

void write_log_rows(const std::filesystem::path& path, const std::vector<LossRecord>& rows) {
    if (path.empty() || rows.empty()) {
        return;
    }
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::string block;
    if (fresh) {
        block += "step,loss,val_loss\n";
    }
    for (const auto& r : rows) {
        block += fmt::format("{},{:.6f},{}\n", r.step, r.loss, r.val_loss ? fmt::format("{:.6f}", *r.val_loss) : "");
    }
    // One write per eval interval, so a reader never sees half a block.
    std::ofstream out(path, std::ios::app | std::ios::binary);
    out.write(block.data(), static_cast<std::streamsize>(block.size()));
    out.flush();
}

void truncate_log_after(const std::filesystem::path& path, std::size_t step) {
    if (path.empty() || !std::filesystem::exists(path)) {
        return;
    }
    std::ifstream in(path);
    std::string line, kept;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            kept += line + "\n";
            header = false;
            continue;
        }
        if (std::stoull(line.substr(0, line.find(','))) <= step) {
            kept += line + "\n";
        }
    }
    in.close();
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    out << kept;
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& tc, const Corpus& corpus,
                  const CorpusSplit& split, const TrainOptions& options) {
    model_config.validate();
    tc.validate();
    if (tc.seq_len > model_config.max_seq_len) {
        throw InputError("seq_len exceeds the model's max_seq_len");
    }
    if (corpus.vocab().size() != model_config.vocab_size) {
        throw InputError(fmt::format("model vocab_size {} != corpus vocabulary size {}", model_config.vocab_size,
                                     corpus.vocab().size()));
    }
    const TokenStream train_stream(corpus, split.train);
    const TokenStream val_stream(corpus, split.validation.empty() ? split.train : split.validation);
    const auto val_windows = val_stream.windows(tc.seq_len, tc.eval_windows);

    Model model(model_config, initialize_weights(model_config, splitmix64(tc.seed)));
    auto params = model.mutable_weights().tensors(model_config);
    AdamState adam;
    for (const auto& p : params) {
        adam.m.emplace_back(p.data.size(), 0.0f);
        adam.v.emplace_back(p.data.size(), 0.0f);
    }

    std::size_t start = 0;
    if (options.resume && !options.checkpoint.empty() && std::filesystem::exists(options.checkpoint)) {
        Checkpoint ck = load_checkpoint(options.checkpoint);
        if (!(ck.config == model_config)) {
            throw InputError("resume checkpoint config differs from the requested model config");
        }
        model = Model(ck.config, std::move(ck.weights));
        params = model.mutable_weights().tensors(model_config);
        start = ck.metadata.value("/train_state/step"_json_pointer, std::size_t{0});
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto m = ck.extras.find(adam_key("m", params[i].name));
            const auto v = ck.extras.find(adam_key("v", params[i].name));
            if (m == ck.extras.end() || v == ck.extras.end()) {
                if (start > 0) {
                    throw CheckpointError("resume checkpoint lacks optimizer state for '" + params[i].name + "'");
                }
                continue;
            }
            adam.m[i] = m->second.data;
            adam.v[i] = v->second.data;
        }
        truncate_log_after(options.loss_log, start);
    } else if (!options.loss_log.empty() && std::filesystem::exists(options.loss_log)) {
        std::filesystem::remove(options.loss_log);
    }

    TrainResult result;
    auto save = [&](std::size_t steps) {
        if (options.checkpoint.empty()) {
            return;
        }
        std::map<std::string, ExtraTensor> extras;
        for (std::size_t i = 0; i < params.size(); ++i) {
            extras[adam_key("m", params[i].name)] = ExtraTensor{{adam.m[i].size()}, adam.m[i]};
            extras[adam_key("v", params[i].name)] = ExtraTensor{{adam.v[i].size()}, adam.v[i]};
        }
        nlohmann::json meta = options.metadata;
        meta["train_state"] = {{"step", steps}};
        meta["train_config"] = train_config_to_json(tc);
        save_checkpoint(options.checkpoint, model_config, model.weights(), meta, extras);
    };

    std::vector<LossRecord> pending;
    for (std::size_t step = start; step < tc.max_steps; ++step) {
        Rng rng = Rng::derive(tc.seed, 0xba7c4u, step);
        const auto batch = train_stream.sample(rng, tc.batch_size, tc.seq_len);
        LossAndGrads lg = loss_and_grads(model, batch);
        if (!std::isfinite(lg.loss)) {
            throw TrainingError(fmt::format("non-finite training loss at step {}", step + 1), static_cast<long>(step + 1));
        }
        auto grads = lg.grads.tensors(model_config);
        double norm2 = 0.0;
        for (const auto& g : grads) {
            for (float x : g.data) {
                norm2 += static_cast<double>(x) * x;
            }
        }
        const double norm = std::sqrt(norm2);
        const double clip = norm > tc.gradient_clip_norm ? tc.gradient_clip_norm / norm : 1.0;
        const double warm = tc.warmup_steps == 0 ? 1.0 : std::min(1.0, static_cast<double>(step + 1) / tc.warmup_steps);
        const double lr = tc.learning_rate * warm;
        const double t = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(tc.beta1, t);
        const double bc2 = 1.0 - std::pow(tc.beta2, t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto p = params[i].data;
            const auto g = grads[i].data;
            auto& m = adam.m[i];
            auto& v = adam.v[i];
            const bool decay = params[i].shape.size() == 2;
            for (std::size_t k = 0; k < p.size(); ++k) {
                const double gk = g[k] * clip;
                m[k] = static_cast<float>(tc.beta1 * m[k] + (1.0 - tc.beta1) * gk);
                v[k] = static_cast<float>(tc.beta2 * v[k] + (1.0 - tc.beta2) * gk * gk);
                double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + tc.adam_eps);
                if (decay) {
                    update += tc.weight_decay * p[k];
                }
                p[k] = static_cast<float>(p[k] - lr * update);
            }
        }

        LossRecord rec{step + 1, lg.loss, std::nullopt};
        const bool last = step + 1 == tc.max_steps;
        if ((step + 1) % tc.eval_interval == 0 || last) {
            rec.val_loss = evaluate_loss(model, val_windows);
            if (!std::isfinite(*rec.val_loss)) {
                throw TrainingError(fmt::format("non-finite validation loss at step {}", step + 1),
                                    static_cast<long>(step + 1));
            }
        }
        pending.push_back(rec);
        result.log.push_back(rec);
        if (rec.val_loss) {
            write_log_rows(options.loss_log, pending);
            pending.clear();
            save(step + 1);
        }
    }
    if (start >= tc.max_steps) {
        save(start);
    }

    result.steps = std::max(start, tc.max_steps);
    result.val_loss = evaluate_loss(model, val_windows);
    result.unigram_val_loss = unigram_cross_entropy(train_stream, val_windows, model_config.vocab_size);
    result.weights = model.weights();
    return result;
}

}  // namespace ffkv
