#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "logitlens/errors.hpp"
#include "logitlens/safetensors.hpp"
#include "logitlens/tensor.hpp"

namespace logitlens {

// GPT-2-class decoder: pre-norm blocks, learned positional embeddings and a
// weight-tied unembedding. Everything is shape-driven by ModelConfig so any
// checkpoint of this family loads without code changes. All math is float32;
// half-precision checkpoints are widened on load.

struct ModelConfig {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int vocab_size = 0;
    int max_context = 0;
    float ln_epsilon = 1e-5f;

    void validate() const {
        if (n_layers < 1) throw InvalidInputError("config: n_layers must be >= 1");
        if (vocab_size < 2) throw InvalidInputError("config: vocab_size must be >= 2");
        if (max_context < 1) throw InvalidInputError("config: max_context must be >= 1");
        if (n_heads < 1 || d_model < 1 || d_model % n_heads != 0) {
            throw InvalidInputError("config: d_model must be divisible by n_heads");
        }
        if (!(ln_epsilon > 0.0f)) throw InvalidInputError("config: ln_epsilon must be > 0");
    }

    /// Reads the HF-style config.json shipped next to GPT-2 checkpoints.
    static ModelConfig from_json_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw LoadError("cannot open model config: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("bad config JSON in " + path + ": " + e.what());
        }
        ModelConfig c;
        c.n_layers = j.at("n_layer").get<int>();
        c.d_model = j.at("n_embd").get<int>();
        c.n_heads = j.at("n_head").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_context = j.at("n_positions").get<int>();
        c.ln_epsilon = j.value("layer_norm_epsilon", 1e-5f);
        c.validate();
        return c;
    }
};

struct BlockWeights {
    Vec ln1_gain, ln1_bias;
    Mat qkv_weight;   // d x 3d
    Vec qkv_bias;
    Mat attn_proj_weight;  // d x d
    Vec attn_proj_bias;
    Vec ln2_gain, ln2_bias;
    Mat mlp_fc_weight;     // d x 4d
    Vec mlp_fc_bias;
    Mat mlp_proj_weight;   // 4d x d
    Vec mlp_proj_bias;
};

namespace detail {

/// y = gain * (x - mean) / sqrt(var + eps) + bias, one row at a time.
inline void layer_norm_row(const float* x, int d, const float* gain, const float* bias,
                           float eps, float* y) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
        const double diff = x[j] - mean;
        var += diff * diff;
    }
    var /= d;
    const float inv_std = 1.0f / std::sqrt(static_cast<float>(var) + eps);
    const auto m = static_cast<float>(mean);
    for (int j = 0; j < d; ++j) y[j] = (x[j] - m) * inv_std * gain[j] + bias[j];
}

inline Mat layer_norm(const Mat& x, const Vec& gain, const Vec& bias, float eps) {
    Mat y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        layer_norm_row(x.row(i).data(), static_cast<int>(x.cols()), gain.data(),
                       bias.data(), eps, y.row(i).data());
    }
    return y;
}

/// GPT-2's tanh-approximated GELU.
inline void gelu_inplace(Mat& x) {
    constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
    float* p = x.data();
    const Eigen::Index n = x.size();
    for (Eigen::Index i = 0; i < n; ++i) {
        const float v = p[i];
        p[i] = 0.5f * v * (1.0f + std::tanh(k * (v + 0.044715f * v * v * v)));
    }
}

}  // namespace detail

class Model {
public:
    Model(ModelConfig config, Mat token_embedding, Mat position_embedding,
          std::vector<BlockWeights> blocks, Vec final_ln_gain, Vec final_ln_bias)
        : config_(config),
          token_embedding_(std::move(token_embedding)),
          position_embedding_(std::move(position_embedding)),
          blocks_(std::move(blocks)),
          final_ln_gain_(std::move(final_ln_gain)),
          final_ln_bias_(std::move(final_ln_bias)) {
        config_.validate();
    }

    const ModelConfig& config() const { return config_; }
    const Mat& token_embedding() const { return token_embedding_; }
    const Mat& position_embedding() const { return position_embedding_; }
    const std::vector<BlockWeights>& blocks() const { return blocks_; }
    const Vec& final_ln_gain() const { return final_ln_gain_; }
    const Vec& final_ln_bias() const { return final_ln_bias_; }

    /// Final LayerNorm followed by the tied unembedding, for one hidden state.
    /// This is the single decode path shared by the model head and the lens.
    Vec unembed(const float* hidden) const {
        Vec normed(config_.d_model);
        detail::layer_norm_row(hidden, config_.d_model, final_ln_gain_.data(),
                               final_ln_bias_.data(), config_.ln_epsilon, normed.data());
        Vec logits(config_.vocab_size);
        logits.noalias() = token_embedding_ * normed;
        return logits;
    }

private:
    ModelConfig config_;
    Mat token_embedding_;     // V x d (also the unembedding, transposed use)
    Mat position_embedding_;  // max_context x d
    std::vector<BlockWeights> blocks_;
    Vec final_ln_gain_, final_ln_bias_;
};

struct HiddenStateTrace {
    // states[l] is n_positions x d_model; l = 0 is the embedding output.
    std::vector<Mat> states;
    Mat final_logits;  // n_positions x vocab_size

    int n_layers() const { return static_cast<int>(states.size()) - 1; }
    int n_positions() const { return states.empty() ? 0 : static_cast<int>(states[0].rows()); }
};

namespace detail {

struct CheckpointReader {
    const NamedTensorMap& tensors;
    std::string prefix;  // "" or "transformer."

    const NamedTensor& get(const std::string& name) const {
        auto it = tensors.find(prefix + name);
        if (it == tensors.end()) it = tensors.find(name);
        if (it == tensors.end()) throw MissingTensorError(name);
        return it->second;
    }

    static std::string shape_str(const std::vector<std::int64_t>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += ", ";
            out += std::to_string(s[i]);
        }
        return out + "]";
    }

    void check(const std::string& name, const NamedTensor& t,
               std::vector<std::int64_t> expected) const {
        if (t.shape != expected) {
            throw ShapeMismatchError("tensor " + name + ": expected shape " +
                                     shape_str(expected) + ", found " + shape_str(t.shape));
        }
        if (!all_finite_range(t.data)) {
            throw LoadError("non-finite value in tensor " + name);
        }
    }

    Mat matrix(const std::string& name, std::int64_t rows, std::int64_t cols) const {
        const NamedTensor& t = get(name);
        check(name, t, {rows, cols});
        return Eigen::Map<const Mat>(t.data.data(), rows, cols);
    }

    Vec vector(const std::string& name, std::int64_t dim) const {
        const NamedTensor& t = get(name);
        check(name, t, {dim});
        return Eigen::Map<const Vec>(t.data.data(), dim);
    }
};

}  // namespace detail

/// Load a GPT-2 checkpoint from a safetensors container. Accepts the HF
/// tensor names both bare ("wte.weight") and with the "transformer." prefix;
/// see docs/tensor_names.md for the full mapping. Extra tensors are ignored.
inline Model load_checkpoint(const std::string& weights_path, const ModelConfig& config) {
    config.validate();
    const NamedTensorMap tensors = read_safetensors(weights_path);
    detail::CheckpointReader r{tensors,
                               tensors.count("transformer.wte.weight") ? "transformer." : ""};

    const std::int64_t d = config.d_model;
    const std::int64_t v = config.vocab_size;
    Mat wte = r.matrix("wte.weight", v, d);
    Mat wpe = r.matrix("wpe.weight", config.max_context, d);

    std::vector<BlockWeights> blocks;
    blocks.reserve(config.n_layers);
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string h = "h." + std::to_string(l) + ".";
        BlockWeights b;
        b.ln1_gain = r.vector(h + "ln_1.weight", d);
        b.ln1_bias = r.vector(h + "ln_1.bias", d);
        b.qkv_weight = r.matrix(h + "attn.c_attn.weight", d, 3 * d);
        b.qkv_bias = r.vector(h + "attn.c_attn.bias", 3 * d);
        b.attn_proj_weight = r.matrix(h + "attn.c_proj.weight", d, d);
        b.attn_proj_bias = r.vector(h + "attn.c_proj.bias", d);
        b.ln2_gain = r.vector(h + "ln_2.weight", d);
        b.ln2_bias = r.vector(h + "ln_2.bias", d);
        b.mlp_fc_weight = r.matrix(h + "mlp.c_fc.weight", d, 4 * d);
        b.mlp_fc_bias = r.vector(h + "mlp.c_fc.bias", 4 * d);
        b.mlp_proj_weight = r.matrix(h + "mlp.c_proj.weight", 4 * d, d);
        b.mlp_proj_bias = r.vector(h + "mlp.c_proj.bias", d);
        blocks.push_back(std::move(b));
    }
    Vec ln_f_g = r.vector("ln_f.weight", d);
    Vec ln_f_b = r.vector("ln_f.bias", d);
    return Model(config, std::move(wte), std::move(wpe), std::move(blocks),
                 std::move(ln_f_g), std::move(ln_f_b));
}

/// Incremental decoder over an immutable Model. Each instance owns its
/// per-pass scratch (the KV cache), so independent decoders may run on the
/// same model from different threads.
class Decoder {
public:
    explicit Decoder(const Model& model) : model_(model) {
        const auto& c = model_.config();
        k_cache_.assign(c.n_layers, Mat(c.max_context, c.d_model));
        v_cache_.assign(c.n_layers, Mat(c.max_context, c.d_model));
    }

    int length() const { return n_cached_; }

    /// Process `tokens` after the already-cached prefix and return the final
    /// logits for the fed positions (t x V). When `trace` is given (first
    /// feed only) every layer's hidden states are recorded into it.
    Mat feed(std::span<const TokenId> tokens, HiddenStateTrace* trace = nullptr) {
        const auto& c = model_.config();
        const int t = static_cast<int>(tokens.size());
        const int m = n_cached_;
        if (t == 0) throw EmptyInputError("empty token sequence");
        if (m + t > c.max_context) {
            throw ContextOverflowError("sequence length " + std::to_string(m + t) +
                                       " exceeds max context " +
                                       std::to_string(c.max_context));
        }
        if (trace != nullptr && m != 0) {
            throw InvalidInputError("hidden-state trace requires an empty cache");
        }
        for (const TokenId id : tokens) {
            if (id < 0 || id >= c.vocab_size) {
                throw IndexError("token id out of range: " + std::to_string(id));
            }
        }

        // layer 0: token + positional embeddings
        Mat hidden(t, c.d_model);
        for (int i = 0; i < t; ++i) {
            hidden.row(i) = model_.token_embedding().row(tokens[i]) +
                            model_.position_embedding().row(m + i);
        }
        if (trace) {
            trace->states.clear();
            trace->states.reserve(c.n_layers + 1);
            trace->states.push_back(hidden);
        }

        for (int l = 0; l < c.n_layers; ++l) {
            run_block(l, hidden, m, t);
            if (trace) trace->states.push_back(hidden);
        }

        Mat logits(t, c.vocab_size);
        for (int i = 0; i < t; ++i) {
            logits.row(i) = model_.unembed(hidden.row(i).data()).transpose();
        }
        n_cached_ = m + t;
        if (trace) {
            trace->final_logits = logits;
            if (!all_finite(logits)) throw NumericsError("non-finite value in final logits");
            for (const Mat& s : trace->states) {
                if (!all_finite(s)) throw NumericsError("non-finite value in hidden states");
            }
        }
        return logits;
    }

private:
    void run_block(int l, Mat& hidden, int m, int t) {
        const auto& c = model_.config();
        const auto& b = model_.blocks()[l];
        const int d = c.d_model;
        const int dh = d / c.n_heads;
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

        const Mat normed = detail::layer_norm(hidden, b.ln1_gain, b.ln1_bias, c.ln_epsilon);
        Mat qkv(t, 3 * d);
        qkv.noalias() = normed * b.qkv_weight;
        qkv.rowwise() += b.qkv_bias.transpose();

        k_cache_[l].middleRows(m, t) = qkv.middleCols(d, d);
        v_cache_[l].middleRows(m, t) = qkv.middleCols(2 * d, d);

        Mat context(t, d);
        Mat scores(t, m + t);
        for (int h = 0; h < c.n_heads; ++h) {
            const auto q = qkv.middleCols(h * dh, dh);
            const auto k = k_cache_[l].topRows(m + t).middleCols(h * dh, dh);
            const auto v = v_cache_[l].topRows(m + t).middleCols(h * dh, dh);
            scores.noalias() = q * k.transpose();
            for (int i = 0; i < t; ++i) {
                // causal: position m+i attends to 0..m+i
                float* row = scores.row(i).data();
                const int limit = m + i + 1;
                float max_v = -std::numeric_limits<float>::infinity();
                for (int j = 0; j < limit; ++j) {
                    row[j] *= scale;
                    max_v = std::max(max_v, row[j]);
                }
                double sum = 0.0;
                for (int j = 0; j < limit; ++j) {
                    row[j] = std::exp(row[j] - max_v);
                    sum += row[j];
                }
                const auto inv = static_cast<float>(1.0 / sum);
                for (int j = 0; j < limit; ++j) row[j] *= inv;
                for (int j = limit; j < m + t; ++j) row[j] = 0.0f;
            }
            context.middleCols(h * dh, dh).noalias() = scores * v;
        }
        hidden.noalias() += (context * b.attn_proj_weight).rowwise() +
                            b.attn_proj_bias.transpose();

        const Mat normed2 = detail::layer_norm(hidden, b.ln2_gain, b.ln2_bias, c.ln_epsilon);
        Mat inner(t, 4 * d);
        inner.noalias() = normed2 * b.mlp_fc_weight;
        inner.rowwise() += b.mlp_fc_bias.transpose();
        detail::gelu_inplace(inner);
        hidden.noalias() += (inner * b.mlp_proj_weight).rowwise() +
                            b.mlp_proj_bias.transpose();
    }

    const Model& model_;
    std::vector<Mat> k_cache_, v_cache_;
    int n_cached_ = 0;
};

/// One full instrumented forward pass: every layer's hidden states plus the
/// final logits for all positions.
inline HiddenStateTrace forward_with_taps(const Model& model,
                                          std::span<const TokenId> tokens) {
    HiddenStateTrace trace;
    Decoder dec(model);
    dec.feed(tokens, &trace);
    return trace;
}

inline HiddenStateTrace forward_with_taps(const Model& model,
                                          const std::vector<TokenId>& tokens) {
    return forward_with_taps(model, std::span<const TokenId>(tokens));
}

struct GenerateOptions {
    std::optional<TokenId> eot_id;                 // stop when this id is produced
    std::function<bool(TokenId)> stop_token;       // extra stop rule (e.g. newline)
};

/// Greedy decoding; ties broken by lowest token id. Returns prompt + new
/// tokens; the stop token itself is not appended.
inline std::vector<TokenId> greedy_generate(const Model& model,
                                            const std::vector<TokenId>& prompt,
                                            int max_new,
                                            const GenerateOptions& opts = {}) {
    if (prompt.empty()) throw EmptyInputError("empty prompt");
    if (static_cast<int>(prompt.size()) + max_new > model.config().max_context) {
        throw ContextOverflowError("prompt length + max_new exceeds max context");
    }
    std::vector<TokenId> out = prompt;
    if (max_new <= 0) return out;

    Decoder dec(model);
    Mat logits = dec.feed(prompt);
    for (int step = 0; step < max_new; ++step) {
        const float* row = logits.row(logits.rows() - 1).data();
        TokenId best = 0;
        float best_v = row[0];
        for (int v = 1; v < model.config().vocab_size; ++v) {
            if (row[v] > best_v) {
                best_v = row[v];
                best = v;
            }
        }
        if (opts.eot_id && best == *opts.eot_id) break;
        if (opts.stop_token && opts.stop_token(best)) break;
        out.push_back(best);
        if (step + 1 < max_new) {
            const TokenId next = best;
            logits = dec.feed(std::span<const TokenId>(&next, 1));
        }
    }
    return out;
}

}  // namespace logitlens
