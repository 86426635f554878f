#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "logitlens/errors.hpp"
#include "logitlens/model.hpp"
#include "logitlens/tensor.hpp"

namespace logitlens {

// The logit lens: decode a next-token distribution from any (layer, position)
// of a trace by pushing that hidden state through the model's final LayerNorm
// and unembedding — the same decode path the model head itself uses, so the
// lens at the last layer reproduces the model output bit for bit.

struct LensDistribution {
    std::vector<float> probs;    // length |V|, sums to 1
    std::vector<double> logits;  // pre-softmax, retained for exact log-prob math
    int layer = -1;
    int position = -1;
};

/// W_U · LayerNorm_L(h_layer at position), as raw float32 logits.
inline Vec lens_logits(const Model& model, const HiddenStateTrace& trace, int layer,
                       int position) {
    const int n_layers = trace.n_layers();
    if (layer < 0 || layer > n_layers) {
        throw IndexError("layer " + std::to_string(layer) + " outside [0, " +
                         std::to_string(n_layers) + "]");
    }
    if (position < 0 || position >= trace.n_positions()) {
        throw IndexError("position " + std::to_string(position) + " outside [0, " +
                         std::to_string(trace.n_positions()) + ")");
    }
    return model.unembed(trace.states[layer].row(position).data());
}

/// Softmax with max-subtraction; probabilities in float32, log-space kept in
/// double so downstream metrics never take log of a rounded probability.
inline LensDistribution lens_distribution(const std::vector<double>& logits) {
    if (logits.empty()) throw InvalidInputError("empty logit vector");
    LensDistribution dist;
    dist.logits = logits;
    double max_v = -std::numeric_limits<double>::infinity();
    for (const double x : logits) {
        if (!std::isfinite(x)) throw NumericsError("non-finite logit");
        max_v = std::max(max_v, x);
    }
    double sum = 0.0;
    for (const double x : logits) sum += std::exp(x - max_v);
    const double log_z = max_v + std::log(sum);
    dist.probs.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        dist.probs[i] = static_cast<float>(std::exp(logits[i] - log_z));
    }
    return dist;
}

inline LensDistribution lens_distribution(const Vec& logits) {
    std::vector<double> d(logits.data(), logits.data() + logits.size());
    return lens_distribution(d);
}

inline LensDistribution lens_distribution(std::initializer_list<double> logits) {
    return lens_distribution(std::vector<double>(logits));
}

/// Decode the distribution at one (layer, position) of a trace.
inline LensDistribution lens_distribution_at(const Model& model,
                                             const HiddenStateTrace& trace, int layer,
                                             int position) {
    LensDistribution dist = lens_distribution(lens_logits(model, trace, layer, position));
    dist.layer = layer;
    dist.position = position;
    return dist;
}

/// Top-k tokens by probability, ties broken by lowest token id.
inline std::vector<std::pair<TokenId, float>> top_k(const LensDistribution& dist,
                                                    int k) {
    const int v = static_cast<int>(dist.probs.size());
    if (k < 1 || k > v) {
        throw IndexError("k = " + std::to_string(k) + " outside [1, " + std::to_string(v) + "]");
    }
    std::vector<TokenId> idx(v);
    for (int i = 0; i < v; ++i) idx[i] = i;
    const auto better = [&dist](TokenId a, TokenId b) {
        if (dist.probs[a] != dist.probs[b]) return dist.probs[a] > dist.probs[b];
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
    std::vector<std::pair<TokenId, float>> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) out.emplace_back(idx[i], dist.probs[idx[i]]);
    return out;
}

/// The top-1 token under the same tie rule as top_k.
inline TokenId top1_token(const LensDistribution& dist) {
    TokenId best = 0;
    for (int i = 1; i < static_cast<int>(dist.probs.size()); ++i) {
        if (dist.probs[i] > dist.probs[best]) best = i;
    }
    return best;
}

/// Lens top-1 at each layer 0..L for a fixed position.
inline std::vector<TokenId> top1_by_layer(const Model& model,
                                          const HiddenStateTrace& trace, int position) {
    std::vector<TokenId> out;
    out.reserve(trace.n_layers() + 1);
    for (int l = 0; l <= trace.n_layers(); ++l) {
        out.push_back(top1_token(lens_distribution_at(model, trace, l, position)));
    }
    return out;
}

}  // namespace logitlens
