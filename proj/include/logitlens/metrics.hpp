#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "logitlens/errors.hpp"
#include "logitlens/lens.hpp"
#include "logitlens/model.hpp"

namespace logitlens {

// The three per-cell quantities: maximum probability, cross-entropy against
// the ground-truth next token, and forward KL against the final layer's
// distribution (the reference the intermediate layers converge to). All
// values are in nats and accumulated in 64-bit.

inline double max_probability(const LensDistribution& dist) {
    return dist.probs[top1_token(dist)];
}

namespace detail {

inline double log_sum_exp(const std::vector<double>& logits) {
    double max_v = -std::numeric_limits<double>::infinity();
    for (const double x : logits) max_v = std::max(max_v, x);
    double sum = 0.0;
    for (const double x : logits) sum += std::exp(x - max_v);
    return max_v + std::log(sum);
}

}  // namespace detail

/// −log p(gold), from the stabilized log-softmax of the retained logits.
inline double cross_entropy(const LensDistribution& dist, TokenId gold) {
    if (gold < 0 || gold >= static_cast<TokenId>(dist.logits.size())) {
        throw IndexError("gold token id out of range: " + std::to_string(gold));
    }
    return detail::log_sum_exp(dist.logits) - dist.logits[gold];
}

/// D_KL(final ‖ intermediate) = Σ_v p_final(v) · (log p_final(v) − log p_inter(v)).
inline double forward_kl(const LensDistribution& final_dist,
                         const LensDistribution& intermediate) {
    if (final_dist.logits.size() != intermediate.logits.size()) {
        throw ShapeMismatchError("KL over different vocabulary sizes: " +
                                 std::to_string(final_dist.logits.size()) + " vs " +
                                 std::to_string(intermediate.logits.size()));
    }
    const double log_z_f = detail::log_sum_exp(final_dist.logits);
    const double log_z_i = detail::log_sum_exp(intermediate.logits);
    double kl = 0.0;
    for (std::size_t v = 0; v < final_dist.logits.size(); ++v) {
        const double log_pf = final_dist.logits[v] - log_z_f;
        const double log_pi = intermediate.logits[v] - log_z_i;
        kl += std::exp(log_pf) * (log_pf - log_pi);
    }
    return kl;
}

struct LayerTraceRecord {
    int layer = 0;
    int position = 0;
    TokenId top1_token = 0;
    float max_prob = 0.0f;
    std::optional<double> cross_entropy;  // absent when no gold token is given
    double forward_kl = 0.0;
};

/// One record per layer 0..L at a fixed position. Forward KL is measured
/// against the layer-L lens distribution; cross-entropy only when `gold` is
/// present.
inline std::vector<LayerTraceRecord> layer_sweep(const Model& model,
                                                 const HiddenStateTrace& trace,
                                                 int position,
                                                 std::optional<TokenId> gold = {}) {
    const int n_layers = trace.n_layers();
    const LensDistribution final_dist =
        lens_distribution_at(model, trace, n_layers, position);
    std::vector<LayerTraceRecord> records;
    records.reserve(n_layers + 1);
    for (int l = 0; l <= n_layers; ++l) {
        const LensDistribution dist =
            l == n_layers ? final_dist : lens_distribution_at(model, trace, l, position);
        LayerTraceRecord rec;
        rec.layer = l;
        rec.position = position;
        rec.top1_token = top1_token(dist);
        rec.max_prob = static_cast<float>(max_probability(dist));
        if (gold) rec.cross_entropy = cross_entropy(dist, *gold);
        rec.forward_kl = forward_kl(final_dist, dist);
        records.push_back(rec);
    }
    return records;
}

}  // namespace logitlens
