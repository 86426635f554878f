#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "logitlens/errors.hpp"
#include "logitlens/tensor.hpp"

namespace logitlens {

// Prediction-refinement depth: given the lens top-1 token at every layer,
// find the first layer whose prediction matches the gold token, the layer
// from which the prediction stays correct through the final layer, and the
// gap between them.

struct RefinementProfile {
    std::optional<int> first_correct_layer;
    std::optional<int> stabilization_layer;
    std::optional<int> depth;  // stabilization - first_correct, when both exist
    bool final_correct = false;
};

/// Smallest layer index whose top-1 equals gold; absent if none does.
inline std::optional<int> first_correct_layer(const std::vector<TokenId>& top1_by_layer,
                                              TokenId gold) {
    if (top1_by_layer.empty()) throw InvalidInputError("empty top-1 layer sequence");
    for (std::size_t l = 0; l < top1_by_layer.size(); ++l) {
        if (top1_by_layer[l] == gold) return static_cast<int>(l);
    }
    return std::nullopt;
}

/// Smallest layer from which every later layer (inclusive) predicts gold;
/// absent if the final layer itself is wrong.
inline std::optional<int> stabilization_layer(const std::vector<TokenId>& top1_by_layer,
                                              TokenId gold) {
    if (top1_by_layer.empty()) throw InvalidInputError("empty top-1 layer sequence");
    if (top1_by_layer.back() != gold) return std::nullopt;
    int l = static_cast<int>(top1_by_layer.size()) - 1;
    while (l > 0 && top1_by_layer[l - 1] == gold) --l;
    return l;
}

inline RefinementProfile refinement_profile(const std::vector<TokenId>& top1_by_layer,
                                            TokenId gold) {
    RefinementProfile p;
    p.first_correct_layer = first_correct_layer(top1_by_layer, gold);
    p.stabilization_layer = stabilization_layer(top1_by_layer, gold);
    p.final_correct = top1_by_layer.back() == gold;
    if (p.first_correct_layer && p.stabilization_layer) {
        p.depth = *p.stabilization_layer - *p.first_correct_layer;
    }
    return p;
}

struct AggregateStat {
    double mean = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    int n = 0;
    int n_missing = 0;
};

/// Mean with a Student-t confidence interval (sample standard deviation,
/// two-sided). n = 1 degenerates to a point interval.
inline AggregateStat aggregate(const std::vector<double>& values,
                               double confidence = 0.95) {
    if (values.empty()) throw InvalidInputError("aggregate over empty input");
    if (!(confidence > 0.0 && confidence < 1.0)) {
        throw InvalidInputError("confidence must be in (0, 1)");
    }
    AggregateStat s;
    s.n = static_cast<int>(values.size());
    double sum = 0.0;
    for (const double v : values) sum += v;
    s.mean = sum / s.n;
    if (s.n == 1) {
        s.ci_low = s.ci_high = s.mean;
        return s;
    }
    double ss = 0.0;
    for (const double v : values) ss += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(ss / (s.n - 1));
    const boost::math::students_t dist(s.n - 1);
    const double t = boost::math::quantile(dist, 0.5 + confidence / 2.0);
    const double half = t * sd / std::sqrt(static_cast<double>(s.n));
    s.ci_low = s.mean - half;
    s.ci_high = s.mean + half;
    return s;
}

/// Aggregate over the present values; absent ones are only counted.
inline AggregateStat aggregate_present(const std::vector<std::optional<double>>& values,
                                       double confidence = 0.95) {
    std::vector<double> present;
    int missing = 0;
    for (const auto& v : values) {
        if (v) {
            present.push_back(*v);
        } else {
            ++missing;
        }
    }
    if (present.empty()) {
        AggregateStat s;
        s.n = 0;
        s.n_missing = missing;
        s.mean = s.ci_low = s.ci_high = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    AggregateStat s = aggregate(present, confidence);
    s.n_missing = missing;
    return s;
}

}  // namespace logitlens
