#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "logitlens/errors.hpp"

namespace logitlens {

// All model math runs on row-major float32 matrices so that tensors map
// 1:1 onto the checkpoint's C-order raw data.
using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXf;

using TokenId = std::int32_t;

inline bool all_finite(const Mat& m) {
    return m.allFinite();
}

inline bool all_finite(const Vec& v) {
    return v.allFinite();
}

template <typename Container>
inline bool all_finite_range(const Container& c) {
    for (const auto& x : c) {
        if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
}

}  // namespace logitlens
