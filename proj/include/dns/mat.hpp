// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dns/errors.hpp"

namespace dns {

// Plain row-major matrix of doubles. Used for non-differentiable values
// (trajectories, observation grids, inspection dumps). The autodiff Tensor
// in tensor.hpp is a separate type.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

    const double* row_ptr(std::size_t i) const { return a.data() + i * cols; }
    double* row_ptr(std::size_t i) { return a.data() + i * cols; }

    std::vector<double> row(std::size_t i) const {
        return std::vector<double>(row_ptr(i), row_ptr(i) + cols);
    }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : a)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline double max_abs_diff(const Mat& x, const Mat& y) {
    if (!x.same_shape(y)) throw DimensionError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < x.a.size(); ++i) m = std::max(m, std::abs(x.a[i] - y.a[i]));
    return m;
}

} // namespace dns
