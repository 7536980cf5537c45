// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "dns/errors.hpp"
#include "dns/mat.hpp"

// Row-wise projections onto the probability simplex under two regularizers:
// entropic (softmax, always strictly interior) and Euclidean/Gini (sparsemax,
// piecewise linear, can hit facets and vertices exactly). Both come with
// closed-form Jacobian-vector products. A brute-force KKT enumeration oracle
// is included for testing the sparsemax closed form.

namespace dns {

enum class Projection { softmax, sparsemax };

namespace detail {
inline void require_finite(std::span<const double> z, const char* who) {
    for (double v : z)
        if (!std::isfinite(v)) throw NumericError(std::string(who) + ": non-finite input");
}
} // namespace detail

// softmax with max subtraction; exact solution of the entropic-regularized
// linear program on the simplex.
inline std::vector<double> softmax(std::span<const double> z) {
    detail::require_finite(z, "softmax");
    const double zmax = *std::max_element(z.begin(), z.end());
    std::vector<double> y(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        y[i] = std::exp(z[i] - zmax);
        sum += y[i];
    }
    for (double& v : y) v /= sum;
    return y;
}

// Threshold function: sort z descending, k(z) = max{k : 1 + k z_(k) > sum_{j<=k} z_(j)},
// tau = (sum_{j<=k(z)} z_(j) - 1) / k(z). Ties broken by original index (stable sort).
inline double sparsemax_tau(std::span<const double> z) {
    detail::require_finite(z, "sparsemax");
    const std::size_t n = z.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
    double cumsum = 0.0;
    double tau = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double zr = z[idx[r]];
        cumsum += zr;
        // k = r+1 always satisfies the criterion at r = 0; the last satisfying
        // k is the max of the defining set.
        if (1.0 + static_cast<double>(r + 1) * zr > cumsum)
            tau = (cumsum - 1.0) / static_cast<double>(r + 1);
    }
    return tau;
}

// Euclidean projection onto the simplex: [z_i - tau(z)]_+.
inline std::vector<double> sparsemax(std::span<const double> z) {
    const double tau = sparsemax_tau(z);
    std::vector<double> y(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) y[i] = std::max(0.0, z[i] - tau);
    return y;
}

// Support set: indices with strictly positive output.
inline std::vector<std::size_t> sparsemax_support(std::span<const double> z) {
    const double tau = sparsemax_tau(z);
    std::vector<std::size_t> s;
    for (std::size_t i = 0; i < z.size(); ++i)
        if (z[i] - tau > 0.0) s.push_back(i);
    return s;
}

// Jacobian-vector product of sparsemax: J v = s ⊙ (v - v̂ 1) with
// v̂ = mean of v over the support. The Jacobian diag(s) - s sᵀ/|S| is
// symmetric, so the same formula serves the vector-Jacobian product.
inline std::vector<double> sparsemax_jvp(std::span<const double> z, std::span<const double> v) {
    if (z.size() != v.size()) throw DimensionError("sparsemax_jvp: size mismatch");
    detail::require_finite(v, "sparsemax_jvp");
    const double tau = sparsemax_tau(z);
    double vhat = 0.0;
    std::size_t support_size = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (z[i] - tau > 0.0) {
            vhat += v[i];
            ++support_size;
        }
    }
    vhat /= static_cast<double>(support_size);
    std::vector<double> out(z.size(), 0.0);
    for (std::size_t i = 0; i < z.size(); ++i)
        if (z[i] - tau > 0.0) out[i] = v[i] - vhat;
    return out;
}

// Jacobian-vector product of softmax: with y = softmax(z),
// J v = y ⊙ (v - <y, v> 1). Also symmetric.
inline std::vector<double> softmax_jvp(std::span<const double> z, std::span<const double> v) {
    if (z.size() != v.size()) throw DimensionError("softmax_jvp: size mismatch");
    const std::vector<double> y = softmax(z);
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * v[i];
    std::vector<double> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] * (v[i] - dot);
    return out;
}

// Row-wise projection of an n x m matrix; each row lands on the (m-1)-simplex.
inline Mat project_rows(const Mat& m, Projection kind) {
    Mat out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
        std::span<const double> row(m.row_ptr(i), m.cols);
        std::vector<double> p = (kind == Projection::softmax) ? softmax(row) : sparsemax(row);
        std::copy(p.begin(), p.end(), out.row_ptr(i));
    }
    return out;
}

// Objective of the entropic-regularized projection, J(y) = sum y log y - zᵀy,
// whose unique simplex minimizer is softmax(z). (0 log 0 = 0.)
inline double entropic_objective(std::span<const double> z, std::span<const double> y) {
    double obj = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (y[i] > 0.0) obj += y[i] * std::log(y[i]);
        obj -= z[i] * y[i];
    }
    return obj;
}

// Test oracle: exact Euclidean projection via active-set enumeration with KKT
// verification over all 2^K - 1 candidate supports. Deliberately independent
// of the sparsemax closed form.
inline std::vector<double> brute_force_simplex_projection(std::span<const double> z) {
    const std::size_t n = z.size();
    if (n == 0 || n > 6) throw ContractError("brute_force_simplex_projection: length must be in [1,6]");
    detail::require_finite(z, "brute_force_simplex_projection");

    std::vector<double> best;
    double best_dist = std::numeric_limits<double>::infinity();
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
        double sum = 0.0;
        std::size_t card = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (mask & (1u << i)) {
                sum += z[i];
                ++card;
            }
        const double tau = (sum - 1.0) / static_cast<double>(card);
        // KKT: y_i = z_i - tau >= 0 on the support, mu_i = tau - z_i >= 0 off it.
        bool ok = true;
        std::vector<double> y(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (mask & (1u << i)) {
                y[i] = z[i] - tau;
                if (y[i] < -1e-12) ok = false;
            } else if (tau - z[i] < -1e-12) {
                ok = false;
            }
        }
        if (!ok) continue;
        double dist = 0.0;
        for (std::size_t i = 0; i < n; ++i) dist += (y[i] - z[i]) * (y[i] - z[i]);
        if (dist < best_dist) {
            best_dist = dist;
            best = std::move(y);
        }
    }
    for (double& v : best) v = std::max(0.0, v);
    return best;
}

// Paired projections of 2D points onto the 1-simplex, for plotting.
// One row per input: (x0, x1, soft0, soft1, sparse0, sparse1).
struct ProjectionComparisonRow {
    double x0, x1;
    double soft0, soft1;
    double sparse0, sparse1;
};

inline std::vector<ProjectionComparisonRow> projection_comparison(
    const std::vector<std::pair<double, double>>& points) {
    std::vector<ProjectionComparisonRow> rows;
    rows.reserve(points.size());
    for (const auto& [x0, x1] : points) {
        const double z[2] = {x0, x1};
        const auto s = softmax(z);
        const auto g = sparsemax(z);
        rows.push_back({x0, x1, s[0], s[1], g[0], g[1]});
    }
    return rows;
}

} // namespace dns
