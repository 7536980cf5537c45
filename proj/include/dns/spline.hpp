// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dns/errors.hpp"
#include "dns/mat.hpp"

// Differentiable control paths from (possibly irregular) observations:
// natural cubic spline interpolation and natural smoothing spline (Reinsch),
// each evaluable for x(t) and x'(t) at arbitrary t. Beyond the knot range the
// path continues linearly with the boundary slope.

namespace dns {

enum class SplineKind { interpolating, smoothing };

// Observed channels over increasing timestamps. Irregular series simply omit
// rows; the first and last timestamps of a sample are always present.
struct ObservationSeries {
    std::vector<double> times; // strictly increasing
    Mat values;                // times.size() x channels

    std::size_t channels() const { return values.cols; }
    std::size_t length() const { return times.size(); }
};

namespace spline_detail {

inline void check_times(const std::vector<double>& t) {
    if (t.size() < 2) throw InputError("spline: need at least 2 observations");
    for (std::size_t i = 1; i < t.size(); ++i) {
        if (!(t[i] > t[i - 1])) {
            if (t[i] == t[i - 1]) throw InputError("spline: duplicate timestamps");
            throw InputError("spline: timestamps not increasing");
        }
    }
}

// Solve the symmetric tridiagonal system for interior second derivatives of a
// natural interpolating cubic: diag = (h_{i-1}+h_i)/3, off = h_i/6,
// rhs_i = (y_{i+1}-y_i)/h_i - (y_i-y_{i-1})/h_{i-1}. Returns full M with
// M_0 = M_{n-1} = 0.
inline std::vector<double> natural_second_derivatives(const std::vector<double>& t,
                                                      std::span<const double> y) {
    const std::size_t n = t.size();
    std::vector<double> m(n, 0.0);
    if (n == 2) return m;
    const std::size_t ni = n - 2; // interior count
    std::vector<double> diag(ni), off(ni, 0.0), rhs(ni);
    for (std::size_t i = 1; i + 1 < n; ++i) {
        const double hl = t[i] - t[i - 1];
        const double hr = t[i + 1] - t[i];
        diag[i - 1] = (hl + hr) / 3.0;
        if (i + 2 < n) off[i - 1] = hr / 6.0;
        rhs[i - 1] = (y[i + 1] - y[i]) / hr - (y[i] - y[i - 1]) / hl;
    }
    // Thomas algorithm (no pivoting; the matrix is SPD).
    std::vector<double> cp(ni, 0.0), dp(ni, 0.0);
    cp[0] = (ni > 1) ? off[0] / diag[0] : 0.0;
    dp[0] = rhs[0] / diag[0];
    for (std::size_t i = 1; i < ni; ++i) {
        const double denom = diag[i] - off[i - 1] * cp[i - 1];
        if (i + 1 < ni) cp[i] = off[i] / denom;
        dp[i] = (rhs[i] - off[i - 1] * dp[i - 1]) / denom;
    }
    m[ni] = dp[ni - 1];
    for (std::size_t i = ni - 1; i > 0; --i) m[i] = dp[i - 1] - cp[i - 1] * m[i + 1];
    return m;
}

// Banded SPD Cholesky solve for (R + lambda QᵀQ) gamma = Qᵀ y, bandwidth 2.
// Matrix rows are stored as {diag, +1, +2}.
inline std::vector<double> banded_spd_solve(std::vector<double> d0, std::vector<double> d1,
                                            std::vector<double> d2, std::vector<double> b) {
    const std::size_t n = d0.size();
    // LDLᵀ with the same band structure.
    for (std::size_t i = 0; i < n; ++i) {
        double di = d0[i];
        if (i >= 1) di -= d1[i - 1] * d1[i - 1] * d0[i - 1];
        if (i >= 2) di -= d2[i - 2] * d2[i - 2] * d0[i - 2];
        d0[i] = di;
        if (i + 1 < n) {
            double e = d1[i];
            if (i >= 1) e -= d1[i - 1] * d0[i - 1] * d2[i - 1];
            d1[i] = e / d0[i];
        }
        if (i + 2 < n) d2[i] = d2[i] / d0[i];
    }
    // Forward solve L u = b.
    for (std::size_t i = 0; i < n; ++i) {
        if (i >= 1) b[i] -= d1[i - 1] * b[i - 1];
        if (i >= 2) b[i] -= d2[i - 2] * b[i - 2];
    }
    // Diagonal.
    for (std::size_t i = 0; i < n; ++i) b[i] /= d0[i];
    // Back solve Lᵀ x = u.
    for (std::size_t ii = n; ii-- > 0;) {
        if (ii + 1 < n) b[ii] -= d1[ii] * b[ii + 1];
        if (ii + 2 < n) b[ii] -= d2[ii] * b[ii + 2];
    }
    return b;
}

} // namespace spline_detail

// Piecewise-cubic interpolant of one channel set. Coefficients are stored per
// channel and interval in local coordinates s = t - t_i:
// S(t) = a + b s + c s^2 + d s^3.
class ControlPath {
public:
    SplineKind kind() const { return kind_; }
    double lambda() const { return lambda_; }
    const std::vector<double>& knot_times() const { return knots_; }
    std::size_t channels() const { return n_channels_; }
    double t_min() const { return knots_.front(); }
    double t_max() const { return knots_.back(); }

    std::vector<double> eval(double t) const {
        std::vector<double> out(n_channels_);
        eval_into(t, out.data());
        return out;
    }

    std::vector<double> eval_derivative(double t) const {
        std::vector<double> out(n_channels_);
        eval_derivative_into(t, out.data());
        return out;
    }

    void eval_into(double t, double* out) const {
        if (std::isnan(t)) throw InputError("ControlPath::eval: NaN time");
        const auto [seg, s, mode] = locate(t);
        for (std::size_t ch = 0; ch < n_channels_; ++ch) {
            const double* c = coef(ch, seg);
            if (mode == 0) {
                out[ch] = c[0] + s * (c[1] + s * (c[2] + s * c[3]));
            } else {
                // Linear continuation with the boundary value and slope.
                const double h = (mode < 0) ? 0.0 : seg_len_[seg];
                const double v0 = c[0] + h * (c[1] + h * (c[2] + h * c[3]));
                const double d0 = c[1] + h * (2.0 * c[2] + h * 3.0 * c[3]);
                out[ch] = v0 + d0 * s;
            }
        }
    }

    void eval_derivative_into(double t, double* out) const {
        if (std::isnan(t)) throw InputError("ControlPath::eval_derivative: NaN time");
        const auto [seg, s, mode] = locate(t);
        for (std::size_t ch = 0; ch < n_channels_; ++ch) {
            const double* c = coef(ch, seg);
            if (mode == 0) {
                out[ch] = c[1] + s * (2.0 * c[2] + s * 3.0 * c[3]);
            } else {
                const double h = (mode < 0) ? 0.0 : seg_len_[seg];
                out[ch] = c[1] + h * (2.0 * c[2] + h * 3.0 * c[3]);
            }
        }
    }

    double second_derivative(std::size_t ch, double t) const {
        const auto [seg, s, mode] = locate(t);
        if (mode != 0) return 0.0;
        const double* c = coef(ch, seg);
        return 2.0 * c[2] + 6.0 * c[3] * s;
    }

    // Construction goes through the fit functions below.
    static ControlPath fit(const ObservationSeries& series, SplineKind kind, double lambda);

private:
    SplineKind kind_ = SplineKind::interpolating;
    double lambda_ = 0.0;
    std::vector<double> knots_;
    std::vector<double> seg_len_;
    std::size_t n_channels_ = 0;
    // coef_[((ch * n_segments) + seg) * 4 + {a,b,c,d}]
    std::vector<double> coef_;

    const double* coef(std::size_t ch, std::size_t seg) const {
        return coef_.data() + ((ch * seg_len_.size()) + seg) * 4;
    }

    // Returns (segment index, local coordinate, mode) where mode is -1 before
    // the first knot, +1 after the last, 0 inside.
    struct Loc {
        std::size_t seg;
        double s;
        int mode;
    };
    Loc locate(double t) const {
        if (t < knots_.front()) return {0, t - knots_.front(), -1};
        if (t >= knots_.back()) {
            const std::size_t last = seg_len_.size() - 1;
            if (t == knots_.back()) return {last, seg_len_[last], 0};
            return {last, t - knots_.back(), +1};
        }
        const auto it = std::upper_bound(knots_.begin(), knots_.end(), t);
        const std::size_t seg = static_cast<std::size_t>(it - knots_.begin()) - 1;
        return {seg, t - knots_[seg], 0};
    }

    friend ControlPath fit_natural_cubic(const ObservationSeries&);
    friend ControlPath fit_smoothing(const ObservationSeries&, double);
};

// Natural cubic interpolant, one tridiagonal solve per channel.
inline ControlPath fit_natural_cubic(const ObservationSeries& series) {
    spline_detail::check_times(series.times);
    const std::size_t n = series.times.size();
    const std::size_t k = series.channels();

    ControlPath p;
    p.kind_ = SplineKind::interpolating;
    p.knots_ = series.times;
    p.n_channels_ = k;
    p.seg_len_.resize(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) p.seg_len_[i] = series.times[i + 1] - series.times[i];
    p.coef_.resize(k * (n - 1) * 4);

    std::vector<double> y(n);
    for (std::size_t ch = 0; ch < k; ++ch) {
        for (std::size_t i = 0; i < n; ++i) y[i] = series.values.at(i, ch);
        const std::vector<double> m = spline_detail::natural_second_derivatives(series.times, y);
        for (std::size_t i = 0; i + 1 < n; ++i) {
            const double h = p.seg_len_[i];
            double* c = p.coef_.data() + ((ch * (n - 1)) + i) * 4;
            c[0] = y[i];
            c[1] = (y[i + 1] - y[i]) / h - h * (2.0 * m[i] + m[i + 1]) / 6.0;
            c[2] = m[i] / 2.0;
            c[3] = (m[i + 1] - m[i]) / (6.0 * h);
        }
    }
    return p;
}

// Natural smoothing spline (Reinsch): minimize sum (y_i - S(t_i))^2 +
// lambda * integral S''(t)^2 dt. lambda = 0 reduces to the interpolant.
inline ControlPath fit_smoothing(const ObservationSeries& series, double lambda) {
    spline_detail::check_times(series.times);
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
        throw InputError("fit_smoothing: lambda must be finite and >= 0");
    if (series.times.size() < 4) throw InputError("fit_smoothing: need at least 4 observations");

    const std::size_t n = series.times.size();
    const std::size_t k = series.channels();
    const std::vector<double>& t = series.times;
    std::vector<double> h(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) h[i] = t[i + 1] - t[i];

    const std::size_t ni = n - 2;
    // R (tridiagonal, interior x interior) and Q (n x interior) as in Reinsch.
    // System matrix (R + lambda QᵀQ) has bandwidth 2.
    std::vector<double> d0(ni, 0.0), d1(ni > 1 ? ni - 1 : 0, 0.0), d2(ni > 2 ? ni - 2 : 0, 0.0);
    for (std::size_t j = 0; j < ni; ++j) {
        const std::size_t i = j + 1; // knot index of this interior unknown
        const double q_im1 = 1.0 / h[i - 1];
        const double q_i = -1.0 / h[i - 1] - 1.0 / h[i];
        const double q_ip1 = 1.0 / h[i];
        d0[j] = (h[i - 1] + h[i]) / 3.0 + lambda * (q_im1 * q_im1 + q_i * q_i + q_ip1 * q_ip1);
        if (j + 1 < ni) {
            const double qn_i = 1.0 / h[i];
            const double qn_ip1 = -1.0 / h[i] - 1.0 / h[i + 1];
            d1[j] = h[i] / 6.0 + lambda * (q_i * qn_i + q_ip1 * qn_ip1);
        }
        if (j + 2 < ni) d2[j] = lambda * (q_ip1 * (1.0 / h[i + 1]));
    }

    ControlPath p;
    p.kind_ = SplineKind::smoothing;
    p.lambda_ = lambda;
    p.knots_ = t;
    p.n_channels_ = k;
    p.seg_len_ = h;
    p.coef_.resize(k * (n - 1) * 4);

    std::vector<double> y(n), rhs(ni), m(n, 0.0), yhat(n);
    for (std::size_t ch = 0; ch < k; ++ch) {
        for (std::size_t i = 0; i < n; ++i) y[i] = series.values.at(i, ch);
        for (std::size_t j = 0; j < ni; ++j) {
            const std::size_t i = j + 1;
            rhs[j] = (y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1];
        }
        const std::vector<double> gamma = spline_detail::banded_spd_solve(d0, d1, d2, rhs);
        // Fitted values: yhat = y - lambda * Q gamma.
        std::fill(yhat.begin(), yhat.end(), 0.0);
        for (std::size_t j = 0; j < ni; ++j) {
            const std::size_t i = j + 1;
            yhat[i - 1] += gamma[j] / h[i - 1];
            yhat[i] += gamma[j] * (-1.0 / h[i - 1] - 1.0 / h[i]);
            yhat[i + 1] += gamma[j] / h[i];
        }
        for (std::size_t i = 0; i < n; ++i) yhat[i] = y[i] - lambda * yhat[i];
        for (std::size_t i = 0; i < n; ++i) m[i] = 0.0;
        for (std::size_t j = 0; j < ni; ++j) m[j + 1] = gamma[j];
        for (std::size_t i = 0; i + 1 < n; ++i) {
            const double hi = h[i];
            double* c = p.coef_.data() + ((ch * (n - 1)) + i) * 4;
            c[0] = yhat[i];
            c[1] = (yhat[i + 1] - yhat[i]) / hi - hi * (2.0 * m[i] + m[i + 1]) / 6.0;
            c[2] = m[i] / 2.0;
            c[3] = (m[i + 1] - m[i]) / (6.0 * hi);
        }
    }
    return p;
}

inline ControlPath ControlPath::fit(const ObservationSeries& series, SplineKind kind, double lambda) {
    return kind == SplineKind::interpolating ? fit_natural_cubic(series)
                                             : fit_smoothing(series, lambda);
}

// Influence matrices: rows are query times, columns are knots, and
// W_value[r][j] is the weight of knot value y_j in S(t_r). Both spline kinds
// are linear smoothers, so the weights are obtained by fitting unit bases
// through the regular fit path. Shared by all channels of a sample.
struct InfluenceMatrices {
    Mat value;      // n_query x n_knots
    Mat derivative; // n_query x n_knots
};

inline InfluenceMatrices influence_matrices(const std::vector<double>& knot_times, SplineKind kind,
                                            double lambda, const std::vector<double>& query_times) {
    const std::size_t n = knot_times.size();
    ObservationSeries basis;
    basis.times = knot_times;
    basis.values = Mat(n, n, 0.0);
    for (std::size_t j = 0; j < n; ++j) basis.values.at(j, j) = 1.0; // channel j = unit data e_j
    const ControlPath path = ControlPath::fit(basis, kind, lambda);

    InfluenceMatrices w;
    w.value = Mat(query_times.size(), n);
    w.derivative = Mat(query_times.size(), n);
    for (std::size_t r = 0; r < query_times.size(); ++r) {
        path.eval_into(query_times[r], w.value.row_ptr(r));
        path.eval_derivative_into(query_times[r], w.derivative.row_ptr(r));
    }
    return w;
}

} // namespace dns
