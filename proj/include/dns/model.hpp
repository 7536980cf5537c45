// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dns/errors.hpp"
#include "dns/mat.hpp"
#include "dns/rng.hpp"
#include "dns/simplex.hpp"
#include "dns/spline.hpp"
#include "dns/tensor.hpp"

// The decoupled neural system: n sub-systems z_i in R^q, each driven by its
// own encoded control path x_i(t) through a shared vector field F, coupled
// only through a row-stochastic interaction matrix A(t). A is realized as a
// simplex projection (softmax or sparsemax) of an attention-style feature
// L(t) = Q(Z) K(Z)ᵀ / sqrt(d_k), maintained exactly by per-step recomputation
// (the telescoped integral of its drift). Forward integration is explicit
// Euler, updating Z and then refreshing L and A from the new state.

namespace dns {

enum class Task { trajectory, links };
enum class MetaMode { reparameterized, discrete_projde, frozen_identity };
enum class EncoderMode { mlp, identity };

struct DnsConfig {
    std::size_t n = 2;           // sub-system count
    std::size_t q = 8;           // hidden dim per sub-system
    std::size_t k = 1;           // raw observation channels
    std::size_t m = 0;           // control dim per sub-system; 0 means the 2k default
    std::size_t d_k = 8;         // query/key dim
    std::size_t field_depth = 2; // weight layers in F
    Projection projection = Projection::softmax;
    MetaMode meta_mode = MetaMode::reparameterized;
    EncoderMode encoder_mode = EncoderMode::mlp;
    std::size_t substeps = 1; // Euler substeps per knot interval
    SplineKind spline = SplineKind::interpolating;
    double smoothing_lambda = 1.0;
    bool field_final_tanh = true;
    bool append_time_channel = false;

    Task task = Task::trajectory;
    std::size_t horizon = 3;     // trajectory task: future steps predicted
    std::size_t n_particles = 5; // links task: pair count derived from this

    std::size_t control_dim() const {
        if (encoder_mode == EncoderMode::identity) return k;
        return m != 0 ? m : 2 * k;
    }
    std::size_t effective_control_dim() const {
        return control_dim() + (append_time_channel ? 1 : 0);
    }
    std::size_t n_pairs() const { return n_particles * (n_particles - 1) / 2; }
    std::size_t readout_in() const { return n * q; }
    std::size_t readout_out() const {
        return task == Task::trajectory ? horizon * k : n_pairs();
    }

    void validate() const {
        if (n < 1 || q < 1 || k < 1 || d_k < 1 || substeps < 1 || field_depth < 1)
            throw InputError("DnsConfig: n, q, k, d_k, substeps, field_depth must be >= 1");
        if (meta_mode == MetaMode::discrete_projde && projection != Projection::sparsemax)
            throw InputError("DnsConfig: discrete-projde mode requires the sparsemax projection");
        if (encoder_mode == EncoderMode::identity && m != 0 && m != k)
            throw InputError("DnsConfig: identity encoder fixes the control dim to k");
    }
};

struct DnsParameters {
    // per-subsystem 2-layer control encoders p_i : R^k -> R^m
    std::vector<ad::MlpLayer> enc_hidden; // n entries, k -> m, tanh
    std::vector<ad::MlpLayer> enc_out;    // n entries, m -> m, linear
    // shared vector field F : R^q -> R^(q*m), tanh activations
    std::vector<ad::MlpLayer> field;
    // query/key maps R^q -> R^(d_k)
    ad::Tensor q_w, q_b, k_w, k_b;
    // initial-state encoder: first observation -> R^(n*q)
    ad::MlpLayer init_hidden, init_out;
    // task heads
    ad::MlpLayer readout; // trajectory: single affine layer
    ad::MlpLayer readout_hidden, readout_out; // links: 2-layer MLP

    DnsConfig cfg;

    std::vector<std::pair<std::string, ad::Tensor>> named() const {
        std::vector<std::pair<std::string, ad::Tensor>> out;
        for (std::size_t i = 0; i < enc_hidden.size(); ++i) {
            const std::string p = "enc" + std::to_string(i);
            out.push_back({p + ".w1", enc_hidden[i].weight});
            out.push_back({p + ".b1", enc_hidden[i].bias});
            out.push_back({p + ".w2", enc_out[i].weight});
            out.push_back({p + ".b2", enc_out[i].bias});
        }
        for (std::size_t l = 0; l < field.size(); ++l) {
            const std::string p = "field" + std::to_string(l);
            out.push_back({p + ".w", field[l].weight});
            out.push_back({p + ".b", field[l].bias});
        }
        out.push_back({"query.w", q_w});
        out.push_back({"query.b", q_b});
        out.push_back({"key.w", k_w});
        out.push_back({"key.b", k_b});
        out.push_back({"init.w1", init_hidden.weight});
        out.push_back({"init.b1", init_hidden.bias});
        out.push_back({"init.w2", init_out.weight});
        out.push_back({"init.b2", init_out.bias});
        if (cfg.task == Task::trajectory) {
            out.push_back({"readout.w", readout.weight});
            out.push_back({"readout.b", readout.bias});
        } else {
            out.push_back({"readout.w1", readout_hidden.weight});
            out.push_back({"readout.b1", readout_hidden.bias});
            out.push_back({"readout.w2", readout_out.weight});
            out.push_back({"readout.b2", readout_out.bias});
        }
        return out;
    }

    std::size_t count() const {
        std::size_t total = 0;
        for (const auto& [name, t] : named()) total += t.numel();
        return total;
    }

    void zero_grad() const {
        for (auto& [name, t] : named()) const_cast<ad::Tensor&>(t).zero_grad();
    }

    // Deep copy: fresh storage for every tensor, same values.
    DnsParameters clone() const {
        DnsParameters c;
        c.cfg = cfg;
        auto dup = [](const ad::Tensor& t) {
            return ad::Tensor::from_data(t.shape(), t.data(), t.requires_grad());
        };
        auto dup_layer = [&](const ad::MlpLayer& l) {
            return ad::MlpLayer{dup(l.weight), dup(l.bias), l.act};
        };
        for (const auto& l : enc_hidden) c.enc_hidden.push_back(dup_layer(l));
        for (const auto& l : enc_out) c.enc_out.push_back(dup_layer(l));
        for (const auto& l : field) c.field.push_back(dup_layer(l));
        if (q_w.defined()) {
            c.q_w = dup(q_w);
            c.q_b = dup(q_b);
            c.k_w = dup(k_w);
            c.k_b = dup(k_b);
        }
        if (init_hidden.weight.defined()) {
            c.init_hidden = dup_layer(init_hidden);
            c.init_out = dup_layer(init_out);
        }
        if (readout.weight.defined()) c.readout = dup_layer(readout);
        if (readout_hidden.weight.defined()) {
            c.readout_hidden = dup_layer(readout_hidden);
            c.readout_out = dup_layer(readout_out);
        }
        return c;
    }
};

namespace model_detail {

inline ad::Tensor small_uniform(Rng& rng, std::vector<std::size_t> shape) {
    ad::Tensor t = ad::Tensor::zeros(std::move(shape), true);
    t.fill_uniform(rng, 0.0, 0.01);
    return t;
}

inline ad::Tensor fanin_uniform(Rng& rng, std::size_t out, std::size_t in) {
    ad::Tensor t = ad::Tensor::zeros({out, in}, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    t.fill_uniform(rng, -bound, bound);
    return t;
}

inline ad::Tensor zero_bias(std::size_t n) { return ad::Tensor::zeros({n}, true); }

} // namespace model_detail

// Weight layout: encoder, query/key and initial-state weights uniform in
// [0, 0.01) with zero biases; the shared field and the readout heads use
// fan-in scaled uniform weights with zero biases.
inline DnsParameters init_parameters(const DnsConfig& cfg, Rng& rng) {
    cfg.validate();
    using namespace model_detail;
    DnsParameters p;
    p.cfg = cfg;
    const std::size_t m = cfg.control_dim();
    const std::size_t me = cfg.effective_control_dim();

    if (cfg.encoder_mode == EncoderMode::mlp) {
        for (std::size_t i = 0; i < cfg.n; ++i) {
            p.enc_hidden.push_back({small_uniform(rng, {m, cfg.k}), zero_bias(m), ad::Activation::tanh});
            p.enc_out.push_back({small_uniform(rng, {m, m}), zero_bias(m), ad::Activation::none});
        }
    }
    for (std::size_t l = 0; l < cfg.field_depth; ++l) {
        const std::size_t in = cfg.q;
        const std::size_t out = (l + 1 == cfg.field_depth) ? cfg.q * me : cfg.q;
        const bool last = (l + 1 == cfg.field_depth);
        const ad::Activation act =
            (!last || cfg.field_final_tanh) ? ad::Activation::tanh : ad::Activation::none;
        p.field.push_back({fanin_uniform(rng, out, in), zero_bias(out), act});
    }
    p.q_w = small_uniform(rng, {cfg.d_k, cfg.q});
    p.q_b = zero_bias(cfg.d_k);
    p.k_w = small_uniform(rng, {cfg.d_k, cfg.q});
    p.k_b = zero_bias(cfg.d_k);
    const std::size_t nq = cfg.n * cfg.q;
    p.init_hidden = {small_uniform(rng, {nq, cfg.k}), zero_bias(nq), ad::Activation::tanh};
    p.init_out = {small_uniform(rng, {nq, nq}), zero_bias(nq), ad::Activation::none};
    if (cfg.task == Task::trajectory) {
        p.readout = {fanin_uniform(rng, cfg.readout_out(), nq), zero_bias(cfg.readout_out()),
                     ad::Activation::none};
    } else {
        p.readout_hidden = {fanin_uniform(rng, nq, nq), zero_bias(nq), ad::Activation::tanh};
        p.readout_out = {fanin_uniform(rng, cfg.n_pairs(), nq), zero_bias(cfg.n_pairs()),
                         ad::Activation::none};
    }
    return p;
}

struct DnsState {
    double t = 0.0;
    ad::Tensor z; // n x q
    ad::Tensor l; // n x n
    ad::Tensor a; // n x n, row-stochastic
};

namespace model_detail {

inline ad::Tensor project(ad::Tape& tape, const DnsConfig& cfg, const ad::Tensor& l) {
    return cfg.projection == Projection::softmax ? tape.softmax_rows(l) : tape.sparsemax_rows(l);
}

inline ad::Tensor attention_feature(ad::Tape& tape, const DnsParameters& p, const ad::Tensor& z) {
    ad::Tensor qz = tape.linear(z, p.q_w, p.q_b);
    ad::Tensor kz = tape.linear(z, p.k_w, p.k_b);
    return tape.scale(tape.matmul(qz, tape.transpose(kz)),
                      1.0 / std::sqrt(static_cast<double>(p.cfg.d_k)));
}

inline ad::Tensor identity_tensor(std::size_t n) {
    ad::Tensor t = ad::Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
    return t;
}

} // namespace model_detail

// Encoded control knots of one sub-system: T x m_eff, recorded on the tape.
inline ad::Tensor encode_knots(ad::Tape& tape, const DnsParameters& p, std::size_t subsystem,
                               const ad::Tensor& observations, const std::vector<double>& times) {
    ad::Tensor y = observations;
    if (p.cfg.encoder_mode == EncoderMode::mlp)
        y = ad::mlp_forward(tape, {p.enc_hidden[subsystem], p.enc_out[subsystem]}, observations);
    if (p.cfg.append_time_channel) {
        ad::Tensor tcol = ad::Tensor::from_data({times.size(), 1},
                                                std::vector<double>(times.begin(), times.end()));
        y = tape.concat_cols({y, tcol});
    }
    return y;
}

// Value-level view of the encoded controls: one fitted ControlPath per
// sub-system over the encoded knot values.
inline std::vector<ControlPath> encode_controls(const DnsParameters& p,
                                                const ObservationSeries& series) {
    if (series.channels() != p.cfg.k)
        throw DimensionError("encode_controls: series channel count != config k");
    ad::Tape tape;
    ad::Tensor c = ad::Tensor::from_mat(series.values);
    std::vector<ControlPath> paths;
    for (std::size_t i = 0; i < p.cfg.n; ++i) {
        ad::Tensor y = encode_knots(tape, p, i, c, series.times);
        ObservationSeries enc;
        enc.times = series.times;
        enc.values = y.to_mat();
        paths.push_back(ControlPath::fit(enc, p.cfg.spline, p.cfg.smoothing_lambda));
    }
    return paths;
}

inline DnsState init_state(ad::Tape& tape, const DnsParameters& p, const ad::Tensor& observations,
                           double t0) {
    ad::Tensor first = tape.take_row(observations, 0);
    ad::Tensor z0 = tape.reshape(ad::mlp_forward(tape, {p.init_hidden, p.init_out}, first),
                                 {p.cfg.n, p.cfg.q});
    DnsState s;
    s.t = t0;
    s.z = z0;
    s.l = model_detail::attention_feature(tape, p, z0);
    s.a = (p.cfg.meta_mode == MetaMode::frozen_identity)
              ? model_detail::identity_tensor(p.cfg.n)
              : model_detail::project(tape, p.cfg, s.l);
    return s;
}

// One synchronous Euler step from time-t quantities. controls_dot holds the
// per-sub-system control derivatives at the step's left endpoint, packed as
// one row of an (n_steps x n*m_eff) tensor.
inline DnsState step(ad::Tape& tape, const DnsParameters& p, const DnsState& state,
                     const ad::Tensor& controls_dot, std::size_t step_index, double dt) {
    if (!(dt > 0.0)) throw InputError("step: dt must be positive");
    const DnsConfig& cfg = p.cfg;
    const std::size_t me = cfg.effective_control_dim();

    ad::Tensor u = tape.reshape(tape.scale(tape.take_row(controls_dot, step_index), dt),
                                {cfg.n, me});
    ad::Tensor az = (cfg.meta_mode == MetaMode::frozen_identity || cfg.n == 1)
                        ? state.z
                        : tape.matmul(state.a, state.z);
    ad::Tensor fields = ad::mlp_forward(tape, p.field, az);
    ad::Tensor dz = tape.field_apply(fields, u, cfg.q);

    DnsState next;
    next.t = state.t + dt;
    next.z = tape.add(state.z, dz);
    for (double v : next.z.data())
        if (!std::isfinite(v))
            throw NumericError("step " + std::to_string(step_index) + ": non-finite state");
    next.l = model_detail::attention_feature(tape, p, next.z);
    switch (cfg.meta_mode) {
        case MetaMode::reparameterized:
            next.a = model_detail::project(tape, cfg, next.l);
            break;
        case MetaMode::discrete_projde:
            next.a = tape.sparsemax_rows(tape.add(state.a, tape.sub(next.l, state.l)));
            break;
        case MetaMode::frozen_identity:
            next.a = state.a;
            break;
    }
    return next;
}

// Euler grid over [t0, t1]: every knot interval inside the span is divided
// into cfg.substeps equal parts; beyond the last knot the final interval's
// substep length is reused.
inline std::vector<double> integration_grid(const std::vector<double>& knots, std::size_t substeps,
                                            double t0, double t1) {
    if (!(t0 < t1)) throw InputError("integration_grid: need t0 < t1");
    std::vector<double> grid{t0};
    for (std::size_t i = 0; i + 1 < knots.size(); ++i) {
        const double a = knots[i], b = knots[i + 1];
        if (b <= t0 || a >= t1) continue;
        for (std::size_t s = 1; s <= substeps; ++s) {
            // land on the right knot exactly
            const double t = s == substeps
                                 ? b
                                 : a + (b - a) * static_cast<double>(s) /
                                           static_cast<double>(substeps);
            if (t > t0 && t <= t1) grid.push_back(t);
        }
    }
    if (grid.back() < t1) {
        const double h = (knots.back() - knots[knots.size() - 2]) / static_cast<double>(substeps);
        for (double t = grid.back() + h; t < t1; t += h) grid.push_back(t);
        grid.push_back(t1);
    }
    return grid;
}

struct ForwardPass {
    std::vector<DnsState> states; // n_steps + 1 entries
    std::vector<double> grid;
    const DnsState& final_state() const { return states.back(); }
};

// Full forward integration over the series' observation span.
inline ForwardPass integrate(ad::Tape& tape, const DnsParameters& p,
                             const ObservationSeries& series, double t0, double t1) {
    const DnsConfig& cfg = p.cfg;
    if (series.channels() != cfg.k)
        throw DimensionError("integrate: series channel count != config k");

    ForwardPass fp;
    fp.grid = integration_grid(series.times, cfg.substeps, t0, t1);
    const std::size_t n_steps = fp.grid.size() - 1;

    ad::Tensor obs = ad::Tensor::from_mat(series.values);

    // Pack all sub-system control knots side by side, then one constant
    // influence product yields every control derivative needed by the grid.
    std::vector<ad::Tensor> knots;
    for (std::size_t i = 0; i < cfg.n; ++i)
        knots.push_back(encode_knots(tape, p, i, obs, series.times));
    ad::Tensor packed = cfg.n == 1 ? knots[0] : tape.concat_cols(knots);

    std::vector<double> left_times(fp.grid.begin(), fp.grid.end() - 1);
    const InfluenceMatrices infl =
        influence_matrices(series.times, cfg.spline, cfg.smoothing_lambda, left_times);
    ad::Tensor controls_dot = tape.matmul(ad::Tensor::from_mat(infl.derivative), packed);

    fp.states.push_back(init_state(tape, p, obs, fp.grid.front()));
    for (std::size_t r = 0; r < n_steps; ++r)
        fp.states.push_back(
            step(tape, p, fp.states.back(), controls_dot, r, fp.grid[r + 1] - fp.grid[r]));
    return fp;
}

inline ForwardPass integrate(ad::Tape& tape, const DnsParameters& p,
                             const ObservationSeries& series) {
    return integrate(tape, p, series, series.times.front(), series.times.back());
}

// Affine head from the flattened final state to horizon x k future observations.
inline ad::Tensor readout_trajectory(ad::Tape& tape, const DnsParameters& p,
                                     const ad::Tensor& final_z) {
    ad::Tensor flat = tape.reshape(final_z, {1, p.cfg.readout_in()});
    ad::Tensor out = ad::mlp_forward(tape, {p.readout}, flat);
    return tape.reshape(out, {p.cfg.horizon, p.cfg.k});
}

// 2-layer head producing one logit per unordered particle pair.
inline ad::Tensor readout_links(ad::Tape& tape, const DnsParameters& p, const ad::Tensor& final_z) {
    ad::Tensor flat = tape.reshape(final_z, {1, p.cfg.readout_in()});
    return ad::mlp_forward(tape, {p.readout_hidden, p.readout_out}, flat);
}

// Gradient-sensitivity focus: mean over observed timestamps of
// |d ||x_i(t)||_1 / d c_j(t)|, one row per sub-system.
inline Mat compute_focus(const DnsParameters& p, const ObservationSeries& series, bool normalize) {
    const DnsConfig& cfg = p.cfg;
    Mat focus(cfg.n, cfg.k, 0.0);
    const std::size_t T = series.length();
    for (std::size_t i = 0; i < cfg.n; ++i) {
        ad::Tape tape;
        ad::Tensor c = ad::Tensor::from_mat(series.values, /*requires_grad=*/true);
        ad::Tensor y = encode_knots(tape, p, i, c, series.times);
        tape.backward(tape.sum_abs(y));
        for (std::size_t j = 0; j < cfg.k; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < T; ++t) acc += std::abs(c.grad()[t * cfg.k + j]);
            focus.at(i, j) = acc / static_cast<double>(T);
        }
        if (normalize) {
            double mx = 0.0;
            for (std::size_t j = 0; j < cfg.k; ++j) mx = std::max(mx, focus.at(i, j));
            if (mx > 0.0)
                for (std::size_t j = 0; j < cfg.k; ++j) focus.at(i, j) /= mx;
        }
    }
    return focus;
}

// --- dA/dt vs dL/dt equivalence ---------------------------------------------

// For the softmax meta-system the two update routes agree to first order:
// softmax(L + dt L̇) - softmax(L) = dt J_softmax(L) L̇ + O(dt²). The report
// carries the Taylor remainder at each dt and the ratio against dt/2, which
// sits near 4 when the equivalence holds.
struct EquivalenceReport {
    std::vector<double> dts;
    std::vector<double> errors;
    std::vector<double> ratios; // error(dt) / error(dt/2)
};

inline double equivalence_error(const Mat& l, const Mat& ldot, double dt) {
    double err = 0.0;
    std::vector<double> shifted(l.cols);
    for (std::size_t i = 0; i < l.rows; ++i) {
        for (std::size_t j = 0; j < l.cols; ++j) shifted[j] = l.at(i, j) + dt * ldot.at(i, j);
        const auto a1 = softmax(shifted);
        const auto a0 = softmax(std::span<const double>(l.row_ptr(i), l.cols));
        const auto jv = softmax_jvp(std::span<const double>(l.row_ptr(i), l.cols),
                                    std::span<const double>(ldot.row_ptr(i), ldot.cols));
        for (std::size_t j = 0; j < l.cols; ++j)
            err = std::max(err, std::abs(a1[j] - a0[j] - dt * jv[j]));
    }
    return err;
}

inline EquivalenceReport equivalence_check(const Mat& l, const Mat& ldot,
                                           const std::vector<double>& dts) {
    EquivalenceReport rep;
    rep.dts = dts;
    for (double dt : dts) {
        const double e1 = equivalence_error(l, ldot, dt);
        const double e2 = equivalence_error(l, ldot, dt / 2.0);
        rep.errors.push_back(e1);
        rep.ratios.push_back(e2 > 0.0 ? e1 / e2 : 0.0);
    }
    return rep;
}

// Model-level wrapper: derives the instantaneous L-drift at a state from the
// chain rule, L̇ = (Q̇ Kᵀ + Q K̇ᵀ)/sqrt(d_k) with Ż_i = F([A Z]_i) ẋ_i(t).
inline EquivalenceReport equivalence_check(const DnsParameters& p, const Mat& z_values,
                                           const Mat& x_dot, const std::vector<double>& dts) {
    if (p.cfg.projection != Projection::softmax)
        throw ContractError("equivalence_check: requires the softmax projection");
    ad::Tape tape;
    ad::Tensor z = ad::Tensor::from_mat(z_values);
    ad::Tensor l = model_detail::attention_feature(tape, p, z);
    ad::Tensor a = tape.softmax_rows(l);
    ad::Tensor az = tape.matmul(a, z);
    ad::Tensor fields = ad::mlp_forward(tape, p.field, az);
    ad::Tensor zdot = tape.field_apply(fields, ad::Tensor::from_mat(x_dot), p.cfg.q);
    // affine maps differentiate to their weight action alone
    ad::Tensor qz = tape.linear(z, p.q_w, p.q_b);
    ad::Tensor kz = tape.linear(z, p.k_w, p.k_b);
    ad::Tensor qdot = tape.matmul(zdot, tape.transpose(p.q_w));
    ad::Tensor kdot = tape.matmul(zdot, tape.transpose(p.k_w));
    ad::Tensor ldot = tape.scale(tape.add(tape.matmul(qdot, tape.transpose(kz)),
                                          tape.matmul(qz, tape.transpose(kdot))),
                                 1.0 / std::sqrt(static_cast<double>(p.cfg.d_k)));
    return equivalence_check(l.to_mat(), ldot.to_mat(), dts);
}

} // namespace dns
