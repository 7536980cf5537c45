// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dns/errors.hpp"
#include "dns/mat.hpp"
#include "dns/model.hpp"
#include "dns/rng.hpp"

// Synthetic benchmarks: a gravitational three-body trajectory-prediction task
// and a spring-coupled particle link-prediction task, with regular/irregular
// sampling, noise, and short-crop variants. Generation is deterministic: each
// sample draws from its own (seed, index)-derived stream.

namespace dns {

// --- generic point-mass simulators ------------------------------------------

// Unit masses, unit gravitational constant.
struct NBodyState {
    Mat pos; // n x 3
    Mat vel; // n x 3
};

inline void nbody_accelerations(const Mat& pos, Mat& acc) {
    const std::size_t n = pos.rows;
    std::fill(acc.a.begin(), acc.a.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double d[3], r2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                d[c] = pos.at(j, c) - pos.at(i, c);
                r2 += d[c] * d[c];
            }
            const double inv_r3 = 1.0 / (r2 * std::sqrt(r2));
            for (int c = 0; c < 3; ++c) {
                acc.at(i, c) += d[c] * inv_r3;
                acc.at(j, c) -= d[c] * inv_r3;
            }
        }
}

inline void nbody_rk4_step(NBodyState& s, double dt) {
    const std::size_t n = s.pos.rows;
    Mat k1v(n, 3), k2v(n, 3), k3v(n, 3), k4v(n, 3);
    Mat p2(n, 3), p3(n, 3), p4(n, 3);

    nbody_accelerations(s.pos, k1v);
    for (std::size_t i = 0; i < n * 3; ++i) p2.a[i] = s.pos.a[i] + 0.5 * dt * s.vel.a[i];
    nbody_accelerations(p2, k2v);
    for (std::size_t i = 0; i < n * 3; ++i)
        p3.a[i] = s.pos.a[i] + 0.5 * dt * (s.vel.a[i] + 0.5 * dt * k1v.a[i]);
    nbody_accelerations(p3, k3v);
    for (std::size_t i = 0; i < n * 3; ++i)
        p4.a[i] = s.pos.a[i] + dt * (s.vel.a[i] + 0.5 * dt * k2v.a[i]);
    nbody_accelerations(p4, k4v);

    for (std::size_t i = 0; i < n * 3; ++i) {
        const double v = s.vel.a[i];
        const double kv1 = k1v.a[i], kv2 = k2v.a[i], kv3 = k3v.a[i], kv4 = k4v.a[i];
        // position slopes are the velocities along the same internal stages
        const double kx1 = v;
        const double kx2 = v + 0.5 * dt * kv1;
        const double kx3 = v + 0.5 * dt * kv2;
        const double kx4 = v + dt * kv3;
        s.pos.a[i] += dt / 6.0 * (kx1 + 2.0 * kx2 + 2.0 * kx3 + kx4);
        s.vel.a[i] += dt / 6.0 * (kv1 + 2.0 * kv2 + 2.0 * kv3 + kv4);
    }
}

inline double nbody_energy(const NBodyState& s) {
    double e = 0.0;
    const std::size_t n = s.pos.rows;
    for (std::size_t i = 0; i < n * 3; ++i) e += 0.5 * s.vel.a[i] * s.vel.a[i];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double r2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d = s.pos.at(j, c) - s.pos.at(i, c);
                r2 += d * d;
            }
            e -= 1.0 / std::sqrt(r2);
        }
    return e;
}

inline double nbody_min_pair_distance(const Mat& pos) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pos.rows; ++i)
        for (std::size_t j = i + 1; j < pos.rows; ++j) {
            double r2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d = pos.at(j, c) - pos.at(i, c);
                r2 += d * d;
            }
            best = std::min(best, std::sqrt(r2));
        }
    return best;
}

struct NBodyRecord {
    std::vector<double> times;
    std::vector<NBodyState> states;
    double min_pair_distance = std::numeric_limits<double>::infinity();
};

// Integrates with fixed-step RK4, recording every `record_every` steps
// (including the initial state). Returns early if a pair distance drops below
// `abort_distance` (record.states then holds fewer entries than requested).
inline NBodyRecord nbody_integrate(NBodyState s, double dt, std::size_t n_records,
                                   std::size_t record_every, double abort_distance = 0.0) {
    NBodyRecord rec;
    rec.times.push_back(0.0);
    rec.states.push_back(s);
    rec.min_pair_distance = nbody_min_pair_distance(s.pos);
    for (std::size_t r = 1; r < n_records; ++r) {
        for (std::size_t step = 0; step < record_every; ++step) {
            nbody_rk4_step(s, dt);
            const double d = nbody_min_pair_distance(s.pos);
            rec.min_pair_distance = std::min(rec.min_pair_distance, d);
            if (abort_distance > 0.0 && d < abort_distance) return rec;
        }
        rec.times.push_back(static_cast<double>(r) * dt * static_cast<double>(record_every));
        rec.states.push_back(s);
    }
    return rec;
}

// Equilateral triangle of side 1 in the z = 0 plane, centroid at the origin.
inline Mat three_body_initial_positions() {
    Mat p(3, 3, 0.0);
    const double r = 1.0 / std::sqrt(3.0); // circumradius of a unit-side triangle
    for (int i = 0; i < 3; ++i) {
        const double ang = 2.0 * M_PI * i / 3.0;
        p.at(i, 0) = r * std::cos(ang);
        p.at(i, 1) = r * std::sin(ang);
    }
    return p;
}

// --- three-body dataset -------------------------------------------------------

struct ThreeBodyConfig {
    std::size_t n_samples = 100;
    std::size_t history_len = 8; // observed timestamps kept: 8 regular, 6 irregular
    std::size_t horizon = 3;
    bool irregular = false; // keep 6 of the 8 history stamps, endpoints pinned
    double noise_low = 0.995;
    double noise_high = 1.005;
    double velocity_scale = 0.5;
    double sim_dt = 1e-3;
    double record_dt = 1.0;
    std::uint64_t seed = 1;

    void validate() const {
        if (horizon != 3) throw InputError("ThreeBodyConfig: horizon is fixed at 3");
        if (!(history_len == 8 || history_len == 6))
            throw InputError("ThreeBodyConfig: history_len must be 6 or 8");
        if (!(noise_low > 0.0 && noise_high < 2.0 && noise_low <= noise_high))
            throw InputError("ThreeBodyConfig: noise interval must sit inside (0, 2)");
    }
};

struct Sample {
    std::vector<double> times;
    Mat observations; // T x k
    Mat target;       // horizon x k (trajectory) or 1 x n_pairs (links)
};

struct Dataset {
    Task task = Task::trajectory;
    std::vector<Sample> samples;
    std::string metadata; // JSON config echo
    std::size_t channels() const { return samples.empty() ? 0 : samples.front().observations.cols; }
};

// One clean trajectory, (history + horizon) x 9, recorded at unit intervals.
// Velocities are redrawn until the sample passes the close-encounter and
// energy-drift gates; `rejections` counts the redraws. The accepted full
// record (with velocities) is exposed through `record` when requested.
inline Mat simulate_three_body(const ThreeBodyConfig& cfg, Rng& rng,
                               std::size_t* rejections = nullptr,
                               NBodyRecord* record = nullptr) {
    const std::size_t n_records = 8 + cfg.horizon; // full regular history plus targets
    const auto record_every = static_cast<std::size_t>(std::llround(cfg.record_dt / cfg.sim_dt));
    for (;;) {
        NBodyState init;
        init.pos = three_body_initial_positions();
        init.vel = Mat(3, 3);
        for (std::size_t i = 0; i < 9; ++i) init.vel.a[i] = rng.normal(0.0, cfg.velocity_scale);

        NBodyRecord rec = nbody_integrate(init, cfg.sim_dt, n_records, record_every, 1e-3);
        bool ok = rec.states.size() == n_records;
        if (ok) {
            const double e0 = nbody_energy(rec.states.front());
            const double denom = std::max(std::abs(e0), 1e-3);
            for (const auto& s : rec.states)
                if (std::abs(nbody_energy(s) - e0) / denom > 5e-5) {
                    ok = false;
                    break;
                }
        }
        if (!ok) {
            if (rejections) ++*rejections;
            continue;
        }
        Mat traj(n_records, 9);
        for (std::size_t r = 0; r < n_records; ++r)
            for (std::size_t b = 0; b < 3; ++b)
                for (int c = 0; c < 3; ++c) traj.at(r, b * 3 + c) = rec.states[r].pos.at(b, c);
        if (record) *record = rec;
        return traj;
    }
}

namespace datagen_detail {

// Uniform subset of {1..total-2} of size keep-2, plus both endpoints.
inline std::vector<std::size_t> irregular_subset(std::size_t total, std::size_t keep, Rng& rng) {
    std::vector<std::size_t> interior(total - 2);
    for (std::size_t i = 0; i < interior.size(); ++i) interior[i] = i + 1;
    rng.shuffle(interior);
    std::vector<std::size_t> chosen(interior.begin(), interior.begin() + (keep - 2));
    chosen.push_back(0);
    chosen.push_back(total - 1);
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

} // namespace datagen_detail

inline Dataset make_three_body_dataset(const ThreeBodyConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.task = Task::trajectory;
    std::size_t rejections = 0;
    for (std::size_t s = 0; s < cfg.n_samples; ++s) {
        Rng rng = Rng::stream(cfg.seed, s);
        const Mat traj = simulate_three_body(cfg, rng, &rejections);

        std::vector<std::size_t> keep(8);
        for (std::size_t i = 0; i < 8; ++i) keep[i] = i;
        if (cfg.irregular) keep = datagen_detail::irregular_subset(8, cfg.history_len, rng);

        Sample sample;
        sample.observations = Mat(keep.size(), 9);
        for (std::size_t r = 0; r < keep.size(); ++r) {
            sample.times.push_back(static_cast<double>(keep[r]) * cfg.record_dt);
            for (std::size_t c = 0; c < 9; ++c)
                sample.observations.at(r, c) =
                    traj.at(keep[r], c) * rng.uniform(cfg.noise_low, cfg.noise_high);
        }
        sample.target = Mat(cfg.horizon, 9);
        for (std::size_t h = 0; h < cfg.horizon; ++h)
            for (std::size_t c = 0; c < 9; ++c) sample.target.at(h, c) = traj.at(8 + h, c);
        ds.samples.push_back(std::move(sample));
    }
    ds.metadata = std::string("{\"task\":\"three-body\",\"n\":") + std::to_string(cfg.n_samples) +
                  ",\"seed\":" + std::to_string(cfg.seed) +
                  ",\"history_len\":" + std::to_string(cfg.history_len) +
                  ",\"irregular\":" + (cfg.irregular ? "true" : "false") +
                  ",\"velocity_scale\":" + std::to_string(cfg.velocity_scale) +
                  ",\"rejections\":" + std::to_string(rejections) + "}";
    return ds;
}

// --- spring dataset -----------------------------------------------------------

struct SpringConfig {
    std::size_t n_samples = 100;
    std::size_t n_particles = 5;
    double p_edge = 0.5;
    std::size_t seq_len = 49;      // recorded length before irregular subsampling
    std::size_t irregular_len = 0; // 0 = regular; otherwise keep this many stamps
    double spring_constant = 2.0;
    double sim_dt = 1e-3;
    std::size_t record_stride = 100;
    double noise_sigma = 0.0;    // additive observation noise
    double crop_fraction = 1.0;  // keep the first ceil(crop * T) stamps
    double init_scale = 0.5;     // std of initial positions and velocities
    std::uint64_t seed = 1;

    void validate() const {
        if (n_particles < 2) throw InputError("SpringConfig: need at least 2 particles");
        if (seq_len < 2) throw InputError("SpringConfig: seq_len must be >= 2");
        if (irregular_len != 0 && (irregular_len < 2 || irregular_len > seq_len))
            throw InputError("SpringConfig: irregular_len out of range");
        if (!(crop_fraction > 0.0 && crop_fraction <= 1.0))
            throw InputError("SpringConfig: crop_fraction must be in (0, 1]");
        if (noise_sigma < 0.0) throw InputError("SpringConfig: negative noise_sigma");
    }
};

struct SpringTrajectory {
    Mat observations;            // T x 4P, per particle (x, y, vx, vy)
    std::vector<char> adjacency; // P x P symmetric, zero diagonal
    std::vector<double> times;
};

inline void spring_accelerations(const std::vector<char>& adj, std::size_t p, double k,
                                 const Mat& pos, Mat& acc) {
    std::fill(acc.a.begin(), acc.a.end(), 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = i + 1; j < p; ++j) {
            if (!adj[i * p + j]) continue;
            for (int c = 0; c < 2; ++c) {
                const double d = pos.at(i, c) - pos.at(j, c);
                acc.at(i, c) -= k * d;
                acc.at(j, c) += k * d;
            }
        }
}

inline double spring_energy(const std::vector<char>& adj, std::size_t p, double k, const Mat& pos,
                            const Mat& vel) {
    double e = 0.0;
    for (std::size_t i = 0; i < p * 2; ++i) e += 0.5 * vel.a[i] * vel.a[i];
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = i + 1; j < p; ++j) {
            if (!adj[i * p + j]) continue;
            double r2 = 0.0;
            for (int c = 0; c < 2; ++c) {
                const double d = pos.at(i, c) - pos.at(j, c);
                r2 += d * d;
            }
            e += 0.5 * k * r2;
        }
    return e;
}

// Hooke forces with zero rest length, no damping, velocity-Verlet integration.
inline SpringTrajectory simulate_springs(const SpringConfig& cfg, Rng& rng,
                                         std::size_t* rejections = nullptr) {
    const std::size_t p = cfg.n_particles;
    for (;;) {
        SpringTrajectory out;
        out.adjacency.assign(p * p, 0);
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = i + 1; j < p; ++j)
                if (rng.bernoulli(cfg.p_edge)) out.adjacency[i * p + j] = out.adjacency[j * p + i] = 1;

        Mat pos(p, 2), vel(p, 2), acc(p, 2), acc_next(p, 2);
        for (std::size_t i = 0; i < p * 2; ++i) {
            pos.a[i] = rng.normal(0.0, cfg.init_scale);
            vel.a[i] = rng.normal(0.0, cfg.init_scale);
        }

        out.observations = Mat(cfg.seq_len, 4 * p);
        bool ok = true;
        spring_accelerations(out.adjacency, p, cfg.spring_constant, pos, acc);
        for (std::size_t r = 0; r < cfg.seq_len && ok; ++r) {
            out.times.push_back(static_cast<double>(r * cfg.record_stride) * cfg.sim_dt);
            for (std::size_t i = 0; i < p; ++i) {
                out.observations.at(r, 4 * i + 0) = pos.at(i, 0);
                out.observations.at(r, 4 * i + 1) = pos.at(i, 1);
                out.observations.at(r, 4 * i + 2) = vel.at(i, 0);
                out.observations.at(r, 4 * i + 3) = vel.at(i, 1);
            }
            if (r + 1 == cfg.seq_len) break;
            for (std::size_t step = 0; step < cfg.record_stride; ++step) {
                for (std::size_t i = 0; i < p * 2; ++i) {
                    vel.a[i] += 0.5 * cfg.sim_dt * acc.a[i];
                    pos.a[i] += cfg.sim_dt * vel.a[i];
                }
                spring_accelerations(out.adjacency, p, cfg.spring_constant, pos, acc_next);
                for (std::size_t i = 0; i < p * 2; ++i) vel.a[i] += 0.5 * cfg.sim_dt * acc_next.a[i];
                std::swap(acc.a, acc_next.a);
                for (double v : pos.a)
                    if (!std::isfinite(v) || std::abs(v) > 1e6) {
                        ok = false;
                        break;
                    }
                if (!ok) break;
            }
        }
        if (!ok) {
            if (rejections) ++*rejections;
            continue;
        }
        return out;
    }
}

inline Dataset make_spring_dataset(const SpringConfig& cfg) {
    cfg.validate();
    const std::size_t p = cfg.n_particles;
    Dataset ds;
    ds.task = Task::links;
    std::size_t rejections = 0;
    for (std::size_t s = 0; s < cfg.n_samples; ++s) {
        Rng rng = Rng::stream(cfg.seed, s);
        SpringTrajectory traj = simulate_springs(cfg, rng, &rejections);

        const auto cropped =
            static_cast<std::size_t>(std::ceil(cfg.crop_fraction * static_cast<double>(cfg.seq_len)));
        std::vector<std::size_t> keep(cropped);
        for (std::size_t i = 0; i < cropped; ++i) keep[i] = i;
        if (cfg.irregular_len != 0)
            keep = datagen_detail::irregular_subset(cropped, cfg.irregular_len, rng);

        Sample sample;
        sample.observations = Mat(keep.size(), 4 * p);
        for (std::size_t r = 0; r < keep.size(); ++r) {
            sample.times.push_back(traj.times[keep[r]]);
            for (std::size_t c = 0; c < 4 * p; ++c) {
                double v = traj.observations.at(keep[r], c);
                if (cfg.noise_sigma > 0.0) v += rng.normal(0.0, cfg.noise_sigma);
                sample.observations.at(r, c) = v;
            }
        }
        sample.target = Mat(1, p * (p - 1) / 2);
        std::size_t pair = 0;
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = i + 1; j < p; ++j)
                sample.target.at(0, pair++) = traj.adjacency[i * p + j] ? 1.0 : 0.0;
        ds.samples.push_back(std::move(sample));
    }
    ds.metadata = std::string("{\"task\":\"spring\",\"n\":") + std::to_string(cfg.n_samples) +
                  ",\"seed\":" + std::to_string(cfg.seed) +
                  ",\"particles\":" + std::to_string(p) +
                  ",\"seq_len\":" + std::to_string(cfg.seq_len) +
                  ",\"irregular_len\":" + std::to_string(cfg.irregular_len) +
                  ",\"spring_constant\":" + std::to_string(cfg.spring_constant) +
                  ",\"noise_sigma\":" + std::to_string(cfg.noise_sigma) +
                  ",\"crop_fraction\":" + std::to_string(cfg.crop_fraction) +
                  ",\"rejections\":" + std::to_string(rejections) + "}";
    return ds;
}

inline ObservationSeries to_series(const Sample& s) {
    ObservationSeries out;
    out.times = s.times;
    out.values = s.observations;
    return out;
}

} // namespace dns
