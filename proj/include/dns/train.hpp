// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "dns/datagen.hpp"
#include "dns/errors.hpp"
#include "dns/model.hpp"
#include "dns/rng.hpp"

// Optimization and evaluation harness: Adam with cosine-annealed learning
// rate, optional global gradient-norm clipping, patience-based early stopping
// on a validation metric, k-fold cross-validation, and the decoupling
// ablation table. Batch gradients are means of per-sample tape gradients;
// samples may be processed by several workers on cloned parameters, with the
// partial gradients reduced in a fixed order so a given (seed, threads) pair
// is bit-reproducible.

namespace dns {

struct TrainConfig {
    double lr = 1e-3;
    double eta_min = 1e-4;
    double clip_norm = 0.1; // <= 0 disables clipping
    std::size_t patience = 10;
    std::size_t batch_size = 128;
    std::size_t max_epochs = 100;
    std::size_t folds = 5;
    double val_fraction = 0.1; // holdout used when no validation set is given
    std::size_t threads = 1;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(lr > eta_min && eta_min > 0.0)) throw InputError("TrainConfig: need lr > eta_min > 0");
        if (patience < 1) throw InputError("TrainConfig: patience must be >= 1");
        if (batch_size < 1) throw InputError("TrainConfig: batch_size must be >= 1");
    }
};

struct Metrics {
    Task task = Task::trajectory;
    std::string metric; // "mse" or "accuracy"
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_fold;
};

struct TrainingCurves {
    std::vector<double> train_loss;
    std::vector<double> val_metric;
    std::vector<double> lr;
};

// --- optimizer pieces --------------------------------------------------------

inline double cosine_lr(std::size_t epoch, std::size_t max_epochs, double lr0, double eta_min) {
    if (epoch > max_epochs) throw InputError("cosine_lr: epoch beyond max_epochs");
    const double frac = static_cast<double>(epoch) / static_cast<double>(std::max<std::size_t>(1, max_epochs));
    return eta_min + (lr0 - eta_min) * (1.0 + std::cos(M_PI * frac)) / 2.0;
}

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<std::pair<std::string, ad::Tensor>>& params,
                             double max_norm) {
    if (!(max_norm > 0.0)) throw InputError("clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& [name, t] : params)
        for (double g : t.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& [name, t] : params)
            for (double& g : const_cast<ad::Tensor&>(t).grad()) g *= s;
    }
    return norm;
}

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t t = 0;
    std::vector<std::vector<double>> m, v; // aligned with the named parameter list
    std::size_t skipped = 0;               // steps dropped due to non-finite gradients

    void init(const std::vector<std::pair<std::string, ad::Tensor>>& params) {
        m.clear();
        v.clear();
        for (const auto& [name, p] : params) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
        t = 0;
        skipped = 0;
    }
};

// One Adam update with bias correction. Non-finite gradients skip the whole
// step (parameters and step counter untouched) and are counted.
inline bool adam_step(const std::vector<std::pair<std::string, ad::Tensor>>& params,
                      AdamState& state, double lr) {
    for (const auto& [name, p] : params)
        for (double g : p.grad())
            if (!std::isfinite(g)) {
                ++state.skipped;
                return false;
            }
    ++state.t;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        ad::Tensor p = params[pi].second;
        const auto& g = p.grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        auto& x = p.data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            x[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
    return true;
}

// --- losses and metrics --------------------------------------------------------

inline ad::Tensor sample_loss(ad::Tape& tape, const DnsParameters& p, const Sample& sample) {
    const ObservationSeries series = to_series(sample);
    const ForwardPass fp = integrate(tape, p, series);
    if (p.cfg.task == Task::trajectory) {
        ad::Tensor pred = readout_trajectory(tape, p, fp.final_state().z);
        return ad::mse_loss(tape, pred, ad::Tensor::from_mat(sample.target));
    }
    ad::Tensor logits = readout_links(tape, p, fp.final_state().z);
    return tape.bce_with_logits(logits, sample.target.a);
}

namespace train_detail {

// Runs fn(worker, begin, end) over fixed contiguous chunks. Chunk boundaries
// depend only on (count, threads), which keeps reductions reproducible.
template <typename Fn>
inline void parallel_chunks(std::size_t count, std::size_t threads, Fn&& fn) {
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, count));
    if (workers == 1) {
        fn(std::size_t{0}, std::size_t{0}, count);
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = count * w / workers;
        const std::size_t end = count * (w + 1) / workers;
        pool.emplace_back([&, w, begin, end]() { fn(w, begin, end); });
    }
    for (auto& th : pool) th.join();
}

struct BatchResult {
    double mean_loss = 0.0;
};

// Mean loss and mean gradient over the batch, accumulated into params' grads.
inline BatchResult batch_gradient(const DnsParameters& params, const Dataset& data,
                                  const std::vector<std::size_t>& order, std::size_t begin,
                                  std::size_t end, std::size_t threads) {
    const std::size_t count = end - begin;
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, count));
    std::vector<DnsParameters> worker_params;
    std::vector<double> worker_loss(workers, 0.0);
    for (std::size_t w = 0; w < workers; ++w) worker_params.push_back(params.clone());

    parallel_chunks(count, workers, [&](std::size_t w, std::size_t lo, std::size_t hi) {
        const DnsParameters& wp = worker_params[w];
        wp.zero_grad();
        for (std::size_t s = lo; s < hi; ++s) {
            ad::Tape tape;
            ad::Tensor loss = sample_loss(tape, wp, data.samples[order[begin + s]]);
            worker_loss[w] += loss.value();
            tape.backward(loss);
        }
    });

    const double inv = 1.0 / static_cast<double>(count);
    const auto master = params.named();
    BatchResult res;
    for (std::size_t w = 0; w < workers; ++w) {
        res.mean_loss += worker_loss[w];
        const auto part = worker_params[w].named();
        for (std::size_t pi = 0; pi < master.size(); ++pi) {
            auto& dst = const_cast<ad::Tensor&>(master[pi].second).grad();
            const auto& src = part[pi].second.grad();
            if (src.empty()) continue;
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i] * inv;
        }
    }
    res.mean_loss *= inv;
    return res;
}

} // namespace train_detail

// Task metric on a dataset: MSE over all outputs (trajectory) or pair accuracy
// at threshold 0.5 (links).
inline Metrics evaluate(const DnsParameters& params, const Dataset& data, std::size_t threads = 1) {
    if (data.samples.empty()) throw InputError("evaluate: empty dataset");
    if (data.task != params.cfg.task) throw InputError("evaluate: dataset/model task mismatch");
    const std::size_t n = data.samples.size();
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
    std::vector<double> err_sum(workers, 0.0);
    std::vector<std::size_t> err_count(workers, 0);

    train_detail::parallel_chunks(n, workers, [&](std::size_t w, std::size_t lo, std::size_t hi) {
        for (std::size_t s = lo; s < hi; ++s) {
            const Sample& sample = data.samples[s];
            ad::Tape tape;
            const ForwardPass fp = integrate(tape, params, to_series(sample));
            if (params.cfg.task == Task::trajectory) {
                ad::Tensor pred = readout_trajectory(tape, params, fp.final_state().z);
                for (std::size_t i = 0; i < pred.numel(); ++i) {
                    const double d = pred.data()[i] - sample.target.a[i];
                    err_sum[w] += d * d;
                }
                err_count[w] += pred.numel();
            } else {
                ad::Tensor logits = readout_links(tape, params, fp.final_state().z);
                for (std::size_t i = 0; i < logits.numel(); ++i) {
                    const bool predicted = logits.data()[i] > 0.0; // sigmoid(x) > 0.5
                    const bool truth = sample.target.a[i] > 0.5;
                    if (predicted == truth) err_sum[w] += 1.0;
                }
                err_count[w] += logits.numel();
            }
        }
    });

    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t w = 0; w < workers; ++w) {
        total += err_sum[w];
        count += err_count[w];
    }
    Metrics m;
    m.task = params.cfg.task;
    m.metric = params.cfg.task == Task::trajectory ? "mse" : "accuracy";
    m.mean = total / static_cast<double>(count);
    m.per_fold = {m.mean};
    return m;
}

// --- training loop -------------------------------------------------------------

// Epoch-granular trainer; all mutable state is exposed so a checkpoint can
// freeze and resume it mid-run.
class Trainer {
public:
    Trainer(const DnsConfig& model_cfg, const TrainConfig& tc, Dataset train_data, Dataset val_data)
        : tc_(tc), train_(std::move(train_data)), val_(std::move(val_data)),
          shuffle_rng_(Rng::stream(tc.seed, 0x5u)) {
        tc_.validate();
        model_cfg.validate();
        if (train_.task != model_cfg.task) throw InputError("train: dataset/model task mismatch");
        Rng init_rng = Rng::stream(tc.seed, 0x1u);
        params_ = init_parameters(model_cfg, init_rng);
        best_ = params_.clone();
        best_metric_ = worst_metric();
        adam_.init(params_.named());
    }

    // Splits off a deterministic validation holdout from the tail.
    static std::pair<Dataset, Dataset> holdout_split(const Dataset& data, double val_fraction) {
        const std::size_t n = data.samples.size();
        if (n < 2) throw InputError("holdout_split: need at least 2 samples");
        std::size_t n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
        n_val = std::max<std::size_t>(1, std::min(n_val, n - 1));
        Dataset train, val;
        train.task = val.task = data.task;
        train.metadata = val.metadata = data.metadata;
        train.samples.assign(data.samples.begin(), data.samples.end() - n_val);
        val.samples.assign(data.samples.end() - n_val, data.samples.end());
        return {std::move(train), std::move(val)};
    }

    void run_epoch() {
        const double lr = cosine_lr(epoch_, tc_.max_epochs, tc_.lr, tc_.eta_min);
        std::vector<std::size_t> order(train_.samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle_rng_.shuffle(order);

        const auto named = params_.named();
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t b = 0; b < order.size(); b += tc_.batch_size) {
            const std::size_t end = std::min(order.size(), b + tc_.batch_size);
            params_.zero_grad();
            const auto res =
                train_detail::batch_gradient(params_, train_, order, b, end, tc_.threads);
            if (!std::isfinite(res.mean_loss)) {
                double gn = 0.0;
                for (const auto& [nm, t] : named)
                    for (double g : t.grad()) gn += g * g;
                throw NumericError("train: loss diverged at epoch " + std::to_string(epoch_) +
                                   " batch " + std::to_string(n_batches) + " (lr " +
                                   std::to_string(lr) + ", grad norm " +
                                   std::to_string(std::sqrt(gn)) + ")");
            }
            if (tc_.clip_norm > 0.0) {
                clip_grad_norm(named, tc_.clip_norm);
#ifndef NDEBUG
                double post = 0.0;
                for (const auto& [nm, t] : named)
                    for (double g : t.grad()) post += g * g;
                assert(std::sqrt(post) <= tc_.clip_norm + 1e-12);
#endif
            }
            adam_step(named, adam_, lr);
            epoch_loss += res.mean_loss;
            ++n_batches;
        }
        ++epoch_;

        const Metrics vm = evaluate(params_, val_, tc_.threads);
        curves_.train_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(1, n_batches)));
        curves_.val_metric.push_back(vm.mean);
        curves_.lr.push_back(lr);

        if (improved(vm.mean, best_metric_)) {
            best_metric_ = vm.mean;
            best_ = params_.clone();
            epochs_since_best_ = 0;
        } else {
            ++epochs_since_best_;
        }
    }

    bool done() const { return epoch_ >= tc_.max_epochs || epochs_since_best_ >= tc_.patience; }

    void run() {
        while (!done()) run_epoch();
    }

    const DnsParameters& best_parameters() const { return best_; }
    const DnsParameters& current_parameters() const { return params_; }
    DnsParameters& mutable_parameters() { return params_; }
    double best_metric() const { return best_metric_; }
    const TrainingCurves& curves() const { return curves_; }
    TrainingCurves& mutable_curves() { return curves_; }
    std::size_t epoch() const { return epoch_; }
    const Dataset& validation_set() const { return val_; }
    AdamState& adam() { return adam_; }
    Rng& shuffle_rng() { return shuffle_rng_; }
    const TrainConfig& train_config() const { return tc_; }

    // Checkpoint restore hooks.
    void restore(DnsParameters params, DnsParameters best, double best_metric, std::size_t epoch,
                 std::size_t epochs_since_best) {
        params_ = std::move(params);
        best_ = std::move(best);
        best_metric_ = best_metric;
        epoch_ = epoch;
        epochs_since_best_ = epochs_since_best;
    }
    std::size_t epochs_since_best() const { return epochs_since_best_; }

    bool improved(double candidate, double incumbent) const {
        return train_.task == Task::trajectory ? candidate < incumbent : candidate > incumbent;
    }
    double worst_metric() const {
        return train_.task == Task::trajectory ? std::numeric_limits<double>::infinity()
                                               : -std::numeric_limits<double>::infinity();
    }

private:
    TrainConfig tc_;
    Dataset train_, val_;
    Rng shuffle_rng_;
    DnsParameters params_, best_;
    AdamState adam_;
    TrainingCurves curves_;
    double best_metric_ = 0.0;
    std::size_t epoch_ = 0;
    std::size_t epochs_since_best_ = 0;
};

struct TrainResult {
    DnsParameters best;
    Metrics metrics; // best-epoch validation metric
    TrainingCurves curves;
    std::size_t epochs = 0;
};

inline TrainResult train(const DnsConfig& model_cfg, const Dataset& train_data,
                         const Dataset* val_data, const TrainConfig& tc) {
    Dataset tr, va;
    if (val_data) {
        tr = train_data;
        va = *val_data;
    } else {
        std::tie(tr, va) = Trainer::holdout_split(train_data, tc.val_fraction);
    }
    Trainer t(model_cfg, tc, std::move(tr), std::move(va));
    t.run();
    TrainResult res;
    res.best = t.best_parameters().clone();
    res.curves = t.curves();
    res.epochs = t.epoch();
    res.metrics.task = model_cfg.task;
    res.metrics.metric = model_cfg.task == Task::trajectory ? "mse" : "accuracy";
    res.metrics.mean = t.best_metric();
    res.metrics.per_fold = {t.best_metric()};
    return res;
}

// k-fold cross-validation over contiguous fold blocks; per-fold metric is the
// best validation metric of that fold's run.
inline Metrics crossval(const DnsConfig& model_cfg, const Dataset& data, const TrainConfig& tc) {
    if (tc.folds < 2) throw InputError("crossval: folds must be >= 2");
    const std::size_t n = data.samples.size();
    Metrics agg;
    agg.task = model_cfg.task;
    agg.metric = model_cfg.task == Task::trajectory ? "mse" : "accuracy";
    for (std::size_t f = 0; f < tc.folds; ++f) {
        const std::size_t lo = n * f / tc.folds;
        const std::size_t hi = n * (f + 1) / tc.folds;
        Dataset tr, va;
        tr.task = va.task = data.task;
        tr.metadata = va.metadata = data.metadata;
        for (std::size_t i = 0; i < n; ++i)
            (i >= lo && i < hi ? va : tr).samples.push_back(data.samples[i]);
        // folds share the base seed: identical fold data implies identical runs
        TrainResult r = train(model_cfg, tr, &va, tc);
        agg.per_fold.push_back(r.metrics.mean);
    }
    double sum = 0.0;
    for (double v : agg.per_fold) sum += v;
    agg.mean = sum / static_cast<double>(agg.per_fold.size());
    double var = 0.0;
    for (double v : agg.per_fold) var += (v - agg.mean) * (v - agg.mean);
    agg.stddev = std::sqrt(var / static_cast<double>(agg.per_fold.size()));
    return agg;
}

// --- decoupling ablation ---------------------------------------------------------

struct AblationRow {
    std::string name;
    double accuracy = 0.0;
};

// Trains the control-encoding / meta-system variants under one budget and
// seed and reports test accuracy per row.
inline std::vector<AblationRow> ablation_suite(const Dataset& train_data, const Dataset& test_data,
                                               const DnsConfig& base, const TrainConfig& tc) {
    if (train_data.task != Task::links)
        throw InputError("ablation_suite: expects a link-prediction dataset");

    auto variant = [&](const std::string& name, DnsConfig cfg) {
        TrainResult r = train(cfg, train_data, nullptr, tc);
        const Metrics m = evaluate(r.best, test_data, tc.threads);
        return AblationRow{name, m.mean};
    };

    std::vector<AblationRow> rows;
    DnsConfig no_enc = base;
    no_enc.n = 1;
    no_enc.encoder_mode = EncoderMode::identity;
    no_enc.m = 0;
    rows.push_back(variant("no-encoding", no_enc));

    DnsConfig mlp2 = base;
    mlp2.n = 1;
    mlp2.m = 2 * base.k;
    rows.push_back(variant("mlp-2x", mlp2));

    DnsConfig mlp16 = base;
    mlp16.n = 1;
    mlp16.m = 16 * base.k;
    rows.push_back(variant("mlp-16x", mlp16));

    DnsConfig frozen = base;
    frozen.meta_mode = MetaMode::frozen_identity;
    rows.push_back(variant("frozen-a", frozen));

    rows.push_back(variant("dns", base));
    return rows;
}

} // namespace dns
