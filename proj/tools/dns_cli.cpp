// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: dataset generation, training, evaluation,
// meta-system and focus inspection, and the projection comparison table.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dns/checkpoint.hpp"
#include "dns/datagen.hpp"
#include "dns/io.hpp"
#include "dns/model.hpp"
#include "dns/simplex.hpp"
#include "dns/train.hpp"

namespace {

using namespace dns;

std::uint64_t json_hash(const nlohmann::json& j) {
    const std::string s = j.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    out << text;
}

struct GenOptions {
    std::string task;
    std::string variant = "regular";
    std::size_t n = 100;
    std::uint64_t seed = 1;
    std::string out;
    std::string jsonl;
    std::size_t particles = 5;
    double velocity_scale = 0.5;
    double spring_constant = 2.0;
    double noise_sigma = 0.05;
};

int cmd_gen(const GenOptions& o) {
    Dataset ds;
    if (o.task == "three-body") {
        if (o.variant != "regular" && o.variant != "irregular")
            throw InputError("gen: three-body supports the regular and irregular variants");
        ThreeBodyConfig cfg;
        cfg.n_samples = o.n;
        cfg.seed = o.seed;
        cfg.velocity_scale = o.velocity_scale;
        cfg.irregular = o.variant == "irregular";
        cfg.history_len = cfg.irregular ? 6 : 8;
        ds = make_three_body_dataset(cfg);
    } else if (o.task == "spring") {
        SpringConfig cfg;
        cfg.n_samples = o.n;
        cfg.seed = o.seed;
        cfg.n_particles = o.particles;
        cfg.spring_constant = o.spring_constant;
        if (o.variant == "irregular") {
            cfg.irregular_len = 19;
        } else if (o.variant == "noisy") {
            cfg.noise_sigma = o.noise_sigma;
        } else if (o.variant == "short50") {
            cfg.crop_fraction = 0.5;
        } else if (o.variant == "short25") {
            cfg.crop_fraction = 0.25;
        } else if (o.variant != "regular") {
            throw InputError("gen: unknown spring variant " + o.variant);
        }
        ds = make_spring_dataset(cfg);
    } else {
        throw InputError("gen: unknown task " + o.task);
    }
    write_dataset(ds, o.out);
    if (!o.jsonl.empty()) write_dataset_jsonl(ds, o.jsonl);
    std::cout << ds.metadata << "\n";
    return 0;
}

struct TrainOptions {
    std::string data;
    std::string val;
    std::string model = "dns";
    std::size_t n_sub = 4;
    std::size_t hidden = 16;
    std::size_t field_depth = 2;
    std::size_t d_k = 16;
    std::size_t substeps = 1;
    double lambda = 1.0;
    std::uint64_t seed = 1;
    std::string out = ".";
    std::string resume;
    std::string meta_mode = "reparameterized";
    bool no_encoder = false;
    std::size_t folds = 0;
    std::size_t stop_after = 0; // 0 = run to completion
    TrainConfig tc;
};

DnsConfig model_config_for(const TrainOptions& o, const Dataset& data) {
    DnsConfig cfg;
    cfg.n = o.n_sub;
    cfg.q = o.hidden;
    cfg.k = data.channels();
    cfg.d_k = o.d_k;
    cfg.field_depth = o.field_depth;
    cfg.substeps = o.substeps;
    cfg.task = data.task;
    if (o.model == "dns") {
        cfg.projection = Projection::softmax;
    } else if (o.model == "dns-g") {
        cfg.projection = Projection::sparsemax;
    } else if (o.model == "dns-s") {
        cfg.projection = Projection::softmax;
        cfg.spline = SplineKind::smoothing;
        cfg.smoothing_lambda = o.lambda;
    } else {
        throw InputError("train: unknown model tag " + o.model);
    }
    if (o.meta_mode == "discrete-projde") {
        cfg.meta_mode = MetaMode::discrete_projde;
    } else if (o.meta_mode == "frozen-identity") {
        cfg.meta_mode = MetaMode::frozen_identity;
    } else if (o.meta_mode != "reparameterized") {
        throw InputError("train: unknown meta mode " + o.meta_mode);
    }
    if (o.no_encoder) {
        cfg.encoder_mode = EncoderMode::identity;
    }
    if (data.task == Task::trajectory) {
        cfg.horizon = data.samples.front().target.rows;
    } else {
        cfg.n_particles = data.channels() / 4;
    }
    return cfg;
}

nlohmann::json manifest_for(const std::string& data_path, const nlohmann::json& model_json,
                            const nlohmann::json& train_json, const nlohmann::json& metrics,
                            double wall_seconds) {
    nlohmann::json man;
    man["schema"] = "manifest v1";
    man["dataset"] = {{"path", data_path}, {"fingerprint", file_fingerprint(data_path)}};
    man["model_config"] = model_json;
    man["model_config_hash"] = json_hash(model_json);
    man["train_config"] = train_json;
    man["train_config_hash"] = json_hash(train_json);
    man["metrics"] = metrics;
    man["wall_clock_seconds"] = wall_seconds;
    return man;
}

int cmd_train(const TrainOptions& o) {
    const auto start = std::chrono::steady_clock::now();
    const Dataset data = read_dataset(o.data);
    if (data.samples.empty()) throw InputError("train: dataset is empty");
    std::filesystem::create_directories(o.out);

    if (o.folds >= 2) {
        DnsConfig cfg = model_config_for(o, data);
        TrainConfig tc = o.tc;
        tc.seed = o.seed;
        tc.folds = o.folds;
        const Metrics m = crossval(cfg, data, tc);
        const auto metrics_json = metrics_to_json(m);
        write_text(o.out + "/metrics.json", metrics_json.dump(2));
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_text(o.out + "/manifest.json",
                   manifest_for(o.data, config_to_json(cfg), train_config_to_json(tc),
                                metrics_json, wall)
                       .dump(2));
        std::cout << metrics_json.dump(2) << "\n";
        return 0;
    }

    Dataset train_set, val_set;
    if (!o.val.empty()) {
        train_set = data;
        val_set = read_dataset(o.val);
    } else {
        std::tie(train_set, val_set) = Trainer::holdout_split(data, o.tc.val_fraction);
    }
    write_dataset(val_set, o.out + "/val.bin");

    Trainer trainer = [&]() {
        if (!o.resume.empty()) {
            const auto ck = load_checkpoint(o.resume);
            return resume_trainer(ck, train_set, val_set);
        }
        TrainConfig tc = o.tc;
        tc.seed = o.seed;
        DnsConfig cfg = model_config_for(o, data);
        return Trainer(cfg, tc, train_set, val_set);
    }();

    std::size_t ran = 0;
    while (!trainer.done() && (o.stop_after == 0 || ran < o.stop_after)) {
        trainer.run_epoch();
        ++ran;
        save_checkpoint(o.out + "/checkpoint.bin", trainer);
        std::cout << "epoch " << trainer.epoch() << " train_loss "
                  << trainer.curves().train_loss.back() << " val "
                  << trainer.curves().val_metric.back() << " lr " << trainer.curves().lr.back()
                  << std::endl;
    }
    if (trainer.epoch() == 0) save_checkpoint(o.out + "/checkpoint.bin", trainer);

    Metrics m;
    m.task = trainer.best_parameters().cfg.task;
    m.metric = m.task == Task::trajectory ? "mse" : "accuracy";
    m.mean = trainer.best_metric();
    m.per_fold = {m.mean};
    const auto metrics_json = metrics_to_json(m);
    nlohmann::json curves = {{"train_loss", trainer.curves().train_loss},
                             {"val_metric", trainer.curves().val_metric},
                             {"lr", trainer.curves().lr}};
    write_text(o.out + "/metrics.json", metrics_json.dump(2));
    write_text(o.out + "/curves.json", curves.dump(2));
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_text(o.out + "/manifest.json",
               manifest_for(o.data, config_to_json(trainer.best_parameters().cfg),
                            train_config_to_json(trainer.train_config()), metrics_json, wall)
                   .dump(2));
    std::cout << metrics_json.dump(2) << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, const std::string& out,
             std::size_t threads) {
    const auto ck = load_checkpoint(ckpt);
    const Dataset data = read_dataset(data_path);
    const Metrics m = evaluate(ck.best, data, threads);
    const auto j = metrics_to_json(m);
    if (!out.empty()) write_text(out, j.dump(2));
    std::cout << j.dump(2) << "\n";
    if (m.task == Task::trajectory)
        std::cout << "mse_x1e2 " << m.mean * 100.0 << "\n";
    return 0;
}

int cmd_inspect_meta(const std::string& ckpt, const std::string& data_path, std::size_t sample_idx,
                     const std::string& out) {
    const auto ck = load_checkpoint(ckpt);
    const Dataset data = read_dataset(data_path);
    if (sample_idx >= data.samples.size()) throw InputError("inspect-meta: sample out of range");
    ad::Tape tape;
    const auto fp = integrate(tape, ck.best, to_series(data.samples[sample_idx]));

    std::ofstream csv(out);
    if (!csv) throw FormatError("cannot open " + out);
    csv << "# schema: dns-meta v1\n";
    csv << "t,i,j,a_ij\n";
    csv.precision(17);
    std::size_t zeros = 0, total = 0;
    const std::size_t n = ck.best.cfg.n;
    for (const auto& st : fp.states) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double v = st.a.data()[i * n + j];
                csv << st.t << "," << i << "," << j << "," << v << "\n";
                zeros += v == 0.0 ? 1 : 0;
                ++total;
            }
    }
    std::cout << "steps " << fp.states.size() << " exact_zero_fraction "
              << static_cast<double>(zeros) / static_cast<double>(total) << "\n";
    return 0;
}

int cmd_inspect_focus(const std::string& ckpt, const std::string& data_path, std::size_t n_samples,
                      bool normalize, const std::string& out) {
    const auto ck = load_checkpoint(ckpt);
    const Dataset data = read_dataset(data_path);
    const std::size_t count = std::min<std::size_t>(n_samples, data.samples.size());
    if (count == 0) throw InputError("inspect-focus: no samples");
    Mat acc(ck.best.cfg.n, ck.best.cfg.k, 0.0);
    for (std::size_t s = 0; s < count; ++s) {
        const Mat f = compute_focus(ck.best, to_series(data.samples[s]), false);
        for (std::size_t i = 0; i < f.a.size(); ++i) acc.a[i] += f.a[i];
    }
    for (double& v : acc.a) v /= static_cast<double>(count);
    if (normalize) {
        for (std::size_t i = 0; i < acc.rows; ++i) {
            double mx = 0.0;
            for (std::size_t j = 0; j < acc.cols; ++j) mx = std::max(mx, acc.at(i, j));
            if (mx > 0.0)
                for (std::size_t j = 0; j < acc.cols; ++j) acc.at(i, j) /= mx;
        }
    }
    std::ofstream csv(out);
    if (!csv) throw FormatError("cannot open " + out);
    csv << "# schema: dns-focus v1\n";
    csv << "subsystem,channel,sensitivity\n";
    csv.precision(17);
    for (std::size_t i = 0; i < acc.rows; ++i)
        for (std::size_t j = 0; j < acc.cols; ++j)
            csv << i << "," << j << "," << acc.at(i, j) << "\n";
    std::cout << "rows " << acc.rows * acc.cols << "\n";
    return 0;
}

int cmd_compare_proj(std::size_t n_points, std::uint64_t seed, const std::string& out) {
    Rng rng(seed);
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < n_points; ++i)
        pts.emplace_back(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
    const auto rows = projection_comparison(pts);
    std::ofstream csv(out);
    if (!csv) throw FormatError("cannot open " + out);
    csv << "# schema: dns-projections v1\n";
    csv << "x0,x1,soft0,soft1,sparse0,sparse1\n";
    csv.precision(17);
    std::size_t vertex_hits = 0;
    for (const auto& r : rows) {
        csv << r.x0 << "," << r.x1 << "," << r.soft0 << "," << r.soft1 << "," << r.sparse0 << ","
            << r.sparse1 << "\n";
        if (r.sparse0 == 0.0 || r.sparse1 == 0.0) ++vertex_hits;
    }
    std::cout << "points " << rows.size() << " vertex_hits " << vertex_hits << "\n";
    return 0;
}

int cmd_ablate(const std::string& train_path, const std::string& test_path, TrainOptions o,
               const std::string& out) {
    const Dataset train_data = read_dataset(train_path);
    const Dataset test_data = read_dataset(test_path);
    DnsConfig base = model_config_for(o, train_data);
    TrainConfig tc = o.tc;
    tc.seed = o.seed;
    const auto rows = ablation_suite(train_data, test_data, base, tc);
    std::ofstream csv(out);
    if (!csv) throw FormatError("cannot open " + out);
    csv << "# schema: dns-ablation v1\n";
    csv << "variant,accuracy\n";
    for (const auto& r : rows) csv << r.name << "," << r.accuracy << "\n";
    for (const auto& r : rows) std::cout << r.name << " " << r.accuracy << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"decoupling-based neural system: datasets, training, inspection"};
    app.require_subcommand(1);

    GenOptions gen;
    auto* sgen = app.add_subcommand("gen", "generate a benchmark dataset");
    sgen->add_option("--task", gen.task, "three-body or spring")->required();
    sgen->add_option("--variant", gen.variant, "regular|irregular|noisy|short50|short25");
    sgen->add_option("--n", gen.n, "sample count")->required();
    sgen->add_option("--seed", gen.seed, "rng seed");
    sgen->add_option("--out", gen.out, "output dataset path")->required();
    sgen->add_option("--jsonl", gen.jsonl, "also export json-lines to this path");
    sgen->add_option("--particles", gen.particles, "spring particle count");
    sgen->add_option("--velocity-scale", gen.velocity_scale, "three-body initial velocity std");
    sgen->add_option("--spring-constant", gen.spring_constant, "spring stiffness");
    sgen->add_option("--noise-sigma", gen.noise_sigma, "spring noisy-variant sigma");

    TrainOptions tr;
    auto* strain = app.add_subcommand("train", "train a model");
    strain->add_option("--data", tr.data, "training dataset")->required();
    strain->add_option("--val", tr.val, "validation dataset (default: tail holdout)");
    strain->add_option("--model", tr.model, "dns|dns-g|dns-s");
    strain->add_option("--n-sub", tr.n_sub, "subsystem count");
    strain->add_option("--hidden", tr.hidden, "hidden dim per subsystem");
    strain->add_option("--field-depth", tr.field_depth, "layers in the shared field");
    strain->add_option("--d-k", tr.d_k, "query/key dim");
    strain->add_option("--substeps", tr.substeps, "Euler substeps per knot interval");
    strain->add_option("--lambda", tr.lambda, "smoothing spline lambda (dns-s)");
    strain->add_option("--seed", tr.seed, "seed");
    strain->add_option("--out", tr.out, "output directory")->required();
    strain->add_option("--resume", tr.resume, "resume from checkpoint");
    strain->add_option("--meta-mode", tr.meta_mode,
                       "reparameterized|discrete-projde|frozen-identity");
    strain->add_flag("--no-encoder", tr.no_encoder, "identity control encoder");
    strain->add_option("--folds", tr.folds, "run k-fold cross-validation instead");
    strain->add_option("--epochs", tr.tc.max_epochs, "epoch cap");
    strain->add_option("--patience", tr.tc.patience, "early-stopping patience");
    strain->add_option("--batch", tr.tc.batch_size, "batch size");
    strain->add_option("--lr", tr.tc.lr, "initial learning rate");
    strain->add_option("--eta-min", tr.tc.eta_min, "cosine annealing floor");
    strain->add_option("--clip", tr.tc.clip_norm, "max gradient norm (<=0 disables)");
    strain->add_option("--threads", tr.tc.threads, "batch worker threads");
    strain->add_option("--val-fraction", tr.tc.val_fraction, "holdout fraction");
    strain->add_option("--stop-after", tr.stop_after,
                       "pause after this many epochs in this invocation (resume later)");

    std::string eval_ckpt, eval_data, eval_out;
    std::size_t eval_threads = 1;
    auto* seval = app.add_subcommand("eval", "evaluate a checkpoint");
    seval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    seval->add_option("--data", eval_data, "dataset path")->required();
    seval->add_option("--out", eval_out, "write metrics json here");
    seval->add_option("--threads", eval_threads, "threads");

    std::string im_ckpt, im_data, im_out;
    std::size_t im_sample = 0;
    auto* simeta = app.add_subcommand("inspect-meta", "dump A(t) at every integrator step");
    simeta->add_option("--ckpt", im_ckpt)->required();
    simeta->add_option("--data", im_data)->required();
    simeta->add_option("--sample", im_sample, "sample index");
    simeta->add_option("--out", im_out, "csv path")->required();

    std::string if_ckpt, if_data, if_out;
    std::size_t if_samples = 16;
    bool if_norm = false;
    auto* sifocus = app.add_subcommand("inspect-focus", "gradient-sensitivity focus matrix");
    sifocus->add_option("--ckpt", if_ckpt)->required();
    sifocus->add_option("--data", if_data)->required();
    sifocus->add_option("--n-samples", if_samples, "samples to average");
    sifocus->add_flag("--normalize", if_norm, "scale each row to max 1");
    sifocus->add_option("--out", if_out, "csv path")->required();

    std::size_t cp_points = 100;
    std::uint64_t cp_seed = 1;
    std::string cp_out;
    auto* scproj = app.add_subcommand("compare-proj", "softmax vs sparsemax projection table");
    scproj->add_option("--n-points", cp_points, "points in [-2,2]^2");
    scproj->add_option("--seed", cp_seed, "seed");
    scproj->add_option("--out", cp_out, "csv path")->required();

    std::string ab_train, ab_test, ab_out;
    TrainOptions ab;
    auto* sablate = app.add_subcommand("ablate", "control-encoding / meta-system ablation table");
    sablate->add_option("--data", ab_train, "training dataset")->required();
    sablate->add_option("--test", ab_test, "test dataset")->required();
    sablate->add_option("--out", ab_out, "csv path")->required();
    sablate->add_option("--model", ab.model);
    sablate->add_option("--n-sub", ab.n_sub);
    sablate->add_option("--hidden", ab.hidden);
    sablate->add_option("--field-depth", ab.field_depth);
    sablate->add_option("--d-k", ab.d_k);
    sablate->add_option("--substeps", ab.substeps);
    sablate->add_option("--seed", ab.seed);
    sablate->add_option("--epochs", ab.tc.max_epochs);
    sablate->add_option("--patience", ab.tc.patience);
    sablate->add_option("--batch", ab.tc.batch_size);
    sablate->add_option("--lr", ab.tc.lr);
    sablate->add_option("--clip", ab.tc.clip_norm);
    sablate->add_option("--threads", ab.tc.threads);

    CLI11_PARSE(app, argc, argv);

    try {
        if (sgen->parsed()) return cmd_gen(gen);
        if (strain->parsed()) return cmd_train(tr);
        if (seval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_out, eval_threads);
        if (simeta->parsed()) return cmd_inspect_meta(im_ckpt, im_data, im_sample, im_out);
        if (sifocus->parsed())
            return cmd_inspect_focus(if_ckpt, if_data, if_samples, if_norm, if_out);
        if (scproj->parsed()) return cmd_compare_proj(cp_points, cp_seed, cp_out);
        if (sablate->parsed()) return cmd_ablate(ab_train, ab_test, ab, ab_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
