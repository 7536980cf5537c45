// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dns/errors.hpp"
#include "dns/io.hpp"
#include "dns/model.hpp"
#include "dns/train.hpp"

// Checkpoints: versioned container with a human-inspectable JSON header
// (configs, shapes, RNG state, curves) followed by little-endian f64 payloads
// per named tensor. Loading a checkpoint and resuming reproduces the
// uninterrupted run bit-for-bit under the same thread count.

namespace dns {

inline nlohmann::json config_to_json(const DnsConfig& c) {
    nlohmann::json j;
    j["n"] = c.n;
    j["q"] = c.q;
    j["k"] = c.k;
    j["m"] = c.m;
    j["d_k"] = c.d_k;
    j["field_depth"] = c.field_depth;
    j["projection"] = c.projection == Projection::softmax ? "softmax" : "sparsemax";
    j["meta_mode"] = c.meta_mode == MetaMode::reparameterized   ? "reparameterized"
                     : c.meta_mode == MetaMode::discrete_projde ? "discrete-projde"
                                                                : "frozen-identity";
    j["encoder"] = c.encoder_mode == EncoderMode::mlp ? "mlp" : "identity";
    j["substeps"] = c.substeps;
    j["spline"] = c.spline == SplineKind::interpolating ? "interpolating" : "smoothing";
    j["smoothing_lambda"] = c.smoothing_lambda;
    j["field_final_tanh"] = c.field_final_tanh;
    j["append_time_channel"] = c.append_time_channel;
    j["task"] = c.task == Task::trajectory ? "trajectory" : "links";
    j["horizon"] = c.horizon;
    j["n_particles"] = c.n_particles;
    return j;
}

inline DnsConfig config_from_json(const nlohmann::json& j) {
    DnsConfig c;
    c.n = j.at("n");
    c.q = j.at("q");
    c.k = j.at("k");
    c.m = j.at("m");
    c.d_k = j.at("d_k");
    c.field_depth = j.at("field_depth");
    c.projection = j.at("projection") == "softmax" ? Projection::softmax : Projection::sparsemax;
    const std::string mm = j.at("meta_mode");
    c.meta_mode = mm == "reparameterized"   ? MetaMode::reparameterized
                  : mm == "discrete-projde" ? MetaMode::discrete_projde
                                            : MetaMode::frozen_identity;
    c.encoder_mode = j.at("encoder") == "mlp" ? EncoderMode::mlp : EncoderMode::identity;
    c.substeps = j.at("substeps");
    c.spline = j.at("spline") == "interpolating" ? SplineKind::interpolating : SplineKind::smoothing;
    c.smoothing_lambda = j.at("smoothing_lambda");
    c.field_final_tanh = j.at("field_final_tanh");
    c.append_time_channel = j.at("append_time_channel");
    c.task = j.at("task") == "trajectory" ? Task::trajectory : Task::links;
    c.horizon = j.at("horizon");
    c.n_particles = j.at("n_particles");
    return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
    nlohmann::json j;
    j["lr"] = t.lr;
    j["eta_min"] = t.eta_min;
    j["clip_norm"] = t.clip_norm;
    j["patience"] = t.patience;
    j["batch_size"] = t.batch_size;
    j["max_epochs"] = t.max_epochs;
    j["folds"] = t.folds;
    j["val_fraction"] = t.val_fraction;
    j["threads"] = t.threads;
    j["seed"] = t.seed;
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig t;
    t.lr = j.at("lr");
    t.eta_min = j.at("eta_min");
    t.clip_norm = j.at("clip_norm");
    t.patience = j.at("patience");
    t.batch_size = j.at("batch_size");
    t.max_epochs = j.at("max_epochs");
    t.folds = j.at("folds");
    t.val_fraction = j.at("val_fraction");
    t.threads = j.at("threads");
    t.seed = j.at("seed");
    return t;
}

inline void save_checkpoint(const std::string& path, Trainer& trainer) {
    const DnsParameters& cur = trainer.current_parameters();
    const DnsParameters& best = trainer.best_parameters();
    const AdamState& adam = trainer.adam();

    nlohmann::json header;
    header["format"] = "dns-checkpoint";
    header["version"] = 1;
    header["model"] = config_to_json(cur.cfg);
    header["train"] = train_config_to_json(trainer.train_config());
    header["state"] = {{"epoch", trainer.epoch()},
                       {"epochs_since_best", trainer.epochs_since_best()},
                       {"best_metric", trainer.best_metric()},
                       {"adam_t", adam.t},
                       {"adam_skipped", adam.skipped},
                       {"rng", trainer.shuffle_rng().serialize()}};
    header["curves"] = {{"train_loss", trainer.curves().train_loss},
                        {"val_metric", trainer.curves().val_metric},
                        {"lr", trainer.curves().lr}};
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : cur.named())
        tensors.push_back({{"name", name}, {"shape", t.shape()}});
    header["tensors"] = tensors;
    const std::string head = header.dump();

    io_detail::ByteWriter w(path);
    w.write("DNSC", 4);
    w.scalar<std::uint16_t>(1);
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(head.size()));
    w.write(head.data(), head.size());
    for (const auto& [name, t] : cur.named()) w.doubles(t.data());
    for (const auto& [name, t] : best.named()) w.doubles(t.data());
    for (const auto& m : adam.m) w.doubles(m);
    for (const auto& v : adam.v) w.doubles(v);
    w.close();
}

struct LoadedCheckpoint {
    DnsConfig cfg;
    TrainConfig tc;
    DnsParameters current;
    DnsParameters best;
    AdamState adam;
    std::string rng_state;
    std::size_t epoch = 0;
    std::size_t epochs_since_best = 0;
    double best_metric = 0.0;
    TrainingCurves curves;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    io_detail::ByteReader r(path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "DNSC", 4) != 0) throw FormatError(path + ": not a checkpoint");
    const auto version = r.scalar<std::uint16_t>();
    if (version != 1) throw FormatError(path + ": unsupported checkpoint version");
    const auto head_len = r.scalar<std::uint32_t>();
    std::string head(head_len, '\0');
    r.read(head.data(), head_len);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(head);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad header json: " + e.what());
    }

    LoadedCheckpoint out;
    out.cfg = config_from_json(header.at("model"));
    out.tc = train_config_from_json(header.at("train"));
    Rng dummy(0);
    out.current = init_parameters(out.cfg, dummy);
    out.best = init_parameters(out.cfg, dummy);

    auto check_and_fill = [&](DnsParameters& p) {
        const auto named = p.named();
        const auto& tensors = header.at("tensors");
        if (tensors.size() != named.size()) throw FormatError(path + ": tensor list mismatch");
        for (std::size_t i = 0; i < named.size(); ++i) {
            if (tensors[i].at("name") != named[i].first)
                throw FormatError(path + ": tensor name mismatch for " + named[i].first);
            const std::vector<std::size_t> shape = tensors[i].at("shape");
            if (shape != named[i].second.shape())
                throw FormatError(path + ": tensor shape mismatch for " + named[i].first);
            auto data = r.doubles(named[i].second.numel());
            const_cast<ad::Tensor&>(named[i].second).data() = std::move(data);
        }
    };
    check_and_fill(out.current);
    check_and_fill(out.best);

    out.adam.t = header.at("state").at("adam_t");
    out.adam.skipped = header.at("state").at("adam_skipped");
    for (const auto& [name, t] : out.current.named()) out.adam.m.push_back(r.doubles(t.numel()));
    for (const auto& [name, t] : out.current.named()) out.adam.v.push_back(r.doubles(t.numel()));

    out.rng_state = header.at("state").at("rng");
    out.epoch = header.at("state").at("epoch");
    out.epochs_since_best = header.at("state").at("epochs_since_best");
    out.best_metric = header.at("state").at("best_metric");
    out.curves.train_loss = header.at("curves").at("train_loss").get<std::vector<double>>();
    out.curves.val_metric = header.at("curves").at("val_metric").get<std::vector<double>>();
    out.curves.lr = header.at("curves").at("lr").get<std::vector<double>>();
    return out;
}

// Rebuilds a Trainer mid-run from a checkpoint plus the original datasets.
inline Trainer resume_trainer(const LoadedCheckpoint& ck, Dataset train_data, Dataset val_data) {
    Trainer t(ck.cfg, ck.tc, std::move(train_data), std::move(val_data));
    t.adam() = ck.adam;
    t.restore(ck.current.clone(), ck.best.clone(), ck.best_metric, ck.epoch, ck.epochs_since_best);
    t.shuffle_rng().deserialize(ck.rng_state);
    t.mutable_curves() = ck.curves;
    return t;
}

inline nlohmann::json metrics_to_json(const Metrics& m) {
    nlohmann::json j;
    j["schema"] = "metrics v1";
    j["task"] = m.task == Task::trajectory ? "trajectory" : "links";
    j["metric"] = m.metric;
    j["mean"] = m.mean;
    j["std"] = m.stddev;
    j["per_fold"] = m.per_fold;
    return j;
}

} // namespace dns
