// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dns/datagen.hpp"
#include "dns/errors.hpp"

// Dataset persistence. The binary format is little-endian and bit-exact under
// round trips: magic "DNSD", u16 version, u8 task tag, u32 sample count,
// length-prefixed metadata JSON, then per sample a (T, k, target_rows,
// target_cols) header followed by f64 payloads. A JSON-lines export is
// provided for plotting and interoperability.

namespace dns {

namespace io_detail {

class ByteReader {
public:
    explicit ByteReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw FormatError("cannot open " + path);
    }

    void read(void* dst, std::size_t n) {
        in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError(path_ + ": truncated at byte offset " + std::to_string(offset_));
        offset_ += n;
    }

    template <typename T>
    T scalar() {
        T v;
        read(&v, sizeof(T));
        return v;
    }

    std::vector<double> doubles(std::size_t count) {
        std::vector<double> v(count);
        if (count) read(v.data(), count * sizeof(double));
        return v;
    }

    std::size_t offset() const { return offset_; }

private:
    std::string path_;
    std::ifstream in_;
    std::size_t offset_ = 0;
};

class ByteWriter {
public:
    explicit ByteWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw FormatError("cannot open " + path + " for writing");
    }

    void write(const void* src, std::size_t n) {
        out_.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(n));
    }

    template <typename T>
    void scalar(T v) {
        write(&v, sizeof(T));
    }

    void doubles(const std::vector<double>& v) {
        if (!v.empty()) write(v.data(), v.size() * sizeof(double));
    }

    void close() {
        out_.close();
        if (!out_) throw FormatError("write failed");
    }

private:
    std::ofstream out_;
};

} // namespace io_detail

inline void write_dataset(const Dataset& ds, const std::string& path) {
    io_detail::ByteWriter w(path);
    w.write("DNSD", 4);
    w.scalar<std::uint16_t>(1);
    w.scalar<std::uint8_t>(ds.task == Task::trajectory ? 0 : 1);
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(ds.samples.size()));
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(ds.metadata.size()));
    w.write(ds.metadata.data(), ds.metadata.size());
    for (const Sample& s : ds.samples) {
        w.scalar<std::uint32_t>(static_cast<std::uint32_t>(s.times.size()));
        w.scalar<std::uint32_t>(static_cast<std::uint32_t>(s.observations.cols));
        w.scalar<std::uint32_t>(static_cast<std::uint32_t>(s.target.rows));
        w.scalar<std::uint32_t>(static_cast<std::uint32_t>(s.target.cols));
        w.doubles(s.times);
        w.doubles(s.observations.a);
        w.doubles(s.target.a);
    }
    w.close();
}

inline Dataset read_dataset(const std::string& path) {
    io_detail::ByteReader r(path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "DNSD", 4) != 0)
        throw FormatError(path + ": bad magic at byte offset 0");
    const auto version = r.scalar<std::uint16_t>();
    if (version != 1)
        throw FormatError(path + ": unsupported version " + std::to_string(version));
    const auto task = r.scalar<std::uint8_t>();
    if (task > 1) throw FormatError(path + ": bad task tag at byte offset 6");
    const auto count = r.scalar<std::uint32_t>();
    const auto meta_len = r.scalar<std::uint32_t>();
    Dataset ds;
    ds.task = task == 0 ? Task::trajectory : Task::links;
    ds.metadata.resize(meta_len);
    if (meta_len) r.read(ds.metadata.data(), meta_len);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto t = r.scalar<std::uint32_t>();
        const auto k = r.scalar<std::uint32_t>();
        const auto tr = r.scalar<std::uint32_t>();
        const auto tc = r.scalar<std::uint32_t>();
        Sample s;
        s.times = r.doubles(t);
        s.observations = Mat(t, k);
        s.observations.a = r.doubles(static_cast<std::size_t>(t) * k);
        s.target = Mat(tr, tc);
        s.target.a = r.doubles(static_cast<std::size_t>(tr) * tc);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

inline void write_dataset_jsonl(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    for (const Sample& s : ds.samples) {
        nlohmann::json j;
        j["times"] = s.times;
        auto mat_to_rows = [](const Mat& m) {
            std::vector<std::vector<double>> rows;
            for (std::size_t i = 0; i < m.rows; ++i) rows.push_back(m.row(i));
            return rows;
        };
        j["observations"] = mat_to_rows(s.observations);
        j["target"] = mat_to_rows(s.target);
        out << j.dump() << "\n";
    }
}

// FNV-1a over a file's bytes; used to fingerprint datasets in run manifests.
inline std::uint64_t file_fingerprint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    std::uint64_t h = 1469598103934665603ULL;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
        if (!in) break;
    }
    return h;
}

} // namespace dns
