#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nfaseg/error.hpp"
#include "nfaseg/network.hpp"

namespace nfaseg {

struct CheckpointMeta {
    long epoch = 0;
    unsigned long long seed = 0;
    double best_val = 0.0;
};

struct LoadedCheckpoint {
    NetworkSpec spec;
    CheckpointMeta meta;
    std::shared_ptr<Network> network;
    std::map<std::string, std::vector<double>> opt_acc;
};

namespace detail {

constexpr char kMagic[4] = {'D', 'N', 'F', 'A'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;
constexpr std::uint8_t kDtypeF64 = 2;

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

/// Cursor over a loaded file; every read checks the remaining length so a
/// truncated file surfaces as a format error rather than UB.
struct Reader {
    const unsigned char* data;
    size_t size;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > size) throw_format("checkpoint truncated: unexpected end of file");
    }
    std::uint8_t u8() {
        need(1);
        return data[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(data[pos]) |
                          static_cast<std::uint16_t>(data[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
        pos += 8;
        return std::bit_cast<double>(v);
    }
    float f32() {
        need(4);
        return std::bit_cast<float>(u32());
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data + pos), n);
        pos += n;
        return s;
    }
};

struct RawEntry {
    std::vector<std::uint32_t> dims;
    std::vector<double> values;
};

inline void append_entry(std::string& payload, const std::string& name,
                         const std::vector<std::uint32_t>& dims,
                         const double* values, size_t count) {
    if (name.size() > 0xffff) throw_parameter("checkpoint entry name too long: " + name);
    put_u16(payload, static_cast<std::uint16_t>(name.size()));
    payload.append(name);
    payload.push_back(static_cast<char>(kDtypeF64));
    payload.push_back(static_cast<char>(dims.size()));
    size_t n = 1;
    for (auto d : dims) {
        put_u32(payload, d);
        n *= d;
    }
    if (n != count)
        throw_parameter("checkpoint entry '" + name + "' dims do not match data size");
    for (size_t i = 0; i < count; ++i) put_f64(payload, values[i]);
}

inline std::vector<double> encode_spec(const NetworkSpec& s) {
    std::vector<double> v;
    v.push_back(static_cast<double>(s.levels));
    for (long c : s.channels) v.push_back(static_cast<double>(c));
    v.push_back(static_cast<double>(s.in_channels));
    v.push_back(s.head == HeadKind::Nfa ? 0.0 : 1.0);
    v.push_back(static_cast<double>(static_cast<int>(s.form)));
    v.push_back(s.multiscale ? 1.0 : 0.0);
    v.push_back(s.use_eca ? 1.0 : 0.0);
    v.push_back(s.use_spatial ? 1.0 : 0.0);
    v.push_back(s.reduce == ReduceMode::Max ? 1.0 : 0.0);
    v.push_back(s.alpha);
    v.push_back(s.reg_weight);
    v.push_back(static_cast<double>(s.nfa_width));
    v.push_back(static_cast<double>(s.window));
    return v;
}

inline NetworkSpec decode_spec(const std::vector<double>& v) {
    if (v.size() < 2) throw_format("checkpoint spec entry too short");
    NetworkSpec s;
    s.levels = static_cast<long>(v[0]);
    if (s.levels < 1 || v.size() != static_cast<size_t>(1 + s.levels + 11))
        throw_format("checkpoint spec entry has inconsistent length");
    s.channels.clear();
    for (long l = 0; l < s.levels; ++l) s.channels.push_back(static_cast<long>(v[1 + l]));
    size_t i = static_cast<size_t>(1 + s.levels);
    s.in_channels = static_cast<long>(v[i++]);
    s.head = v[i++] == 0.0 ? HeadKind::Nfa : HeadKind::Plain;
    const int form = static_cast<int>(v[i++]);
    if (form < 0 || form > 2) throw_format("checkpoint spec has unknown covariance form");
    s.form = static_cast<CovarianceForm>(form);
    s.multiscale = v[i++] != 0.0;
    s.use_eca = v[i++] != 0.0;
    s.use_spatial = v[i++] != 0.0;
    s.reduce = v[i++] != 0.0 ? ReduceMode::Max : ReduceMode::Min;
    s.alpha = v[i++];
    s.reg_weight = v[i++];
    s.nfa_width = static_cast<long>(v[i++]);
    s.window = static_cast<long>(v[i++]);
    return s;
}

}  // namespace detail

/// Writes the network (parameters, batch-norm statistics, optimizer
/// accumulators, run metadata) as a single self-validating binary file:
/// magic "DNFA", little-endian u16 version, u32 entry count, the entries
/// (u16 name length, name, u8 dtype, u8 rank, u32 dims, raw values), and a
/// CRC32 footer over everything after the version field.
inline void save_checkpoint(const std::string& path, Network& net,
                            const CheckpointMeta& meta,
                            const std::map<std::string, std::vector<double>>* opt_acc =
                                nullptr) {
    using namespace detail;
    std::string payload;
    std::uint32_t count = 0;
    std::string table;

    auto add = [&](const std::string& name, const std::vector<std::uint32_t>& dims,
                   const double* values, size_t n) {
        append_entry(table, name, dims, values, n);
        ++count;
    };

    for (const auto& [name, t] : net.parameters()) {
        const auto [n, c, h, w] = t->shape;
        add(name,
            {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(c),
             static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w)},
            t->data.data(), t->data.size());
    }
    for (const auto& [prefix, bn] : net.bn_states()) {
        add(prefix + ".bn.mean", {static_cast<std::uint32_t>(bn->running_mean.size())},
            bn->running_mean.data(), bn->running_mean.size());
        add(prefix + ".bn.var", {static_cast<std::uint32_t>(bn->running_var.size())},
            bn->running_var.data(), bn->running_var.size());
    }
    if (opt_acc) {
        for (const auto& [name, acc] : *opt_acc)
            add("opt." + name, {static_cast<std::uint32_t>(acc.size())}, acc.data(),
                acc.size());
    }
    const auto spec_vec = detail::encode_spec(net.spec());
    add("__spec__", {static_cast<std::uint32_t>(spec_vec.size())}, spec_vec.data(),
        spec_vec.size());
    const double epoch = static_cast<double>(meta.epoch);
    add("__epoch__", {1}, &epoch, 1);
    const double seed_parts[2] = {static_cast<double>(meta.seed >> 32),
                                  static_cast<double>(meta.seed & 0xffffffffULL)};
    add("__seed__", {2}, seed_parts, 2);
    add("__best_val__", {1}, &meta.best_val, 1);

    put_u32(payload, count);
    payload += table;

    std::string file;
    file.append(kMagic, 4);
    put_u16(file, kVersion);
    file += payload;
    const auto crc =
        ::crc32(::crc32(0L, nullptr, 0),
                reinterpret_cast<const unsigned char*>(payload.data()),
                static_cast<uInt>(payload.size()));
    put_u32(file, static_cast<std::uint32_t>(crc));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw_io("cannot open checkpoint file for writing: " + path);
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out) throw_io("failed writing checkpoint file: " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    using namespace detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw_io("cannot open checkpoint file: " + path);
    std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (file.size() < 14) throw_format("checkpoint truncated: file too small");
    if (std::memcmp(file.data(), kMagic, 4) != 0)
        throw_format("not a checkpoint file: bad magic");
    Reader r{reinterpret_cast<const unsigned char*>(file.data()), file.size(), 4};
    const auto version = r.u16();
    if (version != kVersion)
        throw_format("unsupported checkpoint version " + std::to_string(version) +
                     " (supported: " + std::to_string(kVersion) + ")");

    const size_t payload_begin = 6;
    const size_t payload_end = file.size() - 4;
    const auto crc_stored = [&] {
        Reader f{reinterpret_cast<const unsigned char*>(file.data()), file.size(),
                 payload_end};
        return f.u32();
    }();
    const auto crc_actual =
        ::crc32(::crc32(0L, nullptr, 0),
                reinterpret_cast<const unsigned char*>(file.data() + payload_begin),
                static_cast<uInt>(payload_end - payload_begin));
    if (static_cast<std::uint32_t>(crc_actual) != crc_stored)
        throw_format("checkpoint corrupt: CRC mismatch");

    r.size = payload_end;  // keep entry reads off the footer
    const auto count = r.u32();
    std::map<std::string, RawEntry> entries;
    std::vector<std::string> order;
    for (std::uint32_t e = 0; e < count; ++e) {
        const auto name_len = r.u16();
        const std::string name = r.bytes(name_len);
        const auto dtype = r.u8();
        if (dtype != kDtypeF32 && dtype != kDtypeF64)
            throw_format("checkpoint entry '" + name + "' has unknown dtype code " +
                         std::to_string(dtype));
        const auto rank = r.u8();
        RawEntry entry;
        size_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            entry.dims.push_back(r.u32());
            n *= entry.dims.back();
        }
        entry.values.resize(n);
        for (size_t i = 0; i < n; ++i)
            entry.values[i] = dtype == kDtypeF64 ? r.f64() : static_cast<double>(r.f32());
        order.push_back(name);
        entries[name] = std::move(entry);
    }
    if (r.pos != payload_end) throw_format("checkpoint has trailing bytes after entries");

    auto take = [&](const std::string& name) -> RawEntry& {
        auto it = entries.find(name);
        if (it == entries.end())
            throw_format("checkpoint missing entry '" + name + "'");
        return it->second;
    };

    LoadedCheckpoint out;
    out.spec = decode_spec(take("__spec__").values);
    {
        const auto& e = take("__epoch__");
        if (e.values.size() != 1) throw_format("checkpoint epoch entry malformed");
        out.meta.epoch = static_cast<long>(e.values[0]);
    }
    {
        const auto& e = take("__seed__");
        if (e.values.size() != 2) throw_format("checkpoint seed entry malformed");
        out.meta.seed = (static_cast<unsigned long long>(e.values[0]) << 32) |
                        static_cast<unsigned long long>(e.values[1]);
    }
    {
        const auto& e = take("__best_val__");
        if (e.values.size() != 1) throw_format("checkpoint best-val entry malformed");
        out.meta.best_val = e.values[0];
    }

    out.network = std::make_shared<Network>(out.spec, out.meta.seed);
    for (auto& [name, t] : out.network->parameters()) {
        auto& e = take(name);
        if (e.dims.size() != 4)
            throw_format("checkpoint entry '" + name + "' has rank " +
                         std::to_string(e.dims.size()) + ", expected 4");
        const Shape want = t->shape;
        const Shape got{static_cast<long>(e.dims[0]), static_cast<long>(e.dims[1]),
                        static_cast<long>(e.dims[2]), static_cast<long>(e.dims[3])};
        if (!(want == got))
            throw_format("checkpoint entry '" + name + "' has shape " + got.str() +
                         ", expected " + want.str());
        t->data = e.values;
    }
    for (auto& [prefix, bn] : out.network->bn_states()) {
        auto& mean = take(prefix + ".bn.mean");
        auto& var = take(prefix + ".bn.var");
        if (mean.values.size() != bn->running_mean.size() ||
            var.values.size() != bn->running_var.size())
            throw_format("checkpoint entry '" + prefix +
                         ".bn.*' does not match network channel count");
        bn->running_mean = mean.values;
        bn->running_var = var.values;
    }
    for (const auto& name : order)
        if (name.rfind("opt.", 0) == 0)
            out.opt_acc[name.substr(4)] = entries[name].values;
    return out;
}

}  // namespace nfaseg
