#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>

#include "unikd/common.hpp"
#include "unikd/nn.hpp"
#include "unikd/tensor.hpp"

namespace unikd {

struct CheckpointMeta {
    int schema_version = 1;
    std::string architecture;
    int class_count = 0;
    std::string config_hash;
};

struct Checkpoint {
    CheckpointMeta meta;
    std::map<std::string, Tensor> tensors;
};

namespace detail {

constexpr char kCkptMagic[8] = {'U', 'K', 'D', 'C', 'K', 'P', 'T', '\x01'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("checkpoint: truncated file");
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                            const std::map<std::string, const Tensor*>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot write " + path);
    os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
    nlohmann::json header = {{"schema_version", meta.schema_version},
                             {"architecture", meta.architecture},
                             {"class_count", meta.class_count},
                             {"config_hash", meta.config_hash}};
    const std::string hs = header.dump();
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(hs.size()));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    detail::write_pod<std::uint64_t>(os, entries.size());
    for (const auto& [name, tensor] : entries) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensor->rank()));
        for (int d : tensor->shape()) detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(tensor->data()),
                 static_cast<std::streamsize>(tensor->size() * sizeof(double)));
    }
    if (!os) throw FormatError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0) {
        throw FormatError("checkpoint: bad magic in " + path);
    }
    const auto hlen = detail::read_pod<std::uint32_t>(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), hlen);
    if (!is) throw FormatError("checkpoint: truncated header");
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw FormatError("checkpoint: malformed header JSON");
    Checkpoint ckpt;
    ckpt.meta.schema_version = header.value("schema_version", 0);
    ckpt.meta.architecture = header.value("architecture", "");
    ckpt.meta.class_count = header.value("class_count", 0);
    ckpt.meta.config_hash = header.value("config_hash", "");
    const auto n = detail::read_pod<std::uint64_t>(is);
    for (std::uint64_t e = 0; e < n; ++e) {
        const auto name_len = detail::read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rank = detail::read_pod<std::uint32_t>(is);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::read_pod<std::uint32_t>(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!is) throw FormatError("checkpoint: truncated tensor data");
        ckpt.tensors.emplace(std::move(name), std::move(t));
    }
    return ckpt;
}

// Collects a module's parameters and buffers under an optional key prefix.
inline void collect_module_state(nn::Module& m, const std::string& prefix,
                                 std::map<std::string, const Tensor*>& out) {
    for (nn::Param* p : m.params()) out[prefix + p->name] = &p->value;
    for (nn::Buffer* b : m.buffers()) out[prefix + b->name] = &b->value;
}

// Restores a module's state; every expected key must be present with the
// right shape.
inline void restore_module_state(nn::Module& m, const std::string& prefix,
                                 const Checkpoint& ckpt) {
    auto restore = [&](const std::string& name, Tensor& dst) {
        auto it = ckpt.tensors.find(prefix + name);
        if (it == ckpt.tensors.end()) {
            throw FormatError("checkpoint: missing tensor " + prefix + name);
        }
        if (it->second.shape() != dst.shape()) {
            throw FormatError("checkpoint: shape mismatch for " + prefix + name + ": " +
                              Tensor::shape_str(it->second.shape()) + " vs " +
                              Tensor::shape_str(dst.shape()));
        }
        dst = it->second;
    };
    for (nn::Param* p : m.params()) restore(p->name, p->value);
    for (nn::Buffer* b : m.buffers()) restore(b->name, b->value);
}

}  // namespace unikd
