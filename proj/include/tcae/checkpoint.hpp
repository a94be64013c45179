#pragma once

// Checkpoint container: magic "TCAE", version u32 LE, tensor count u32, then
// per entry: name length u32, UTF-8 name, ndim u32, dims as u32, payload as
// f32 LE. Payloads are always f32 regardless of the compute dtype.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tcae/param.hpp"

namespace tcae {

constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

using TensorMap = std::map<std::string, NamedTensor>;

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
    char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
    out.append(b, 4);
}
inline std::uint32_t get_u32(const std::string& s, std::size_t& off) {
    TCAE_CHECK_IO(off + 4 <= s.size(), "checkpoint: truncated");
    auto b = reinterpret_cast<const unsigned char*>(s.data() + off);
    off += 4;
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}
}  // namespace detail

inline std::string serialize_checkpoint(const TensorMap& tensors) {
    std::string out = "TCAE";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, std::uint32_t(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u32(out, std::uint32_t(name.size()));
        out.append(name);
        detail::put_u32(out, std::uint32_t(t.dims.size()));
        std::uint64_t n = 1;
        for (auto d : t.dims) {
            detail::put_u32(out, d);
            n *= d;
        }
        TCAE_CHECK(n == t.data.size(), "checkpoint: dims/payload mismatch for '", name, "'");
        static_assert(sizeof(float) == 4);
        for (float f : t.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            detail::put_u32(out, bits);
        }
    }
    return out;
}

inline TensorMap parse_checkpoint(const std::string& blob) {
    TCAE_CHECK_IO(blob.size() >= 12 && blob.compare(0, 4, "TCAE") == 0, "checkpoint: bad magic");
    std::size_t off = 4;
    std::uint32_t version = detail::get_u32(blob, off);
    TCAE_CHECK_IO(version == kCheckpointVersion, "checkpoint: unknown version ", version);
    std::uint32_t count = detail::get_u32(blob, off);
    TensorMap out;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = detail::get_u32(blob, off);
        TCAE_CHECK_IO(off + name_len <= blob.size(), "checkpoint: truncated name");
        std::string name = blob.substr(off, name_len);
        off += name_len;
        std::uint32_t ndim = detail::get_u32(blob, off);
        NamedTensor t;
        std::uint64_t n = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            t.dims.push_back(detail::get_u32(blob, off));
            n *= t.dims.back();
        }
        t.data.resize(n);
        for (std::uint64_t j = 0; j < n; ++j) {
            std::uint32_t bits = detail::get_u32(blob, off);
            std::memcpy(&t.data[j], &bits, 4);
        }
        TCAE_CHECK_IO(!out.count(name), "checkpoint: duplicate tensor '", name, "'");
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

inline void write_file(const std::string& path, const std::string& blob) {
    std::ofstream f(path, std::ios::binary);
    TCAE_CHECK_IO(f.good(), "cannot open '", path, "' for writing");
    f.write(blob.data(), std::streamsize(blob.size()));
    TCAE_CHECK_IO(f.good(), "write failed for '", path, "'");
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    TCAE_CHECK_IO(f.good(), "cannot open '", path, "'");
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return blob;
}

template <class T>
TensorMap registry_to_tensors(const ParamRegistry<T>& reg) {
    TensorMap out;
    for (const auto& p : reg.all()) {
        NamedTensor t;
        for (auto d : p->tensor.shape()) t.dims.push_back(std::uint32_t(d));
        t.data.reserve(p->values().size());
        for (auto v : p->values()) t.data.push_back(float(v));
        out.emplace(p->name, std::move(t));
    }
    return out;
}

template <class T>
void load_registry(ParamRegistry<T>& reg, const TensorMap& tensors) {
    for (const auto& p : reg.all()) {
        auto it = tensors.find(p->name);
        TCAE_CHECK_IO(it != tensors.end(), "checkpoint: missing tensor '", p->name, "'");
        TCAE_CHECK_IO(std::int64_t(it->second.data.size()) == p->size(),
                      "checkpoint: size mismatch for '", p->name, "'");
        auto& w = p->values();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = T(it->second.data[i]);
    }
}

template <class T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg) {
    write_file(path, serialize_checkpoint(registry_to_tensors(reg)));
}

template <class T>
void load_checkpoint(const std::string& path, ParamRegistry<T>& reg) {
    load_registry(reg, parse_checkpoint(read_file(path)));
}

}  // namespace tcae
