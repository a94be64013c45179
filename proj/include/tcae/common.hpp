#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tcae {

// Config/usage errors (bad shapes, bad files, bad flags).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values detected in a forward pass. Training loops catch this
// and abort with the last-good checkpoint.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void append_msg(std::ostringstream&) {}
template <class A, class... Rest>
void append_msg(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    append_msg(os, rest...);
}
template <class Err, class... Args>
[[noreturn]] void fail(const char* cond, const char* file, int line, const Args&... args) {
    std::ostringstream os;
    os << file << ":" << line << ": check failed (" << cond << ")";
    if constexpr (sizeof...(Args) > 0) {
        os << ": ";
        append_msg(os, args...);
    }
    throw Err(os.str());
}
}  // namespace detail

#define TCAE_CHECK(cond, ...)                                                              \
    do {                                                                                   \
        if (!(cond)) ::tcae::detail::fail<::tcae::ConfigError>(#cond, __FILE__, __LINE__,  \
                                                               ##__VA_ARGS__);             \
    } while (0)

#define TCAE_CHECK_IO(cond, ...)                                                           \
    do {                                                                                   \
        if (!(cond)) ::tcae::detail::fail<::tcae::IoError>(#cond, __FILE__, __LINE__,      \
                                                           ##__VA_ARGS__);                 \
    } while (0)

// FNV-1a, used for config hashes and checkpoint fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace tcae
