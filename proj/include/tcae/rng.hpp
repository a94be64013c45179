#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "tcae/common.hpp"

namespace tcae {

// Counter-based splittable PRNG. A stream is (key, counter); draws hash the
// counter under the key, so streams derived from the same name sequence are
// identical across runs and platforms. Distributions are implemented here
// rather than via <random> because libstdc++/libc++ disagree on them.
class RngStream {
public:
    explicit RngStream(std::uint64_t key = 0) : key_(key) {}

    static RngStream from_seed(std::uint64_t seed) { return RngStream(mix64(seed + 0x9e3779b97f4a7c15ULL)); }

    // Derive an independent child stream; the parent is not advanced.
    RngStream split(const std::string& label) const {
        return RngStream(mix64(key_ ^ mix64(fnv1a64(label))));
    }
    RngStream split(std::uint64_t index) const {
        return RngStream(mix64(key_ ^ mix64(index + 0x632be59bd9b4e019ULL)));
    }

    std::uint64_t next_u64() {
        counter_ += 1;
        return mix64(key_ + mix64(counter_ * 0xd1342543de82ef95ULL));
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n == 0 is an error.
    std::uint64_t next_below(std::uint64_t n) {
        TCAE_CHECK(n > 0, "next_below(0)");
        return std::uint64_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller; the spare is cached per stream.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));  // log(1-u1): avoids log(0)
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::uint64_t key() const { return key_; }

private:
    static std::uint64_t mix64(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace tcae
