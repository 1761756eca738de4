#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>

namespace mpsae {

namespace detail {

// SplitMix64 finalizer; used to mix stream labels and indices into keys.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

/// Philox4x32-10 block function (Salmon et al. constants).
inline void philox4x32_10(const std::uint32_t ctr_in[4], const std::uint32_t key_in[2],
                          std::uint32_t out[4]) {
    std::uint32_t c0 = ctr_in[0], c1 = ctr_in[1], c2 = ctr_in[2], c3 = ctr_in[3];
    std::uint32_t k0 = key_in[0], k1 = key_in[1];
    for (int round = 0; round < 10; ++round) {
        if (round > 0) {
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        const std::uint64_t p0 = static_cast<std::uint64_t>(0xD2511F53u) * c0;
        const std::uint64_t p1 = static_cast<std::uint64_t>(0xCD9E8D57u) * c2;
        const std::uint32_t n0 = static_cast<std::uint32_t>(p1 >> 32) ^ c1 ^ k0;
        const std::uint32_t n1 = static_cast<std::uint32_t>(p1);
        const std::uint32_t n2 = static_cast<std::uint32_t>(p0 >> 32) ^ c3 ^ k1;
        const std::uint32_t n3 = static_cast<std::uint32_t>(p0);
        c0 = n0;
        c1 = n1;
        c2 = n2;
        c3 = n3;
    }
    out[0] = c0;
    out[1] = c1;
    out[2] = c2;
    out[3] = c3;
}

} // namespace detail

/// Counter-based stream RNG (Philox4x32-10).
///
/// Streams are identified by a 64-bit id derived from the root seed, a
/// component label, and numeric indices. Distinct streams are statistically
/// independent and any stream can be reconstructed without generating its
/// predecessors, so parallel replicates stay reproducible.
class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : id_(detail::splitmix64(seed)) { rekey(); }

    /// Derive a child stream from a label and up to three indices.
    RngStream child(std::string_view label, std::uint64_t i0 = 0, std::uint64_t i1 = 0,
                    std::uint64_t i2 = 0) const {
        std::uint64_t id = id_;
        id = detail::splitmix64(id ^ detail::fnv1a64(label));
        id = detail::splitmix64(id ^ i0);
        id = detail::splitmix64(id ^ i1);
        id = detail::splitmix64(id ^ i2);
        return RngStream(id, 0);
    }

    std::uint64_t next_u64() {
        if (buf_pos_ >= 2) refill();
        return buf_[buf_pos_++];
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform01() < p; }

    /// Uniform integer in [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n) {
        // rejection keeps the distribution exact
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller; caches the second deviate.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform01(); // in (0, 1]
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

  private:
    RngStream(std::uint64_t id, int) : id_(id) { rekey(); }

    void rekey() {
        const std::uint64_t k = detail::splitmix64(id_);
        key_[0] = static_cast<std::uint32_t>(k);
        key_[1] = static_cast<std::uint32_t>(k >> 32);
        ctr_hi_ = detail::splitmix64(id_ ^ 0xA5A5A5A5A5A5A5A5ull);
        ctr_lo_ = 0;
        buf_pos_ = 2;
        have_spare_ = false;
    }

    void refill() {
        const std::uint32_t ctr[4] = {
            static_cast<std::uint32_t>(ctr_lo_),
            static_cast<std::uint32_t>(ctr_lo_ >> 32),
            static_cast<std::uint32_t>(ctr_hi_),
            static_cast<std::uint32_t>(ctr_hi_ >> 32),
        };
        std::uint32_t out[4];
        detail::philox4x32_10(ctr, key_, out);
        buf_[0] = (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
        buf_[1] = (static_cast<std::uint64_t>(out[3]) << 32) | out[2];
        buf_pos_ = 0;
        ++ctr_lo_; // 128-bit counter; the low word never wraps in practice
        if (ctr_lo_ == 0) ++ctr_hi_;
    }

    std::uint64_t id_;
    std::uint32_t key_[2];
    std::uint64_t ctr_hi_, ctr_lo_;
    std::uint64_t buf_[2];
    int buf_pos_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace mpsae
