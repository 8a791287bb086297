#pragma once

#include <cstdint>
#include <vector>

namespace parbeam::rng {

/// SplitMix64 finalizer; good avalanche, used both as a hash and a stream step.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Deterministic per-key stream: state derived from (seed, key) by hashing,
/// so draws are independent of evaluation order and thread count.
class Stream {
public:
    Stream(std::uint64_t seed, std::uint64_t key)
        : state_(mix64(seed ^ 0x5851f42d4c957f2dULL) ^ mix64(key + 0x14057b7ef767814fULL)) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in the open interval (0, 1).
    double uniform() {
        return (double(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller.
    double normal();

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Poisson draw with the given mean from the stream. Inversion below mean 10,
/// PTRS transformed rejection above.
std::uint64_t poisson(double mean, Stream& s);

/// Counter-based Poisson: deterministic function of (seed, bin index, mean).
inline std::uint64_t poisson_at(std::uint64_t seed, std::uint64_t bin, double mean) {
    Stream s(seed, bin);
    return poisson(mean, s);
}

/// Seeded Fisher-Yates shuffle of 0..n-1 (portable across platforms).
std::vector<int> shuffled_indices(int n, std::uint64_t seed, std::uint64_t key);

} // namespace parbeam::rng
