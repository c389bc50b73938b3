#pragma once

#include <cstdint>
#include <random>

namespace miro {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Stream tags keep independent consumers of one seed from sharing draws.
enum class Stream : std::uint64_t {
    dataset = 1,
    init = 2,
    batch = 3,
    noise = 4,
    eval = 5,
    sample = 6,
    trial = 7,
};

/// Seed derived from (seed, stream, index). Serial and parallel callers that
/// agree on the triple observe the same draws.
constexpr std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index = 0) noexcept {
    std::uint64_t h = detail::splitmix64(seed);
    h = detail::splitmix64(h ^ static_cast<std::uint64_t>(stream));
    return detail::splitmix64(h ^ index);
}

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    return Rng(derive_seed(seed, stream, index));
}

}  // namespace miro
