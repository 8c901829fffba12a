#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace coarse {

using Rng = std::mt19937_64;

/// Builds an independent generator for a stream identified by `seed` and a
/// list of stream coordinates (epoch, instance index, purpose tag, ...).
/// std::seed_seq has a fully specified mixing algorithm, so streams are
/// reproducible and do not depend on the order in which they are created.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {}) {
    std::vector<std::uint32_t> words;
    words.reserve(2 + 2 * stream.size());
    words.push_back(static_cast<std::uint32_t>(seed));
    words.push_back(static_cast<std::uint32_t>(seed >> 32));
    for (auto s : stream) {
        words.push_back(static_cast<std::uint32_t>(s));
        words.push_back(static_cast<std::uint32_t>(s >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n). n must be positive.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

template <typename T>
void shuffle_in_place(std::vector<T>& items, Rng& rng) {
    // Fisher-Yates with our own index draw so the permutation does not depend
    // on the standard library's std::shuffle implementation.
    for (std::size_t i = items.size(); i > 1; --i) {
        std::size_t j = uniform_index(rng, i);
        std::swap(items[i - 1], items[j]);
    }
}

// Purpose tags for derive_rng stream coordinates.
namespace stream {
inline constexpr std::uint64_t kShuffle = 1;
inline constexpr std::uint64_t kInstance = 2;
inline constexpr std::uint64_t kDropout = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kSampling = 5;
inline constexpr std::uint64_t kHeadInit = 6;
}  // namespace stream

}  // namespace coarse
