#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>

namespace flowssc {

using Rng = std::mt19937_64;

// 64-bit FNV-1a over a byte string.
constexpr std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a global seed and a purpose string.
// Adding a new consumer never perturbs the seeds of existing ones.
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::string_view purpose) {
    return splitmix64(seed ^ splitmix64(fnv1a64(purpose)));
}

constexpr std::uint64_t stream_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index) {
    return splitmix64(stream_seed(seed, purpose) + splitmix64(index + 1));
}

inline Rng make_stream(std::uint64_t seed, std::string_view purpose) { return Rng(stream_seed(seed, purpose)); }

inline Rng make_stream(std::uint64_t seed, std::string_view purpose, std::uint64_t index) {
    return Rng(stream_seed(seed, purpose, index));
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace flowssc
