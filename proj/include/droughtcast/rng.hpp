#pragma once

// All randomness in a run flows from one root seed. Component streams are
// derived by hashing the root seed with a stream label, so adding a new
// consumer never shifts the draws of an existing one.

#include <cstdint>
#include <random>
#include <string>

namespace droughtcast {

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 1469598103934665603ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic child stream: seed ^ hash(label), mixed.
inline std::mt19937_64 make_stream(std::uint64_t root_seed, const std::string& label) {
    return std::mt19937_64(splitmix64(root_seed ^ fnv1a64(label)));
}

}  // namespace droughtcast
