#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vcl {

// All randomness in the project flows from one root seed. Components draw
// from named substreams so that, e.g., changing how many dropout masks are
// sampled never perturbs the split or the SMOTE interpolation.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t substream(uint64_t seed, std::string_view name) {
    uint64_t h = 0xcbf29ce484222325ull; // FNV-1a
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return mix64(seed ^ h);
}

inline uint64_t substream(uint64_t seed, std::string_view name, uint64_t counter) {
    return mix64(substream(seed, name) ^ mix64(counter + 1));
}

inline std::mt19937_64 make_rng(uint64_t seed, std::string_view name) {
    return std::mt19937_64(substream(seed, name));
}

inline std::mt19937_64 make_rng(uint64_t seed, std::string_view name, uint64_t counter) {
    return std::mt19937_64(substream(seed, name, counter));
}

} // namespace vcl
