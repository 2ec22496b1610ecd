#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace mmvq {

// FNV-1a, used for config hashes and per-module seed derivation so results
// do not depend on std::hash.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t base, std::string_view module) {
    return fnv1a(module, base ^ 0x9e3779b97f4a7c15ull);
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace mmvq
