#pragma once

#include <cstdint>
#include <string_view>

namespace multilid {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Independent stream seed for (base, purpose, index). Used everywhere a
/// sub-computation needs its own RNG so results do not depend on execution
/// order or thread count.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose,
                                    std::uint64_t index = 0) {
    return splitmix64(splitmix64(base ^ fnv1a(purpose)) + index);
}

}  // namespace multilid
