#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace engage {

// FNV-1a, 64 bit. Used for corpus fingerprints, stage caching and
// the seed fan-out below. Not cryptographic; collision odds at desk
// scale are negligible.
constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = kFnvOffset) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

std::string to_hex(std::uint64_t v);

// Per-stage seed derivation: global seed is hashed together with the
// stage name, so every stage owns an independent reproducible stream.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage);

inline std::mt19937_64 make_rng(std::uint64_t seed) {
    return std::mt19937_64(seed);
}

// Draw u in [0, 1).
inline double uniform01(std::mt19937_64& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);
std::vector<std::string> read_lines(const std::filesystem::path& path);

std::string format_double(double v);

std::uint64_t hash_file(const std::filesystem::path& path);

}  // namespace engage
