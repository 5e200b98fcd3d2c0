#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "metastate/tensor.hpp"

namespace metastate {

using Rng = std::mt19937_64;

// FNV-1a over the tag, mixed with the seed through splitmix64.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

// Uniform on [0, 1) from the top 53 bits; identical across standard libraries.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

template <typename T>
Tensor<T> uniform_tensor(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng) {
    Tensor<T> out(rows, cols);
    for (T& v : out.values()) v = static_cast<T>(uniform(rng, lo, hi));
    return out;
}

} // namespace metastate
