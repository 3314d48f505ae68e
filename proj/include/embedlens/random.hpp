#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace embedlens {

// Independent generator for (seed, stream...). Each unit of parallel work
// derives its own stream, so draws do not depend on worker count or order.
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                           std::uint64_t c = 0);

// Uniform integer in [0, n) from raw generator output (rejection sampling;
// portable across standard libraries).
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);

// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> random_permutation(std::mt19937_64& rng, std::size_t n);

// k distinct indices from 0..n-1 in ascending order.
std::vector<std::size_t> sample_without_replacement(std::mt19937_64& rng, std::size_t n,
                                                    std::size_t k);

}  // namespace embedlens

namespace embedlens {

// Uniform in [0, 1) with 53 random bits.
double uniform01(std::mt19937_64& rng);

// Box-Muller; one draw per call.
double standard_normal(std::mt19937_64& rng);

}  // namespace embedlens
