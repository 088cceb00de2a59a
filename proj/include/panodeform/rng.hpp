#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace panodeform {

/// splitmix64 finalizer; used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t x);

/// One deterministic random stream per named concern ("init", "data-order",
/// "augment", ...), so changing how one concern consumes randomness leaves
/// the others untouched.
std::mt19937_64 make_stream(std::uint64_t seed, std::string_view name);

/// Uniform in [0, 1) computed from the raw 64-bit output (portable across
/// standard library implementations, unlike std::uniform_real_distribution).
double uniform01(std::mt19937_64& rng);
double uniform(std::mt19937_64& rng, double lo, double hi);
/// Integer in [0, n).
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);
/// Box-Muller standard normal.
double normal(std::mt19937_64& rng);
/// Normal(0, sigma) truncated to +-2 sigma by rejection.
double truncated_normal(std::mt19937_64& rng, double sigma);

}  // namespace panodeform
