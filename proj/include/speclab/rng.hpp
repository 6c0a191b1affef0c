#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace speclab {

/**
 * Deterministic random stream. Single-owner: never share one instance
 * across threads; derive per-cell streams with derive_seed instead.
 *
 * All draws are built from raw mt19937_64 output (which the standard pins
 * down bit-exactly), not from std::*_distribution adaptors, so sequences
 * are reproducible across standard library implementations.
 */
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1) with 53 random bits.
    double next_uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n);

    double next_gaussian();

    // Gamma(shape, 1) via Marsaglia-Tsang; shape > 0.
    double next_gamma(double shape);

    // Symmetric Dirichlet(concentration) over n entries.
    std::vector<double> next_dirichlet(std::size_t n, double concentration);

private:
    std::mt19937_64 engine_;
    bool has_cached_gaussian_ = false;
    double cached_gaussian_ = 0.0;
};

// Stable seed derivation for independent sub-streams (SplitMix64 over the
// pair), so parallel cells stay deterministic regardless of scheduling.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream_id);

// FNV-1a, used for task fingerprints and context-keyed model seeds.
std::uint64_t fnv1a(std::string_view bytes);
std::uint64_t fnv1a_mix(std::uint64_t h, std::uint64_t value);

}  // namespace speclab
