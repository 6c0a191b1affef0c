#pragma once

/**
 * Finite categorical distributions and the primitive operations every other
 * component is built on: temperature softmax, vocabulary masking, inverse-CDF
 * sampling and the residual distribution used after a rejected draft token.
 *
 * Values are immutable after construction and all operations are pure, so
 * everything here is safe to use concurrently (RandomStream excepted, which
 * is single-owner by contract).
 */

#include <cstddef>
#include <optional>
#include <vector>

#include "speclab/rng.hpp"

namespace speclab {

using Token = std::size_t;

inline constexpr double kProbSumTolerance = 1e-12;

// Residual mass below this is treated as "no rejection mass" (p == q for
// sampling purposes) and the caller falls back to sampling from p.
inline constexpr double kResidualFloor = 1e-12;

// Non-negative sampling temperature; zero selects greedy (argmax) decoding.
struct Temperature {
    double value = 1.0;

    Temperature() = default;
    explicit Temperature(double v);

    bool greedy() const { return value == 0.0; }
};

// Raw log-scores over the vocabulary. Entries are finite except where a
// vocabulary mask has pinned them to -infinity.
struct Logits {
    std::vector<double> values;

    explicit Logits(std::vector<double> v);
    static Logits zeros(std::size_t vocab_size);

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
};

// Non-empty set of allowed token indices.
class VocabMask {
public:
    VocabMask(std::size_t vocab_size, const std::vector<Token>& allowed);
    static VocabMask full(std::size_t vocab_size);

    bool allows(Token i) const { return allowed_[i] != 0; }
    std::size_t vocab_size() const { return allowed_.size(); }
    std::size_t allowed_count() const { return count_; }

private:
    std::vector<char> allowed_;
    std::size_t count_ = 0;
};

// Probability vector over the vocabulary: entries >= 0, summing to one
// within kProbSumTolerance (checked at construction).
class Categorical {
public:
    explicit Categorical(std::vector<double> probs);

    // Normalizes non-negative weights with compensated summation.
    static Categorical normalized(std::vector<double> weights);
    static Categorical uniform(std::size_t vocab_size);
    static Categorical point_mass(std::size_t vocab_size, Token index);

    std::size_t size() const { return probs_.size(); }
    double operator[](std::size_t i) const { return probs_[i]; }
    const std::vector<double>& probs() const { return probs_; }

    bool operator==(const Categorical& other) const = default;

private:
    std::vector<double> probs_;
};

// probs_i proportional to exp(z_i / t); masked (-inf) entries map to exactly 0.
// Requires t > 0 (t == 0 routes to point_mass_at_argmax) and at least one
// finite entry.
Categorical softmax(const Logits& z, Temperature t = Temperature{});

// softmax of z with entries outside the mask treated as -infinity.
Categorical masked_softmax(const Logits& z, const VocabMask& m, Temperature t = Temperature{});

// Lowest index attaining the maximum probability.
Token argmax_index(const Categorical& d);

// One-hot at argmax_index(d).
Categorical point_mass_at_argmax(const Categorical& d);

// Inverse-CDF draw; consumes exactly one uniform variate from rng.
Token sample(const Categorical& d, RandomStream& rng);

// Same, with the variate supplied (u in [0, 1)); exposed for exact tests.
Token sample_with_variate(const Categorical& d, double u);

// Normalized max(0, p - q): where target mass exceeds draft mass, used to
// resample after a rejection. Returns nullopt when the residual mass is
// below kResidualFloor ("no rejection mass"); callers fall back to p.
std::optional<Categorical> residual_distribution(const Categorical& p, const Categorical& q);

// Distribution raised to power 1/t and renormalized; t == 1 is an exact
// pass-through, t == 0 collapses to the argmax point mass. Zero entries
// stay exactly zero.
Categorical apply_temperature(const Categorical& d, Temperature t);

// Target restricted to the mask and renormalized; equals softmax of masked
// target logits. Used by the KL path under vocabulary truncation.
Categorical masked_target(const Categorical& p, const VocabMask& m);

}  // namespace speclab
