#include "speclab/dist.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "speclab/numeric.hpp"

namespace speclab {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void require(bool ok, const char* message) {
    if (!ok) {
        throw std::invalid_argument(message);
    }
}

}  // namespace

Temperature::Temperature(double v) : value(v) {
    require(std::isfinite(v) && v >= 0.0, "Temperature: value must be finite and >= 0");
}

Logits::Logits(std::vector<double> v) : values(std::move(v)) {
    require(values.size() >= 2, "Logits: vocabulary size must be at least 2");
    for (double x : values) {
        require(!std::isnan(x) && x != std::numeric_limits<double>::infinity(),
                "Logits: entries must be finite or -inf (masked)");
    }
}

Logits Logits::zeros(std::size_t vocab_size) {
    return Logits(std::vector<double>(vocab_size, 0.0));
}

VocabMask::VocabMask(std::size_t vocab_size, const std::vector<Token>& allowed)
    : allowed_(vocab_size, 0) {
    require(vocab_size >= 2, "VocabMask: vocabulary size must be at least 2");
    require(!allowed.empty(), "VocabMask: allowed set must be non-empty");
    for (Token i : allowed) {
        require(i < vocab_size, "VocabMask: token index out of range");
        if (!allowed_[i]) {
            allowed_[i] = 1;
            ++count_;
        }
    }
}

VocabMask VocabMask::full(std::size_t vocab_size) {
    std::vector<Token> all(vocab_size);
    for (std::size_t i = 0; i < vocab_size; ++i) {
        all[i] = i;
    }
    return VocabMask(vocab_size, all);
}

Categorical::Categorical(std::vector<double> probs) : probs_(std::move(probs)) {
    require(probs_.size() >= 2, "Categorical: vocabulary size must be at least 2");
    for (double p : probs_) {
        require(std::isfinite(p) && p >= 0.0, "Categorical: entries must be finite and >= 0");
    }
    const double total = kahan_sum(probs_);
    if (std::abs(total - 1.0) > kProbSumTolerance) {
        throw std::invalid_argument("Categorical: probabilities must sum to 1 within 1e-12");
    }
}

Categorical Categorical::normalized(std::vector<double> weights) {
    require(weights.size() >= 2, "Categorical: vocabulary size must be at least 2");
    KahanAccumulator acc;
    for (double w : weights) {
        require(std::isfinite(w) && w >= 0.0, "Categorical: weights must be finite and >= 0");
        acc.add(w);
    }
    const double total = acc.value();
    require(total > 0.0, "Categorical: total weight must be positive");
    for (auto& w : weights) {
        w /= total;
    }
    return Categorical(std::move(weights));
}

Categorical Categorical::uniform(std::size_t vocab_size) {
    require(vocab_size >= 2, "Categorical: vocabulary size must be at least 2");
    return Categorical::normalized(std::vector<double>(vocab_size, 1.0));
}

Categorical Categorical::point_mass(std::size_t vocab_size, Token index) {
    require(vocab_size >= 2, "Categorical: vocabulary size must be at least 2");
    require(index < vocab_size, "Categorical: point mass index out of range");
    std::vector<double> probs(vocab_size, 0.0);
    probs[index] = 1.0;
    return Categorical(std::move(probs));
}

Categorical softmax(const Logits& z, Temperature t) {
    if (t.greedy()) {
        throw std::invalid_argument(
            "softmax: temperature 0 denotes greedy decoding; use point_mass_at_argmax");
    }
    double max_logit = kNegInf;
    for (double v : z.values) {
        if (v > max_logit) {
            max_logit = v;
        }
    }
    if (max_logit == kNegInf) {
        throw std::invalid_argument("softmax: all logits are -inf");
    }
    std::vector<double> weights(z.size());
    KahanAccumulator acc;
    for (std::size_t i = 0; i < z.size(); ++i) {
        // exp(-inf) == 0 exactly, so masked entries carry probability 0.
        weights[i] = std::exp((z.values[i] - max_logit) / t.value);
        acc.add(weights[i]);
    }
    const double total = acc.value();
    for (auto& w : weights) {
        w /= total;
    }
    return Categorical(std::move(weights));
}

Categorical masked_softmax(const Logits& z, const VocabMask& m, Temperature t) {
    require(m.vocab_size() == z.size(), "masked_softmax: mask/logits size mismatch");
    std::vector<double> masked(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        masked[i] = m.allows(i) ? z.values[i] : kNegInf;
    }
    return softmax(Logits(std::move(masked)), t);
}

Token argmax_index(const Categorical& d) {
    Token best = 0;
    for (std::size_t i = 1; i < d.size(); ++i) {
        if (d[i] > d[best]) {
            best = i;
        }
    }
    return best;
}

Categorical point_mass_at_argmax(const Categorical& d) {
    return Categorical::point_mass(d.size(), argmax_index(d));
}

Token sample_with_variate(const Categorical& d, double u) {
    require(u >= 0.0 && u < 1.0, "sample_with_variate: variate must lie in [0, 1)");
    double cumulative = 0.0;
    Token last_nonzero = 0;
    bool seen_nonzero = false;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i] > 0.0) {
            last_nonzero = i;
            seen_nonzero = true;
        }
        cumulative += d[i];
        if (u < cumulative) {
            return d[i] > 0.0 ? i : last_nonzero;
        }
    }
    // Rounding left the final cumulative a hair under 1.
    require(seen_nonzero, "sample_with_variate: distribution has no mass");
    return last_nonzero;
}

Token sample(const Categorical& d, RandomStream& rng) {
    return sample_with_variate(d, rng.next_uniform());
}

std::optional<Categorical> residual_distribution(const Categorical& p, const Categorical& q) {
    require(p.size() == q.size(), "residual_distribution: size mismatch");
    std::vector<double> excess(p.size());
    KahanAccumulator acc;
    for (std::size_t i = 0; i < p.size(); ++i) {
        excess[i] = p[i] > q[i] ? p[i] - q[i] : 0.0;
        acc.add(excess[i]);
    }
    const double total = acc.value();
    if (total < kResidualFloor) {
        return std::nullopt;
    }
    for (auto& e : excess) {
        e /= total;
    }
    return Categorical(std::move(excess));
}

Categorical apply_temperature(const Categorical& d, Temperature t) {
    if (t.value == 1.0) {
        return d;
    }
    if (t.greedy()) {
        return point_mass_at_argmax(d);
    }
    std::vector<double> logits(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        logits[i] = d[i] > 0.0 ? std::log(d[i]) : kNegInf;
    }
    return softmax(Logits(std::move(logits)), t);
}

Categorical masked_target(const Categorical& p, const VocabMask& m) {
    require(m.vocab_size() == p.size(), "masked_target: mask/distribution size mismatch");
    std::vector<double> restricted(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        restricted[i] = m.allows(i) ? p[i] : 0.0;
    }
    return Categorical::normalized(std::move(restricted));
}

}  // namespace speclab
