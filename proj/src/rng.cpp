#include "speclab/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace speclab {

std::uint64_t RandomStream::next_below(std::uint64_t n) {
    if (n == 0) {
        throw std::invalid_argument("next_below: n must be positive");
    }
    // Rejection to avoid modulo bias.
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

double RandomStream::next_gaussian() {
    if (has_cached_gaussian_) {
        has_cached_gaussian_ = false;
        return cached_gaussian_;
    }
    // Marsaglia polar method.
    double u, v, s;
    do {
        u = 2.0 * next_uniform() - 1.0;
        v = 2.0 * next_uniform() - 1.0;
        s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double factor = std::sqrt(-2.0 * std::log(s) / s);
    cached_gaussian_ = v * factor;
    has_cached_gaussian_ = true;
    return u * factor;
}

double RandomStream::next_gamma(double shape) {
    if (!(shape > 0.0)) {
        throw std::invalid_argument("next_gamma: shape must be positive");
    }
    if (shape < 1.0) {
        // Boost to shape+1 and scale back by U^{1/shape}.
        const double g = next_gamma(shape + 1.0);
        double u = next_uniform();
        while (u == 0.0) {
            u = next_uniform();
        }
        return g * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = next_gaussian();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = next_uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) {
            return d * v;
        }
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
            return d * v;
        }
    }
}

std::vector<double> RandomStream::next_dirichlet(std::size_t n, double concentration) {
    if (n == 0 || !(concentration > 0.0)) {
        throw std::invalid_argument("next_dirichlet: need n > 0 and concentration > 0");
    }
    std::vector<double> draws(n);
    double total = 0.0;
    for (auto& d : draws) {
        d = next_gamma(concentration);
        total += d;
    }
    if (total <= 0.0) {
        // All gammas underflowed (tiny concentration); fall back to a point mass
        // at a uniformly chosen index, the limiting distribution.
        std::vector<double> one_hot(n, 0.0);
        one_hot[static_cast<std::size_t>(next_below(n))] = 1.0;
        return one_hot;
    }
    for (auto& d : draws) {
        d /= total;
    }
    return draws;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream_id) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream_id + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a_mix(std::uint64_t h, std::uint64_t value) {
    for (int i = 0; i < 8; ++i) {
        h ^= (value >> (8 * i)) & 0xffULL;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace speclab
