#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <limits>

#include "speclab/dist.hpp"
#include "speclab/numeric.hpp"

using namespace speclab;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("softmax basics") {
    SUBCASE("uniform logits give uniform probabilities") {
        const Categorical d = softmax(Logits({0.0, 0.0, 0.0}));
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(d[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
        }
    }
    SUBCASE("log-weights") {
        const Categorical d = softmax(Logits({std::log(2.0), 0.0}));
        CHECK(d[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
        CHECK(d[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("masked entries get probability exactly zero") {
        const Categorical d = softmax(Logits({5.0, -kInf, 5.0}));
        CHECK(d[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(d[1] == 0.0);
        CHECK(d[2] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("temperature zero is rejected") {
        CHECK_THROWS_AS(softmax(Logits({1.0, 2.0}), Temperature(0.0)), std::invalid_argument);
    }
    SUBCASE("all -inf is rejected") {
        CHECK_THROWS_AS(softmax(Logits({-kInf, -kInf})), std::invalid_argument);
    }
}

TEST_CASE("softmax properties over random logits") {
    RandomStream rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t v = 2 + static_cast<std::size_t>(rng.next_below(63));
        std::vector<double> z(v);
        for (auto& x : z) {
            x = 3.0 * rng.next_gaussian();
        }
        const Categorical q = softmax(Logits(z));
        CHECK(std::abs(kahan_sum(q.probs()) - 1.0) <= 1e-12);

        // Shift invariance.
        const double shift = 10.0 * rng.next_gaussian();
        std::vector<double> shifted = z;
        for (auto& x : shifted) {
            x += shift;
        }
        const Categorical q_shifted = softmax(Logits(shifted));
        for (std::size_t i = 0; i < v; ++i) {
            CHECK(q_shifted[i] == doctest::Approx(q[i]).epsilon(1e-12));
        }

        // Argmax is invariant under positive temperature.
        const Categorical hot = softmax(Logits(z), Temperature(0.25));
        const Categorical cold = softmax(Logits(z), Temperature(4.0));
        CHECK(argmax_index(hot) == argmax_index(cold));
        CHECK(argmax_index(hot) == argmax_index(q));
    }
}

TEST_CASE("masked_softmax") {
    SUBCASE("mask restricted symmetry") {
        const Categorical d = masked_softmax(Logits({1.0, 1.0, 1.0}), VocabMask(3, {0, 1}));
        CHECK(d[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(d[1] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(d[2] == 0.0);
    }
    SUBCASE("hand evaluation") {
        const Categorical d = masked_softmax(Logits({0.0, std::log(3.0)}), VocabMask(2, {0, 1}));
        CHECK(d[0] == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(d[1] == doctest::Approx(0.75).epsilon(1e-12));
    }
    SUBCASE("full mask equals softmax entrywise") {
        RandomStream rng(5);
        std::vector<double> z(8);
        for (auto& x : z) {
            x = rng.next_gaussian();
        }
        const Categorical plain = softmax(Logits(z));
        const Categorical masked = masked_softmax(Logits(z), VocabMask::full(8));
        for (std::size_t i = 0; i < 8; ++i) {
            CHECK(std::abs(plain[i] - masked[i]) <= 1e-15);
        }
    }
    SUBCASE("empty mask is rejected at construction") {
        CHECK_THROWS_AS(VocabMask(4, {}), std::invalid_argument);
    }
}

TEST_CASE("point_mass_at_argmax") {
    CHECK(point_mass_at_argmax(Categorical({0.2, 0.5, 0.3})) == Categorical({0.0, 1.0, 0.0}));
    // Ties break to the lowest index.
    CHECK(point_mass_at_argmax(Categorical({0.5, 0.5})) == Categorical({1.0, 0.0}));
    const Categorical one_hot = Categorical::point_mass(4, 2);
    CHECK(point_mass_at_argmax(one_hot) == one_hot);
}

TEST_CASE("sample") {
    SUBCASE("point mass ignores the variate") {
        const Categorical d = Categorical::point_mass(5, 3);
        for (double u : {0.0, 0.1, 0.5, 0.9, 0.999999}) {
            CHECK(sample_with_variate(d, u) == 3);
        }
    }
    SUBCASE("inverse CDF") {
        CHECK(sample_with_variate(Categorical({0.5, 0.5}), 0.25) == 0);
        CHECK(sample_with_variate(Categorical({0.5, 0.5}), 0.75) == 1);
    }
    SUBCASE("empirical frequency within 3 sigma") {
        const Categorical d({0.7, 0.3});
        RandomStream rng(42);
        const std::size_t n = 1000000;
        std::size_t zeros = 0;
        for (std::size_t i = 0; i < n; ++i) {
            zeros += sample(d, rng) == 0 ? 1 : 0;
        }
        const double sigma = std::sqrt(0.7 * 0.3 / static_cast<double>(n));
        CHECK(std::abs(static_cast<double>(zeros) / static_cast<double>(n) - 0.7) <= 3.0 * sigma);
    }
}

TEST_CASE("residual_distribution") {
    SUBCASE("hand evaluation") {
        const auto r =
            residual_distribution(Categorical({0.2, 0.5, 0.3}), Categorical({0.5, 0.3, 0.2}));
        REQUIRE(r.has_value());
        CHECK((*r)[0] == 0.0);
        CHECK((*r)[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
        CHECK((*r)[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("identical distributions have no rejection mass") {
        const Categorical p({0.3, 0.7});
        CHECK_FALSE(residual_distribution(p, p).has_value());
    }
    SUBCASE("disjoint point masses") {
        const auto r =
            residual_distribution(Categorical::point_mass(2, 0), Categorical::point_mass(2, 1));
        REQUIRE(r.has_value());
        CHECK(*r == Categorical::point_mass(2, 0));
    }
    SUBCASE("output is a valid distribution for random pairs") {
        RandomStream rng(9);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t v = 2 + static_cast<std::size_t>(rng.next_below(15));
            const Categorical p(rng.next_dirichlet(v, 0.5));
            const Categorical q(rng.next_dirichlet(v, 0.5));
            const auto r = residual_distribution(p, q);
            if (r.has_value()) {
                CHECK(std::abs(kahan_sum(r->probs()) - 1.0) <= 1e-12);
            }
        }
    }
}

TEST_CASE("apply_temperature") {
    const Categorical d({0.6, 0.3, 0.1, 0.0});
    SUBCASE("unit temperature is a bit-exact pass-through") {
        CHECK(apply_temperature(d, Temperature(1.0)) == d);
    }
    SUBCASE("zero temperature collapses to the argmax") {
        CHECK(apply_temperature(d, Temperature(0.0)) == Categorical::point_mass(4, 0));
    }
    SUBCASE("zero entries stay exactly zero") {
        const Categorical hot = apply_temperature(d, Temperature(2.0));
        CHECK(hot[3] == 0.0);
        CHECK(std::abs(kahan_sum(hot.probs()) - 1.0) <= 1e-12);
    }
}

TEST_CASE("categorical validation") {
    CHECK_THROWS_AS(Categorical({0.5, 0.4}), std::invalid_argument);   // bad sum
    CHECK_THROWS_AS(Categorical({1.5, -0.5}), std::invalid_argument);  // negative entry
    CHECK_THROWS_AS(Categorical({1.0}), std::invalid_argument);        // vocabulary too small
    CHECK_THROWS_AS(Categorical::normalized({0.0, 0.0}), std::invalid_argument);
    CHECK_NOTHROW(Categorical({1.0, 0.0}));
}

TEST_CASE("masked_target renormalizes inside the mask") {
    const Categorical p({0.5, 0.3, 0.2});
    const Categorical restricted = masked_target(p, VocabMask(3, {0, 1}));
    CHECK(restricted[0] == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(restricted[1] == doctest::Approx(0.375).epsilon(1e-12));
    CHECK(restricted[2] == 0.0);
}
