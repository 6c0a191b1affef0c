#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <memory>

#include "speclab/losses.hpp"
#include "speclab/specdec.hpp"

using namespace speclab;
using namespace speclab::specdec;

namespace {

SpecConfig make_config(std::size_t k, DraftMode mode = DraftMode::Stochastic) {
    SpecConfig cfg;
    cfg.max_draft_len = k;
    cfg.draft_mode = mode;
    return cfg;
}

const std::vector<Token> kPrompt = {0};

}  // namespace

TEST_CASE("accept_prob") {
    const Categorical p({0.3, 0.7});
    const Categorical q({0.6, 0.4});
    CHECK(accept_prob(p, p, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(accept_prob(p, q, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(accept_prob(p, q, 1) == 1.0);  // p(x) >= q(x) clamps to one
    CHECK_THROWS_AS(accept_prob(p, Categorical({1.0, 0.0}), 1), std::logic_error);
}

TEST_CASE("greedy_accept_prob") {
    const Categorical q({0.5, 0.3, 0.2});
    const Categorical p({0.2, 0.5, 0.3});
    CHECK(greedy_accept_prob(p, q) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(greedy_accept_prob(Categorical::point_mass(3, 1), Categorical::point_mass(3, 1)) == 1.0);
    // Same pair: proper rejection sampling accepts far more often than the
    // greedy shortcut.
    CHECK(losses::acceptance_rate(p, q) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(losses::acceptance_rate(p, q) > greedy_accept_prob(p, q));
}

TEST_CASE("run_round") {
    SUBCASE("identical models accept the full draft") {
        const ConstantModel model(Categorical({0.25, 0.25, 0.25, 0.25}));
        RandomStream rng(3);
        for (int round = 0; round < 50; ++round) {
            const RoundTrace trace = run_round(model, model, kPrompt, make_config(4), rng);
            CHECK(trace.accepted_count == 4);
            CHECK(trace.steps.size() == 4);
            for (const auto& step : trace.steps) {
                CHECK(step.beta == 1.0);
                CHECK(step.accepted);
            }
        }
    }
    SUBCASE("disjoint supports reject immediately and resample from the target") {
        // Draft can only produce token 1, target only token 0.
        const ConstantModel target(Categorical({1.0, 0.0}));
        const ConstantModel draft(Categorical({0.0, 1.0}));
        RandomStream rng(4);
        const RoundTrace trace = run_round(target, draft, kPrompt, make_config(3), rng);
        CHECK(trace.accepted_count == 0);
        CHECK(trace.steps.size() == 1);
        CHECK(trace.steps[0].beta == 0.0);
        CHECK(trace.bonus_token == 0);
        CHECK(trace.bonus_from_residual);
    }
    SUBCASE("accepted flags form a prefix and betas stay in range") {
        const HashedDirichletModel target(6, 0.6, 11);
        const HashedDirichletModel draft(6, 0.6, 12);
        RandomStream rng(5);
        for (int round = 0; round < 200; ++round) {
            const RoundTrace trace = run_round(target, draft, kPrompt, make_config(5), rng);
            for (std::size_t i = 0; i < trace.steps.size(); ++i) {
                CHECK(trace.steps[i].beta >= 0.0);
                CHECK(trace.steps[i].beta <= 1.0);
                const bool is_last = i + 1 == trace.steps.size();
                CHECK(trace.steps[i].accepted == (is_last ? trace.accepted_count == 5 : true));
            }
        }
    }
    SUBCASE("marginal of the first emitted token equals the target (Monte Carlo)") {
        const ConstantModel target(Categorical({0.7, 0.3}));
        const ConstantModel draft(Categorical({0.4, 0.6}));
        RandomStream rng(6);
        const std::size_t n = 200000;
        std::size_t zeros = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const RoundTrace trace = run_round(target, draft, kPrompt, make_config(1), rng);
            const Token first = trace.accepted_count > 0 ? trace.steps[0].token : trace.bonus_token;
            zeros += first == 0 ? 1 : 0;
        }
        const double freq = static_cast<double>(zeros) / static_cast<double>(n);
        const double sigma = std::sqrt(0.7 * 0.3 / static_cast<double>(n));
        CHECK(std::abs(freq - 0.7) <= 3.0 * sigma);
    }
}

TEST_CASE("generate") {
    const HashedDirichletModel target(8, 0.7, 21);
    SUBCASE("zero budget emits nothing") {
        RandomStream rng(1);
        const auto result = generate(target, target, kPrompt, make_config(3), rng);
        CHECK(result.tokens.empty());
        CHECK(result.metrics.rounds == 0);
    }
    SUBCASE("draft equal to target emits K+1 per round") {
        RandomStream rng(2);
        SpecConfig cfg = make_config(3);
        cfg.max_new_tokens = 40;
        const auto result = generate(target, target, kPrompt, cfg, rng);
        CHECK(result.metrics.total_accepted == result.metrics.total_drafted);
        CHECK(result.metrics.emitted == result.metrics.rounds * 4);
        CHECK(result.tokens.size() == 40);
    }
    SUBCASE("per-round metric consistency") {
        const HashedDirichletModel draft(8, 0.7, 22);
        RandomStream rng(3);
        SpecConfig cfg = make_config(4);
        cfg.max_new_tokens = 300;
        const auto result = generate(target, draft, kPrompt, cfg, rng);
        const auto& per_position = result.metrics.per_position;
        for (std::size_t i = 0; i < per_position.size(); ++i) {
            CHECK(per_position[i].accepted <= per_position[i].drafted);
            if (i + 1 < per_position.size()) {
                CHECK(per_position[i + 1].drafted <= per_position[i].accepted);
            }
        }
        CHECK(per_position[0].drafted == result.metrics.rounds);
    }
}

TEST_CASE("tau") {
    AcceptanceMetrics metrics;
    metrics.total_drafted = 100;
    metrics.total_accepted = 50;
    CHECK(tau(metrics, 7) == doctest::Approx(4.5).epsilon(1e-12));
    metrics.total_accepted = 100;
    CHECK(tau(metrics, 7) == doctest::Approx(8.0).epsilon(1e-12));
    metrics.total_accepted = 0;
    CHECK(tau(metrics, 7) == doctest::Approx(1.0).epsilon(1e-12));
    metrics.total_drafted = 0;
    CHECK_THROWS_AS(tau(metrics, 7), std::domain_error);
}

TEST_CASE("expected_tau_analytic") {
    CHECK(expected_tau_analytic(std::vector<double>{1.0, 1.0, 1.0}) ==
          doctest::Approx(4.0).epsilon(1e-12));
    CHECK(expected_tau_analytic(std::vector<double>{0.0, 0.0}) ==
          doctest::Approx(1.0).epsilon(1e-12));
    // K=2 with both positions at 1/2: E[accepted] = 3/4, E[drafted] = 3/2.
    CHECK(expected_tau_analytic(std::vector<double>{0.5, 0.5}) ==
          doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("simulated tau converges to the enumeration oracle") {
    // Stationary per-position distributions: run independent rounds from a
    // fixed prompt and compare against exact enumeration.
    RandomStream setup(31);
    std::vector<Categorical> target_dists;
    std::vector<Categorical> draft_dists;
    std::vector<double> alphas;
    const std::size_t k = 4;
    for (std::size_t i = 0; i <= k; ++i) {
        target_dists.emplace_back(setup.next_dirichlet(8, 0.8));
        draft_dists.emplace_back(setup.next_dirichlet(8, 0.8));
        if (i < k) {
            alphas.push_back(losses::acceptance_rate(target_dists[i], draft_dists[i]));
        }
    }
    const PositionalModel target(kPrompt.size(), target_dists);
    const PositionalModel draft(kPrompt.size(), draft_dists);

    const RoundMoments oracle = enumerate_round_outcomes(alphas);
    const std::size_t rounds = 100000;
    AcceptanceMetrics metrics(k);
    RandomStream rng(32);
    for (std::size_t r = 0; r < rounds; ++r) {
        metrics.absorb(run_round(target, draft, kPrompt, make_config(k), rng));
    }
    const double simulated = tau(metrics, k);
    CHECK(simulated >= 1.0);
    CHECK(simulated <= static_cast<double>(k) + 1.0);
    CHECK(std::abs(simulated - oracle.expected_tau) <= 3.0 * oracle.tau_standard_error(rounds));

    // Empirical per-position acceptance matches sum min(p, q) within 3 sigma.
    for (std::size_t i = 0; i < k; ++i) {
        const auto& pc = metrics.per_position[i];
        REQUIRE(pc.drafted > 0);
        const double hat = static_cast<double>(pc.accepted) / static_cast<double>(pc.drafted);
        const double sigma =
            std::sqrt(alphas[i] * (1.0 - alphas[i]) / static_cast<double>(pc.drafted));
        CHECK(std::abs(hat - alphas[i]) <= 3.0 * sigma + 1e-12);
    }
}

TEST_CASE("greedy per-position acceptance converges to p at the draft argmax") {
    RandomStream setup(41);
    std::vector<Categorical> target_dists;
    std::vector<Categorical> draft_dists;
    const std::size_t k = 3;
    for (std::size_t i = 0; i <= k; ++i) {
        target_dists.emplace_back(setup.next_dirichlet(6, 1.0));
        draft_dists.emplace_back(setup.next_dirichlet(6, 1.0));
    }
    const PositionalModel target(kPrompt.size(), target_dists);
    const PositionalModel draft(kPrompt.size(), draft_dists);

    AcceptanceMetrics metrics(k);
    RandomStream rng(42);
    const std::size_t rounds = 100000;
    for (std::size_t r = 0; r < rounds; ++r) {
        metrics.absorb(run_round(target, draft, kPrompt, make_config(k, DraftMode::Greedy), rng));
    }
    for (std::size_t i = 0; i < k; ++i) {
        const auto& pc = metrics.per_position[i];
        if (pc.drafted < 100) {
            continue;  // deep positions may be rarely reached
        }
        const double expected = greedy_accept_prob(target_dists[i], draft_dists[i]);
        const double hat = static_cast<double>(pc.accepted) / static_cast<double>(pc.drafted);
        const double sigma =
            std::sqrt(expected * (1.0 - expected) / static_cast<double>(pc.drafted));
        CHECK(std::abs(hat - expected) <= 3.0 * sigma + 1e-12);
    }
}

TEST_CASE("exactness_enumerate") {
    SUBCASE("K=1, V=2 closed case equals the target") {
        const ConstantModel target(Categorical({0.7, 0.3}));
        const ConstantModel draft(Categorical({0.4, 0.6}));
        const Categorical marginal = exactness_enumerate(target, draft, kPrompt, 1);
        CHECK(marginal[0] == doctest::Approx(0.7).epsilon(1e-12));
        CHECK(marginal[1] == doctest::Approx(0.3).epsilon(1e-12));
    }
    SUBCASE("identical models are exactly preserved") {
        const ConstantModel model(Categorical({0.1, 0.2, 0.3, 0.4}));
        const Categorical marginal = exactness_enumerate(model, model, kPrompt, 3);
        for (std::size_t t = 0; t < 4; ++t) {
            CHECK(marginal[t] == doctest::Approx(model.distribution(kPrompt)[t]).epsilon(1e-12));
        }
    }
    SUBCASE("random context-dependent instances are lossless in stochastic mode") {
        RandomStream rng(51);
        for (int instance = 0; instance < 100; ++instance) {
            const std::size_t v = 2 + static_cast<std::size_t>(rng.next_below(3));
            const std::size_t k = 1 + static_cast<std::size_t>(rng.next_below(3));
            const HashedDirichletModel target(v, 0.7, rng.next_u64());
            const HashedDirichletModel draft(v, 0.7, rng.next_u64());
            const Categorical marginal = exactness_enumerate(target, draft, kPrompt, k);
            const Categorical expected = target.distribution(kPrompt);
            for (std::size_t t = 0; t < v; ++t) {
                CHECK(std::abs(marginal[t] - expected[t]) <= 1e-12);
            }
        }
    }
    SUBCASE("greedy draft mode is not lossless") {
        // p = [0.6, 0.4], q = [0.5, 0.5]: greedy drafts token 0 (tie-break),
        // accepts with 0.6, and the residual max(0, p-q) is a point mass at
        // 0, so token 1 can never be emitted.
        const ConstantModel target(Categorical({0.6, 0.4}));
        const ConstantModel draft(Categorical({0.5, 0.5}));
        const Categorical marginal =
            exactness_enumerate(target, draft, kPrompt, 1, DraftMode::Greedy);
        CHECK(marginal[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(marginal[1] == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("tractability bounds are enforced") {
        const ConstantModel big(Categorical::uniform(9));
        CHECK_THROWS_AS(exactness_enumerate(big, big, kPrompt, 1), std::invalid_argument);
        const ConstantModel small(Categorical::uniform(2));
        CHECK_THROWS_AS(exactness_enumerate(small, small, kPrompt, 4), std::invalid_argument);
    }
}

TEST_CASE("temperature is applied to both sides of the protocol") {
    // At T=0 both distributions collapse to argmax point masses; the round
    // accepts iff the argmaxes agree, and otherwise the bonus comes from the
    // target's argmax.
    const ConstantModel target(Categorical({0.6, 0.4}));
    const ConstantModel draft(Categorical({0.1, 0.9}));
    SpecConfig cfg = make_config(1);
    cfg.temperature = Temperature(0.0);
    RandomStream rng(61);
    const RoundTrace trace = run_round(target, draft, kPrompt, cfg, rng);
    CHECK(trace.accepted_count == 0);
    CHECK(trace.steps[0].token == 1);
    CHECK(trace.bonus_token == 0);
}

TEST_CASE("smoothed draft model is a proper mixture with the uniform") {
    auto base = std::make_shared<ConstantModel>(Categorical({0.8, 0.2}));
    const SmoothedModel smoothed(base, 0.5);
    const Categorical q = smoothed.distribution(kPrompt);
    CHECK(q[0] == doctest::Approx(0.65).epsilon(1e-12));
    CHECK(q[1] == doctest::Approx(0.35).epsilon(1e-12));
}
