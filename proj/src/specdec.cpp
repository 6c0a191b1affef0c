#include "speclab/specdec.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "speclab/numeric.hpp"

namespace speclab::specdec {

namespace {

void require(bool ok, const char* message) {
    if (!ok) {
        throw std::invalid_argument(message);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

PositionalModel::PositionalModel(std::size_t prompt_len, std::vector<Categorical> per_position)
    : prompt_len_(prompt_len), per_position_(std::move(per_position)) {
    require(!per_position_.empty(), "PositionalModel: need at least one distribution");
    for (const auto& d : per_position_) {
        require(d.size() == per_position_.front().size(), "PositionalModel: vocab size mismatch");
    }
}

Categorical PositionalModel::distribution(std::span<const Token> context) const {
    const std::size_t pos = context.size() >= prompt_len_ ? context.size() - prompt_len_ : 0;
    return per_position_[pos < per_position_.size() ? pos : per_position_.size() - 1];
}

HashedDirichletModel::HashedDirichletModel(std::size_t vocab_size, double concentration,
                                           std::uint64_t seed)
    : vocab_size_(vocab_size), concentration_(concentration), seed_(seed) {
    require(vocab_size >= 2, "HashedDirichletModel: vocab size must be at least 2");
    require(concentration > 0.0, "HashedDirichletModel: concentration must be positive");
}

Categorical HashedDirichletModel::distribution(std::span<const Token> context) const {
    std::uint64_t h = fnv1a_mix(0xcbf29ce484222325ULL, seed_);
    h = fnv1a_mix(h, context.size());
    for (Token t : context) {
        h = fnv1a_mix(h, static_cast<std::uint64_t>(t));
    }
    RandomStream rng(h);
    return Categorical(rng.next_dirichlet(vocab_size_, concentration_));
}

SmoothedModel::SmoothedModel(std::shared_ptr<const SequenceModel> base, double rho)
    : base_(std::move(base)), rho_(rho) {
    require(base_ != nullptr, "SmoothedModel: base model required");
    require(rho_ >= 0.0 && rho_ <= 1.0, "SmoothedModel: rho must lie in [0, 1]");
}

Categorical SmoothedModel::distribution(std::span<const Token> context) const {
    const Categorical base = base_->distribution(context);
    const double uniform = 1.0 / static_cast<double>(base.size());
    std::vector<double> mixed(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        mixed[i] = (1.0 - rho_) * base[i] + rho_ * uniform;
    }
    return Categorical::normalized(std::move(mixed));
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

void AcceptanceMetrics::absorb(const RoundTrace& trace) {
    if (per_position.size() < trace.steps.size()) {
        per_position.resize(trace.steps.size());
    }
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        ++per_position[i].drafted;
        ++total_drafted;
        if (trace.steps[i].accepted) {
            ++per_position[i].accepted;
            ++total_accepted;
        }
    }
    ++rounds;
    emitted += trace.accepted_count + 1;
}

void AcceptanceMetrics::merge(const AcceptanceMetrics& other) {
    if (per_position.size() < other.per_position.size()) {
        per_position.resize(other.per_position.size());
    }
    for (std::size_t i = 0; i < other.per_position.size(); ++i) {
        per_position[i].accepted += other.per_position[i].accepted;
        per_position[i].drafted += other.per_position[i].drafted;
    }
    total_accepted += other.total_accepted;
    total_drafted += other.total_drafted;
    rounds += other.rounds;
    emitted += other.emitted;
}

// ---------------------------------------------------------------------------
// Protocol
// ---------------------------------------------------------------------------

double accept_prob(const Categorical& p, const Categorical& q, Token x) {
    require(p.size() == q.size(), "accept_prob: size mismatch");
    require(x < q.size(), "accept_prob: token out of range");
    if (q[x] == 0.0) {
        throw std::logic_error(
            "accept_prob: drafted token has zero draft probability (protocol violation)");
    }
    const double ratio = p[x] / q[x];
    return ratio < 1.0 ? ratio : 1.0;
}

double greedy_accept_prob(const Categorical& p, const Categorical& q) {
    require(p.size() == q.size(), "greedy_accept_prob: size mismatch");
    return p[argmax_index(q)];
}

RoundTrace run_round(const SequenceModel& target, const SequenceModel& draft,
                     std::span<const Token> context, const SpecConfig& cfg, RandomStream& rng) {
    require(cfg.max_draft_len >= 1, "run_round: max draft length must be at least 1");

    std::vector<Token> ctx(context.begin(), context.end());
    RoundTrace trace{.steps = {}, .bonus_token = 0, .accepted_count = 0, .bonus_from_residual = false};

    for (std::size_t position = 0; position < cfg.max_draft_len; ++position) {
        Categorical q = apply_temperature(draft.distribution(ctx), cfg.temperature);
        Categorical p = apply_temperature(target.distribution(ctx), cfg.temperature);

        Token x;
        double beta;
        if (cfg.draft_mode == DraftMode::Greedy) {
            x = argmax_index(q);
            beta = p[x];  // q scored as a point mass at its argmax
        } else {
            x = sample(q, rng);
            beta = accept_prob(p, q, x);
        }

        const bool accepted = rng.next_uniform() < beta;
        trace.steps.push_back(DraftStep{x, q, p, beta, accepted});

        if (!accepted) {
            // Resample from the residual against the draft's reported
            // distribution; degenerate residual falls back to the target.
            const auto residual = residual_distribution(p, q);
            trace.bonus_from_residual = residual.has_value();
            trace.bonus_token = sample(residual.has_value() ? *residual : p, rng);
            return trace;
        }
        ctx.push_back(x);
        ++trace.accepted_count;
    }

    // Full acceptance: bonus from the target at position K+1.
    const Categorical p_next = apply_temperature(target.distribution(ctx), cfg.temperature);
    trace.bonus_token = sample(p_next, rng);
    return trace;
}

GenerationResult generate(const SequenceModel& target, const SequenceModel& draft,
                          std::span<const Token> prompt, const SpecConfig& cfg, RandomStream& rng,
                          std::vector<RoundTrace>* trace_sink) {
    GenerationResult result;
    result.metrics = AcceptanceMetrics(cfg.max_draft_len);
    std::vector<Token> ctx(prompt.begin(), prompt.end());

    while (result.tokens.size() < cfg.max_new_tokens) {
        RoundTrace trace = run_round(target, draft, ctx, cfg, rng);
        result.metrics.absorb(trace);

        bool stopped = false;
        for (std::size_t i = 0; i < trace.accepted_count && !stopped; ++i) {
            const Token t = trace.steps[i].token;
            ctx.push_back(t);
            result.tokens.push_back(t);
            stopped = cfg.stop_token && t == *cfg.stop_token;
        }
        if (!stopped) {
            ctx.push_back(trace.bonus_token);
            result.tokens.push_back(trace.bonus_token);
            stopped = cfg.stop_token && trace.bonus_token == *cfg.stop_token;
        }
        if (trace_sink != nullptr) {
            trace_sink->push_back(std::move(trace));
        }
        if (stopped) {
            break;
        }
    }
    if (result.tokens.size() > cfg.max_new_tokens) {
        result.tokens.resize(cfg.max_new_tokens);
    }
    return result;
}

double tau(const AcceptanceMetrics& metrics, std::size_t max_draft_len) {
    if (metrics.total_drafted == 0) {
        throw std::domain_error("tau: no drafted tokens");
    }
    return static_cast<double>(max_draft_len) * static_cast<double>(metrics.total_accepted) /
               static_cast<double>(metrics.total_drafted) +
           1.0;
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

RoundMoments enumerate_round_outcomes(std::span<const double> alphas) {
    require(!alphas.empty(), "enumerate_round_outcomes: need at least one position");
    for (double a : alphas) {
        require(a >= 0.0 && a <= 1.0, "enumerate_round_outcomes: alphas must lie in [0, 1]");
    }
    const std::size_t k = alphas.size();

    // Outcomes: rejection at position r (accepted = r, drafted = r + 1) for
    // r < k, or full acceptance (accepted = drafted = k).
    KahanAccumulator e_accepted;
    KahanAccumulator e_drafted;
    std::vector<double> weights;
    std::vector<std::pair<double, double>> outcomes;  // (accepted, drafted)
    double prefix = 1.0;
    for (std::size_t r = 0; r < k; ++r) {
        const double w = prefix * (1.0 - alphas[r]);
        weights.push_back(w);
        outcomes.emplace_back(static_cast<double>(r), static_cast<double>(r + 1));
        e_accepted.add(w * static_cast<double>(r));
        e_drafted.add(w * static_cast<double>(r + 1));
        prefix *= alphas[r];
    }
    weights.push_back(prefix);
    outcomes.emplace_back(static_cast<double>(k), static_cast<double>(k));
    e_accepted.add(prefix * static_cast<double>(k));
    e_drafted.add(prefix * static_cast<double>(k));

    RoundMoments m;
    m.max_draft_len = k;
    m.expected_accepted = e_accepted.value();
    m.expected_drafted = e_drafted.value();
    const double ratio = m.expected_accepted / m.expected_drafted;
    m.expected_tau = static_cast<double>(k) * ratio + 1.0;

    KahanAccumulator residual_sq;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double res = outcomes[i].first - ratio * outcomes[i].second;
        residual_sq.add(weights[i] * res * res);
    }
    m.second_moment_residual = residual_sq.value();
    return m;
}

double RoundMoments::tau_standard_error(std::size_t rounds) const {
    // Delta method for the ratio estimator sum(a) / sum(d).
    if (rounds == 0) {
        return std::numeric_limits<double>::infinity();
    }
    const double se_ratio =
        std::sqrt(second_moment_residual / static_cast<double>(rounds)) / expected_drafted;
    return static_cast<double>(max_draft_len) * se_ratio;
}

double expected_tau_analytic(std::span<const double> alphas) {
    return enumerate_round_outcomes(alphas).expected_tau;
}

namespace {

struct EnumerationState {
    const SequenceModel& target;
    const SequenceModel& draft;
    std::size_t max_draft_len;
    DraftMode mode;
    Temperature temperature;
    std::vector<double> marginal;
    double total_weight = 0.0;
};

// Walks the full probability tree of one round. first_token is the first
// emitted token once decided; terminal branches attribute their weight to
// it (or to the bonus draw when the first position was rejected).
void walk_round(EnumerationState& state, std::vector<Token>& ctx, std::size_t depth, double weight,
                std::optional<Token> first_token) {
    if (weight == 0.0) {
        return;
    }
    if (depth == state.max_draft_len) {
        // Full acceptance: bonus sampled from the target at position K+1.
        state.total_weight += weight;
        if (first_token.has_value()) {
            state.marginal[*first_token] += weight;
        } else {
            const Categorical p_next =
                apply_temperature(state.target.distribution(ctx), state.temperature);
            for (std::size_t t = 0; t < p_next.size(); ++t) {
                state.marginal[t] += weight * p_next[t];
            }
        }
        return;
    }

    const Categorical q = apply_temperature(state.draft.distribution(ctx), state.temperature);
    const Categorical p = apply_temperature(state.target.distribution(ctx), state.temperature);
    const auto residual = residual_distribution(p, q);
    const Categorical& reject_dist = residual.has_value() ? *residual : p;

    for (Token x = 0; x < q.size(); ++x) {
        double draw_prob;
        double beta;
        if (state.mode == DraftMode::Greedy) {
            if (x != argmax_index(q)) {
                continue;
            }
            draw_prob = 1.0;
            beta = p[x];
        } else {
            draw_prob = q[x];
            if (draw_prob == 0.0) {
                continue;
            }
            beta = accept_prob(p, q, x);
        }

        // Accept branch: recurse one position deeper.
        const double w_accept = weight * draw_prob * beta;
        if (w_accept > 0.0) {
            ctx.push_back(x);
            walk_round(state, ctx, depth + 1,
                       w_accept, first_token.has_value() ? first_token : std::optional<Token>(x));
            ctx.pop_back();
        }

        // Reject branch: bonus from the residual, round ends.
        const double w_reject = weight * draw_prob * (1.0 - beta);
        if (w_reject > 0.0) {
            state.total_weight += w_reject;
            if (first_token.has_value()) {
                state.marginal[*first_token] += w_reject;
            } else {
                for (std::size_t t = 0; t < reject_dist.size(); ++t) {
                    state.marginal[t] += w_reject * reject_dist[t];
                }
            }
        }
    }
}

}  // namespace

Categorical exactness_enumerate(const SequenceModel& target, const SequenceModel& draft,
                                std::span<const Token> prompt, std::size_t max_draft_len,
                                DraftMode mode, Temperature temperature) {
    require(max_draft_len >= 1 && max_draft_len <= 3,
            "exactness_enumerate: K must lie in [1, 3] (tractability bound)");
    require(target.vocab_size() <= 8, "exactness_enumerate: V must be <= 8 (tractability bound)");
    require(target.vocab_size() == draft.vocab_size(), "exactness_enumerate: vocab mismatch");

    EnumerationState state{target, draft, max_draft_len, mode, temperature,
                           std::vector<double>(target.vocab_size(), 0.0)};
    std::vector<Token> ctx(prompt.begin(), prompt.end());
    walk_round(state, ctx, 0, 1.0, std::nullopt);

    if (std::abs(state.total_weight - 1.0) > 1e-9) {
        throw std::logic_error("exactness_enumerate: probability tree does not sum to 1 (got " +
                               std::to_string(state.total_weight) + ")");
    }
    // Direct construction doubles as a conservation check: the summed
    // marginal must already be a distribution.
    return Categorical(std::move(state.marginal));
}

}  // namespace speclab::specdec
